//! Assembling per-patch detections into one scene-level result.
//!
//! Objects in the overlap between windows are detected twice; translating to scene
//! coordinates and running class-wise NMS keeps one copy.
//!
//! ```text
//! cargo run --release --example merge_detections
//! ```

use gated_detect::geometry::BBox;
use gated_detect::metrics::{merge_scene, Detection};

fn det(x: f64, y: f64, size: f64, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox {
            x_min: x,
            y_min: y,
            x_max: x + size,
            y_max: y + size,
        },
        class_id,
        score,
    }
}

fn main() {
    // one object at scene (110, 20) seen from windows at x = 0 and x = 104, plus a second
    // object of another class at the same place
    let per_patch = vec![
        ((0, 0), vec![det(110.0, 20.0, 14.0, 0, 0.91), det(40.0, 60.0, 10.0, 2, 0.40)]),
        ((104, 0), vec![det(6.5, 20.5, 14.0, 0, 0.87), det(6.0, 20.0, 14.0, 1, 0.30)]),
    ];
    for (origin, dets) in &per_patch {
        println!("window at {origin:?}: {} detections", dets.len());
    }
    for d in merge_scene(&per_patch, 0.1) {
        let b = d.bbox;
        println!(
            "class {} score {:.2} at ({:.1}, {:.1})-({:.1}, {:.1})",
            d.class_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
}
