//! Sliding-window tiling: the large-image patch grid and per-patch ground truth.
//!
//! ```text
//! cargo run --release --example tiling
//! ```

use gated_detect::synth::{generate_scene, SceneSpec};
use gated_detect::tiler::{crop_patches, plan_tiles, TilePlan};

fn main() -> gated_detect::Result<()> {
    let xs = plan_tiles(29200, 1024, 824)?;
    let ys = plan_tiles(27620, 1024, 824)?;
    println!(
        "29200 x 27620 at 1024/824: {} x {} = {} patches, last origins ({}, {})",
        xs.len(),
        ys.len(),
        xs.len() * ys.len(),
        xs.last().unwrap(),
        ys.last().unwrap()
    );

    let scene = generate_scene(&SceneSpec::default())?;
    let plan = TilePlan::for_scene(&scene, 128, 104)?;
    let patches = crop_patches(&scene, &plan)?;
    println!("\n512 x 512 scene with {} objects, {} patches:", scene.boxes.len(), patches.len());
    for p in &patches {
        let cell = if p.boxes.is_empty() { ".".to_string() } else { p.boxes.len().to_string() };
        print!("{cell:>3}");
        if p.origin.0 == *plan.origins_x.last().unwrap() {
            println!();
        }
    }
    // overlap means an object can be assigned to more than one patch
    let assignments: usize = patches.iter().map(|p| p.object_ids.len()).sum();
    println!("{assignments} object-patch assignments for {} objects", scene.boxes.len());
    Ok(())
}
