//! Gated inference on one large scene: every patch goes through the backbone and objectness
//! head, and only patches whose peak objectness exceeds the threshold reach the detector.
//!
//! ```text
//! cargo run --release --example train_and_calibrate
//! cargo run --release --example gated_inference -- [run_dir] [threshold]
//! ```
//!
//! `run_dir` defaults to the `train_and_calibrate` output. Without an explicit threshold the
//! calibrated one is used.

use std::path::PathBuf;

use gated_detect::cli::load_model;
use gated_detect::config::RunConfig;
use gated_detect::dataset::read_json;
use gated_detect::oan::Calibration;
use gated_detect::pipeline::{bench, HeadDetector};
use gated_detect::synth::generate_scenes;

fn main() -> gated_detect::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gated-detect-train"));
    let config = RunConfig::load(&dir.join("config.json"))?;
    let (model, _) = load_model(&config, &dir.join("model.ckpt"))?;
    let threshold = match args.next().and_then(|s| s.parse().ok()) {
        Some(t) => t,
        None => read_json::<Calibration>(&dir.join("calibration.json"))?.threshold,
    };

    let scene = generate_scenes(&config.eval_scene_spec(), 1)?;
    let det = HeadDetector {
        keep_threshold: config.infer.keep_threshold,
    };
    println!("scene with {} objects", scene[0].boxes.len());
    for t in [0.0, threshold] {
        let e = bench(&model, &det, &scene, t, &config.infer, None)?;
        println!(
            "T = {t:.4}: {} of {} patches skipped, gate precision {:.3}, recall {:.3}, {} detections, mAP {:.1}",
            e.gate.filtered_patches,
            e.gate.total_patches,
            e.gate.precision,
            e.gate.recall,
            e.scenes[0].detections.len(),
            e.row.map
        );
    }

    let e = bench(&model, &det, &scene, threshold, &config.infer, None)?;
    println!("\npeak objectness per patch at T = {threshold:.4} (* = passed):");
    let per_row = (scene[0].raster.width() - config.model.patch_size).div_ceil(config.infer.stride) + 1;
    for (i, p) in e.scenes[0].patches.iter().enumerate() {
        print!("{:7.4}{}", p.decision.confidence, if p.decision.passed { '*' } else { ' ' });
        if (i + 1) % per_row == 0 {
            println!();
        }
    }
    let dets = &e.scenes[0].detections;
    println!("\n{} detections after merging, top 10:", dets.len());
    for d in dets.iter().take(10) {
        let b = d.bbox;
        println!(
            "  class {} score {:.2} at ({:.0}, {:.0})-({:.0}, {:.0})",
            d.class_id, d.score, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    Ok(())
}
