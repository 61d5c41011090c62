//! Threshold sweep and speed model.
//!
//! The sweep trades skipped patches against gate recall and mAP. A fixed-cost stand-in for an
//! expensive detector then shows how the skip ratio turns into throughput: with per-patch
//! detector cost `c` and gate overhead `o`, the expected gain at skip ratio `ρ` is
//! `(c + o) / ((1 − ρ)·c + o)`.
//!
//! ```text
//! cargo run --release --example train_and_calibrate
//! cargo run --release --example threshold_sweep -- [run_dir] [stub_ms]
//! ```

use std::path::PathBuf;
use std::time::Duration;

use gated_detect::cli::load_model;
use gated_detect::config::RunConfig;
use gated_detect::dataset::read_json;
use gated_detect::metrics::sweep_csv;
use gated_detect::oan::Calibration;
use gated_detect::pipeline::{bench, default_threshold_grid, sweep, FixedCostDetector, HeadDetector};
use gated_detect::synth::generate_scenes;

fn main() -> gated_detect::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gated-detect-train"));
    let stub_ms: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);

    let config = RunConfig::load(&dir.join("config.json"))?;
    let (model, _) = load_model(&config, &dir.join("model.ckpt"))?;
    let cal: Calibration = read_json(&dir.join("calibration.json"))?;
    let eval = generate_scenes(&config.eval_scene_spec(), 8)?;
    let det = HeadDetector {
        keep_threshold: config.infer.keep_threshold,
    };
    let rows: Vec<_> = sweep(&model, &det, &eval, &default_threshold_grid(cal.threshold), &config.infer, None)?
        .into_iter()
        .map(|e| e.row)
        .collect();
    println!("calibrated T* = {:.5}\n", cal.threshold);
    print!("{}", sweep_csv(&rows));

    let stub = FixedCostDetector {
        cost: Duration::from_millis(stub_ms),
    };
    let at = |t: f64| bench(&model, &stub, &eval, t, &config.infer, None);
    let overhead = at(f64::INFINITY)?;
    let o = overhead.elapsed.as_secs_f64() / overhead.passed.len() as f64;
    let c = stub.cost.as_secs_f64();
    let base = at(0.0)?.row.fps;
    println!("\nstub detector {stub_ms} ms, gate overhead {:.2} ms/patch", o * 1e3);
    let mut last_skip = -1.0;
    for r in &rows {
        if r.skip_ratio == last_skip {
            continue;
        }
        last_skip = r.skip_ratio;
        let rho = r.skip_ratio;
        println!(
            "T = {:.4}  skip {rho:.3}  measured gain {:.2}  model {:.2}",
            r.threshold,
            at(r.threshold)?.row.fps / base,
            (c + o) / ((1.0 - rho) * c + o)
        );
    }
    Ok(())
}
