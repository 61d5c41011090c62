//! Joint training of backbone, objectness head and detector, then threshold calibration from
//! the objectness statistics recorded during training.
//!
//! ```text
//! cargo run --release --example train_and_calibrate -- [num_scenes] [epochs] [out_dir]
//! ```
//!
//! The defaults train a reduced run in under two minutes; `200 12` reproduces the full desk
//! profile. The output directory holds the checkpoint, its config and `calibration.json`, which
//! the `gated_inference` and `threshold_sweep` examples read.

use std::path::PathBuf;

use gated_detect::cli::{cmd_calibrate, cmd_train_scenes};
use gated_detect::config::RunConfig;
use gated_detect::synth::generate_scenes;

fn main() -> gated_detect::Result<()> {
    let mut args = std::env::args().skip(1);
    let scenes: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gated-detect-train"));

    let mut config = RunConfig {
        num_scenes: scenes,
        ..RunConfig::default()
    };
    config.train.sgd.epochs = epochs;
    config.train.sgd.decay_epochs = vec![epochs * 2 / 3, epochs * 11 / 12];
    let config = config.validated()?;

    let data = generate_scenes(&config.scene, config.num_scenes)?;
    let report = cmd_train_scenes(&config, &data, &out, |e| {
        println!(
            "epoch {:>2}  lr {:.0e}  loss {:.4}  oan {:.4}  class {:.4}  box {:.4}",
            e.epoch, e.learning_rate, e.loss, e.loss_oan, e.loss_class, e.loss_box
        )
    })?;
    println!(
        "{} parameters, checkpoint {} (checksum {:016x})",
        report.model.parameter_count(),
        report.checkpoint.display(),
        report.checksum
    );

    let cal = cmd_calibrate(&config, &out.join("stats.json"), None, Some(&report.checkpoint), &out)?;
    println!(
        "calibrated over {} maps: m = {:.4}, v = {:.4}, T = (m + v)^2 / {} = {:.5}",
        cal.window, cal.m, cal.v, cal.k, cal.threshold
    );
    Ok(())
}
