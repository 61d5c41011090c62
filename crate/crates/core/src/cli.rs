//! Command-line front end. Each subcommand is also a library function so runs can be scripted.
//!
//! Every command writes `summary.json` into its output directory with the config hash, the seed
//! and, where a checkpoint is involved, its content hash.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{content_hash, RunConfig};
use crate::dataset::{read_dataset, read_json, read_scene, write_dataset, write_json};
use crate::error::{Error, Result};
use crate::metrics::{DetectionRecord, GateReport, SweepRow, sweep_csv};
use crate::model::Model;
use crate::nn::Checkpoint;
use crate::oan::{calibrate_threshold, Calibration, ThresholdStats};
use crate::pipeline::{bench, default_threshold_grid, sweep, worker_pool, HeadDetector};
use crate::raster::GrayImage;
use crate::synth::{generate_scenes, AnnotatedScene};
use crate::train::{prepare_samples, train_with_progress, EpochLog};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATS_FILE: &str = "stats.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Parser, Debug)]
#[command(name = "gated-detect", version, about = "Gated object detection on large synthetic images")]
pub struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reseeds scene generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate training and evaluation scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a synthesized dataset and record objectness statistics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the activation threshold from recorded statistics.
    Calibrate {
        #[arg(long)]
        stats: PathBuf,
        /// Overrides `calibration_k` from the config.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gated inference on one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        threshold: ThresholdArg,
        /// PGM raster.
        #[arg(long)]
        scene: PathBuf,
        /// Optional annotation JSON for the gate report.
        #[arg(long)]
        annotation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time gated inference over a dataset at one threshold.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        threshold: ThresholdArg,
        /// Parallel patch inference; only single-worker numbers are comparable.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time and evaluate a grid of thresholds, written as CSV.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Centres the default grid when the config lists no thresholds.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct ThresholdArg {
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Reads the threshold from a calibration JSON.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

impl ThresholdArg {
    pub fn resolve(&self) -> Result<f64> {
        match (&self.threshold, &self.calibration) {
            (Some(t), _) => Ok(*t),
            (None, Some(p)) => Ok(read_json::<Calibration>(p)?.threshold),
            (None, None) => Err(Error::validation("threshold", "give --threshold or --calibration")),
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_hash: Option<String>,
    result: Value,
}

fn write_summary(out: &Path, command: &str, config: &RunConfig, checkpoint_hash: Option<String>, result: Value) -> Result<()> {
    write_json(
        &out.join(SUMMARY_FILE),
        &Summary {
            command,
            config_hash: config.hash(),
            seed: config.scene.seed,
            checkpoint_hash,
            result,
        },
    )
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serialises")
}

/// Writes `<out>/train` and `<out>/eval`, each with its own manifest.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    let train = generate_scenes(&config.scene, config.num_scenes)?;
    let eval = generate_scenes(&config.eval_scene_spec(), config.eval_scenes)?;
    write_dataset(&train, &out.join("train"))?;
    write_dataset(&eval, &out.join("eval"))?;
    let objects: usize = train.iter().map(|s| s.boxes.len()).sum();
    write_summary(
        out,
        "synth",
        config,
        None,
        json!({"train_scenes": train.len(), "eval_scenes": eval.len(), "train_objects": objects}),
    )?;
    Ok((train.len(), eval.len()))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    /// Trailing FNV-1a checksum of the checkpoint file.
    pub checksum: u64,
    pub checkpoint_hash: String,
    pub log: Vec<EpochLog>,
    pub stats: ThresholdStats,
    pub model: Model,
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<TrainReport> {
    let scenes = read_dataset(data)?;
    cmd_train_scenes(config, &scenes, out, |_| {})
}

/// [`cmd_train`] on scenes already in memory.
pub fn cmd_train_scenes(
    config: &RunConfig,
    scenes: &[AnnotatedScene],
    out: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    create_dir(out)?;
    let samples = prepare_samples(scenes, &config.model, config.infer.stride, &config.train)?;
    let outcome = train_with_progress(&config.model, &config.train, &samples, on_epoch)?;
    let ckpt = outcome.model.to_checkpoint();
    let bytes = ckpt.to_bytes()?;
    let path = out.join(CHECKPOINT_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    let checksum = crate::nn::checkpoint::trailing_checksum(&bytes);
    let checkpoint_hash = content_hash(&bytes);
    write_json(&out.join(STATS_FILE), &outcome.stats)?;
    write_json(&out.join(CONFIG_FILE), config)?;
    write_json(&out.join("train_log.json"), &outcome.log)?;
    let last = outcome.log.last().expect("at least one epoch");
    write_summary(
        out,
        "train",
        config,
        Some(checkpoint_hash.clone()),
        json!({
            "samples": samples.len(),
            "parameters": outcome.model.parameter_count(),
            "epochs": outcome.log.len(),
            "final_loss": last.loss,
            "checksum": format!("{checksum:016x}"),
            "recorded_maps": outcome.stats.len(),
        }),
    )?;
    Ok(TrainReport {
        checkpoint: path,
        checksum,
        checkpoint_hash,
        log: outcome.log,
        stats: outcome.stats,
        model: outcome.model,
    })
}

pub fn cmd_calibrate(
    config: &RunConfig,
    stats: &Path,
    k: Option<f64>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Calibration> {
    let stats: ThresholdStats = read_json(stats)?;
    let cal = calibrate_threshold(&stats, k.unwrap_or(config.calibration_k))?;
    let hash = checkpoint.map(checkpoint_hash).transpose()?;
    create_dir(out)?;
    write_json(&out.join(CALIBRATION_FILE), &cal)?;
    write_summary(out, "calibrate", config, hash, to_value(&cal))?;
    Ok(cal)
}

fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

pub fn load_model(config: &RunConfig, checkpoint: &Path) -> Result<(Model, String)> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes, checkpoint)?;
    let model = Model::from_checkpoint(config.model.clone(), &ckpt).map_err(|e| Error::Format {
        kind: "checkpoint",
        path: checkpoint.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((model, content_hash(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferReport {
    pub detections: usize,
    pub gate: GateReport,
}

pub fn cmd_infer(
    config: &RunConfig,
    checkpoint: &Path,
    threshold: f64,
    scene: &Path,
    annotation: Option<&Path>,
    out: &Path,
) -> Result<InferReport> {
    let (model, hash) = load_model(config, checkpoint)?;
    let scene = match annotation {
        Some(a) => read_scene(scene, a)?,
        None => AnnotatedScene {
            raster: GrayImage::read_pgm(scene)?,
            boxes: Vec::new(),
        },
    };
    let det = HeadDetector {
        keep_threshold: config.infer.keep_threshold,
    };
    let eval = bench(&model, &det, std::slice::from_ref(&scene), threshold, &config.infer, None)?;
    let records: Vec<DetectionRecord> = eval.scenes[0].detections.iter().map(DetectionRecord::from).collect();
    create_dir(out)?;
    write_json(&out.join("detections.json"), &records)?;
    write_json(&out.join("gate_report.json"), &eval.gate)?;
    let report = InferReport {
        detections: records.len(),
        gate: eval.gate,
    };
    write_summary(out, "infer", config, Some(hash), json!({"threshold": threshold, "report": to_value(&report)}))?;
    Ok(report)
}

pub fn cmd_bench(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    threshold: f64,
    workers: usize,
    out: &Path,
) -> Result<SweepRow> {
    let (model, hash) = load_model(config, checkpoint)?;
    let scenes = read_dataset(data)?;
    let pool = worker_pool(workers)?;
    let det = HeadDetector {
        keep_threshold: config.infer.keep_threshold,
    };
    let eval = bench(&model, &det, &scenes, threshold, &config.infer, pool.as_ref())?;
    create_dir(out)?;
    write_json(&out.join("bench.json"), &eval.row)?;
    write_summary(
        out,
        "bench",
        config,
        Some(hash),
        json!({"workers": workers, "row": to_value(&eval.row), "gate": to_value(&eval.gate)}),
    )?;
    Ok(eval.row)
}

pub fn cmd_sweep(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    calibration: Option<&Path>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let thresholds = if !config.sweep_thresholds.is_empty() {
        config.sweep_thresholds.clone()
    } else if let Some(c) = calibration {
        default_threshold_grid(read_json::<Calibration>(c)?.threshold)
    } else {
        return Err(Error::Config(vec![
            "sweep_thresholds: empty and no --calibration given to centre the default grid".into(),
        ]));
    };
    let (model, hash) = load_model(config, checkpoint)?;
    let scenes = read_dataset(data)?;
    let det = HeadDetector {
        keep_threshold: config.infer.keep_threshold,
    };
    let rows: Vec<SweepRow> = sweep(&model, &det, &scenes, &thresholds, &config.infer, None)?
        .into_iter()
        .map(|e| e.row)
        .collect();
    create_dir(out)?;
    let csv = out.join("sweep.csv");
    fs::write(&csv, sweep_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    write_summary(out, "sweep", config, Some(hash), json!({"rows": rows.len(), "thresholds": thresholds}))?;
    Ok(rows)
}

/// Config from `--config`, else `config.json` beside the checkpoint, else defaults.
fn resolve_config(cli: &Cli, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let config = match (&cli.config, checkpoint.and_then(Path::parent)) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(dir)) if dir.join(CONFIG_FILE).is_file() => RunConfig::load(&dir.join(CONFIG_FILE))?,
        _ => RunConfig::default(),
    };
    let config = match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    };
    config.validated()
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out } => {
            let config = resolve_config(&cli, None)?;
            let (train, eval) = cmd_synth(&config, out)?;
            println!("wrote {train} training and {eval} evaluation scenes to {}", out.display());
        }
        Command::Train { data, out } => {
            let config = resolve_config(&cli, None)?;
            let scenes = read_dataset(data)?;
            let report = cmd_train_scenes(&config, &scenes, out, |e| {
                eprintln!(
                    "epoch {:>2}  lr {:.0e}  loss {:.5}  (oan {:.5}, class {:.5}, box {:.5})",
                    e.epoch, e.learning_rate, e.loss, e.loss_oan, e.loss_class, e.loss_box
                )
            })?;
            println!("checkpoint {} ({:016x})", report.checkpoint.display(), report.checksum);
        }
        Command::Calibrate {
            stats,
            k,
            checkpoint,
            out,
        } => {
            let config = resolve_config(&cli, checkpoint.as_deref())?;
            let cal = cmd_calibrate(&config, stats, *k, checkpoint.as_deref(), out)?;
            println!("{}", serde_json::to_string(&cal).expect("serialises"));
        }
        Command::Infer {
            checkpoint,
            threshold,
            scene,
            annotation,
            out,
        } => {
            let config = resolve_config(&cli, Some(checkpoint))?;
            let r = cmd_infer(&config, checkpoint, threshold.resolve()?, scene, annotation.as_deref(), out)?;
            println!(
                "{} detections, {}/{} patches skipped",
                r.detections, r.gate.filtered_patches, r.gate.total_patches
            );
        }
        Command::Bench {
            checkpoint,
            data,
            threshold,
            workers,
            out,
        } => {
            let config = resolve_config(&cli, Some(checkpoint))?;
            let row = cmd_bench(&config, checkpoint, data, threshold.resolve()?, *workers, out)?;
            println!("{}", serde_json::to_string(&row).expect("serialises"));
        }
        Command::Sweep {
            checkpoint,
            data,
            calibration,
            out,
        } => {
            let config = resolve_config(&cli, Some(checkpoint))?;
            let rows = cmd_sweep(&config, checkpoint, data, calibration.as_deref(), out)?;
            print!("{}", sweep_csv(&rows));
        }
    }
    Ok(())
}

/// Parses `args`, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
