//! Joint training of backbone, objectness head and detector with minibatch SGD.
//!
//! Gradients of each minibatch are averaged over its samples before one SGD step. The
//! objectness statistics used for threshold calibration are recorded from every training map.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{assign_targets, det_loss, total_loss, DetLossConfig, DetTargets};
use crate::error::{Error, Result};
use crate::model::{input_tensor, Model, ModelConfig};
use crate::nn::{sgd_step, FocalParams, SgdConfig, Tensor};
use crate::oan::{assign_center, assign_iof, oan_loss, Assignment, GridLabels, ThresholdStats};
use crate::raster::GrayImage;
use crate::synth::AnnotatedScene;
use crate::tiler::{crop_patches, TilePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the objectness loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub focal: FocalParams,
    pub det_loss: DetLossConfig,
    pub assignment: Assignment,
    pub iof_hi: f64,
    pub iof_lo: f64,
    /// Number of most recent maps kept for calibration.
    pub stats_window: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 4.0,
            batch_size: 4,
            sgd: SgdConfig::default(),
            focal: FocalParams::default(),
            det_loss: DetLossConfig::default(),
            assignment: Assignment::Center,
            iof_hi: 0.5,
            iof_lo: 0.1,
            stats_window: 2000,
            init_seed: 0,
            shuffle_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("train.lambda: {} must be finite and >= 0", self.lambda));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size: must be positive".into());
        }
        if let Err(e) = self.sgd.validate() {
            v.push(format!("train.sgd: {e}"));
        }
        if !(self.focal.alpha > 0.0 && self.focal.alpha < 1.0) {
            v.push(format!("train.focal.alpha: {} outside (0, 1)", self.focal.alpha));
        }
        if !(self.focal.gamma >= 0.0) {
            v.push(format!("train.focal.gamma: {} must be >= 0", self.focal.gamma));
        }
        if !(self.det_loss.smooth_l1_beta > 0.0) {
            v.push("train.det_loss.smooth_l1_beta: must be > 0".into());
        }
        if !(0.0 <= self.iof_lo && self.iof_lo < self.iof_hi && self.iof_hi <= 1.0) {
            v.push(format!(
                "train.iof_lo/iof_hi: need 0 <= lo < hi <= 1, got {} / {}",
                self.iof_lo, self.iof_hi
            ));
        }
        if self.stats_window == 0 {
            v.push("train.stats_window: must be positive".into());
        }
        v
    }
}

/// One training patch with its precomputed targets.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub raster: GrayImage,
    pub oan_labels: GridLabels,
    pub det_targets: DetTargets,
}

/// Tiles every scene and labels every patch, empty ones included.
pub fn prepare_samples(
    scenes: &[AnnotatedScene],
    model: &ModelConfig,
    stride: usize,
    train: &TrainConfig,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for scene in scenes {
        let plan = TilePlan::for_scene(scene, model.patch_size, stride)?;
        for patch in crop_patches(scene, &plan)? {
            let oan_labels = match train.assignment {
                Assignment::Center => assign_center(&patch.boxes, model.patch_size, model.grid)?,
                Assignment::Iof => assign_iof(
                    &patch.boxes,
                    model.patch_size,
                    model.grid,
                    train.iof_hi,
                    train.iof_lo,
                )?,
            };
            let det_targets =
                assign_targets(&patch.boxes, model.patch_size, model.det_grid(), model.num_classes)?;
            out.push(TrainSample {
                raster: patch.raster,
                oan_labels,
                det_targets,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub loss: f64,
    pub loss_oan: f64,
    pub loss_class: f64,
    pub loss_box: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub stats: ThresholdStats,
    pub log: Vec<EpochLog>,
}

/// Per-sample loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub oan: f64,
    pub class: f64,
    pub boxes: f64,
    pub total: f64,
}

/// Forward and backward for one sample; gradients are accumulated scaled by `weight`.
pub fn accumulate_sample(
    model: &mut Model<f32>,
    sample: &TrainSample,
    config: &TrainConfig,
    weight: f32,
    stats: Option<&mut ThresholdStats>,
) -> Result<LossTerms> {
    let trace = model.forward(&input_tensor(&sample.raster))?;
    if let Some(stats) = stats {
        stats.record(&trace.oan.map);
    }
    let (l_oan, mut d_oan) = oan_loss(&trace.oan.map, &sample.oan_labels, config.focal)?;
    let det = det_loss(&trace.det.outputs, &sample.det_targets, &config.det_loss)?;
    let total = total_loss(det.class, det.boxes, l_oan, config.lambda);
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (oan {l_oan}, class {}, box {})",
            det.class, det.boxes
        )));
    }
    scale(&mut d_oan, weight * config.lambda as f32);
    let mut d_cls = det.dclass_logits;
    let mut d_box = det.dbox_deltas;
    scale(&mut d_cls, weight);
    scale(&mut d_box, weight);
    model.backward(&trace, &d_oan, &d_cls, &d_box)?;
    Ok(LossTerms {
        oan: l_oan as f64,
        class: det.class as f64,
        boxes: det.boxes as f64,
        total: total as f64,
    })
}

fn scale(t: &mut Tensor<f32>, by: f32) {
    for v in t.data_mut() {
        *v *= by;
    }
}

/// Trains from a seeded initialisation. Deterministic for a given config and sample list.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, samples: &[TrainSample]) -> Result<TrainOutcome> {
    train_with_progress(model_config, config, samples, |_| {})
}

pub fn train_with_progress(
    model_config: &ModelConfig,
    config: &TrainConfig,
    samples: &[TrainSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let violations = config.validate();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    if samples.is_empty() {
        return Err(Error::validation("samples", "training set is empty"));
    }
    let mut model = Model::initialised(model_config.clone(), config.init_seed)?;
    let mut stats = ThresholdStats::new(config.stats_window);
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.sgd.epochs);

    for epoch in 0..config.sgd.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            let weight = 1.0 / batch.len() as f32;
            for &i in batch {
                let l = accumulate_sample(&mut model, &samples[i], config, weight, Some(&mut stats))?;
                sums[0] += l.total;
                sums[1] += l.oan;
                sums[2] += l.class;
                sums[3] += l.boxes;
            }
            for p in model.params_mut() {
                sgd_step(p, &config.sgd, epoch);
                if !p.value.all_finite() {
                    return Err(Error::Numeric(format!("non-finite parameter after step in epoch {epoch}")));
                }
            }
            steps += 1;
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            learning_rate: config.sgd.learning_rate_at(epoch),
            steps,
            loss: sums[0] / n,
            loss_oan: sums[1] / n,
            loss_class: sums[2] / n,
            loss_box: sums[3] / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, stats, log })
}
