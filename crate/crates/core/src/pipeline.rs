//! Gated large-image inference and its timing harness.
//!
//! Per patch: backbone, objectness map, gate, and the detector only when the gate passes.
//! Surviving patch detections are mapped to scene coordinates and merged with NMS. Gated and
//! ungated runs share this path; an ungated run is a threshold of zero.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::decode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, gate_report, merge_scene, ApResult, Detection, GateReport, PatchTruth, SweepRow};
use crate::model::{input_tensor, BackboneTrace, Model};
use crate::oan::{gate, GateDecision};
use crate::raster::GrayImage;
use crate::synth::AnnotatedScene;
use crate::tiler::{crop_patches, TilePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub stride: usize,
    /// Detections scoring at or below this are dropped before merging.
    pub keep_threshold: f64,
    pub nms_threshold: f64,
    /// IoU needed for a detection to match ground truth during evaluation.
    pub iou_match: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            stride: 104,
            keep_threshold: 0.05,
            nms_threshold: 0.1,
            iou_match: 0.5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self, patch_size: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.stride == 0 || self.stride > patch_size {
            v.push(format!("infer.stride: {} outside [1, {patch_size}]", self.stride));
        }
        if !(0.0..1.0).contains(&self.keep_threshold) {
            v.push(format!("infer.keep_threshold: {} outside [0, 1)", self.keep_threshold));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            v.push(format!("infer.nms_threshold: {} outside [0, 1]", self.nms_threshold));
        }
        if !(self.iou_match > 0.0 && self.iou_match <= 1.0) {
            v.push(format!("infer.iou_match: {} outside (0, 1]", self.iou_match));
        }
        v
    }
}

/// The stage run on patches that pass the gate.
pub trait PatchDetector: Sync {
    fn detect(&self, model: &Model, features: &BackboneTrace) -> Result<Vec<Detection>>;
}

/// The model's own detection head followed by score filtering.
#[derive(Clone, Copy, Debug)]
pub struct HeadDetector {
    pub keep_threshold: f64,
}

impl PatchDetector for HeadDetector {
    fn detect(&self, model: &Model, features: &BackboneTrace) -> Result<Vec<Detection>> {
        let out = model.detect(features)?;
        Ok(decode(&out, self.keep_threshold, model.config.patch_size))
    }
}

/// Stand-in for an expensive detector: busy-waits a fixed time and reports nothing.
#[derive(Clone, Copy, Debug)]
pub struct FixedCostDetector {
    pub cost: Duration,
}

impl PatchDetector for FixedCostDetector {
    fn detect(&self, _: &Model, _: &BackboneTrace) -> Result<Vec<Detection>> {
        let start = Instant::now();
        while start.elapsed() < self.cost {
            std::hint::spin_loop();
        }
        Ok(Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchOutcome {
    pub origin: (usize, usize),
    pub decision: GateDecision,
    /// Patch coordinates; empty when the gate did not pass.
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneOutcome {
    pub patches: Vec<PatchOutcome>,
    /// Merged, in scene coordinates.
    pub detections: Vec<Detection>,
}

pub fn process_patch(
    model: &Model,
    detector: &dyn PatchDetector,
    patch: &GrayImage,
    origin: (usize, usize),
    threshold: f64,
) -> Result<PatchOutcome> {
    let features = model.features(&input_tensor(patch))?;
    let decision = gate(&model.objectness(&features)?, threshold);
    let detections = if decision.passed {
        detector.detect(model, &features)?
    } else {
        Vec::new()
    };
    Ok(PatchOutcome {
        origin,
        decision,
        detections,
    })
}

/// `pool = None` runs patches sequentially; results are identical either way.
pub fn infer_scene(
    model: &Model,
    detector: &dyn PatchDetector,
    raster: &GrayImage,
    threshold: f64,
    config: &InferConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<SceneOutcome> {
    let p = model.config.patch_size;
    let plan = TilePlan::new(raster.width(), raster.height(), p, config.stride)?;
    let origins: Vec<(usize, usize)> = plan.origins().collect();
    let run = |&(x, y): &(usize, usize)| {
        process_patch(model, detector, &raster.crop_padded(x, y, p, p), (x, y), threshold)
    };
    let patches: Vec<PatchOutcome> = match pool {
        Some(pool) => pool.install(|| origins.par_iter().map(run).collect::<Result<_>>())?,
        None => origins.iter().map(run).collect::<Result<_>>()?,
    };
    let per_patch: Vec<((usize, usize), Vec<Detection>)> = patches
        .iter()
        .filter(|o| o.decision.passed)
        .map(|o| (o.origin, o.detections.clone()))
        .collect();
    let detections = merge_scene(&per_patch, config.nms_threshold);
    Ok(SceneOutcome { patches, detections })
}

pub fn worker_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    match workers {
        0 => Err(Error::validation("workers", "must be positive")),
        1 => Ok(None),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::validation("workers", e.to_string())),
    }
}

/// One timed pass over a scene set at a fixed threshold, with its evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub row: SweepRow,
    pub gate: GateReport,
    pub ap: ApResult,
    /// Gate decision of every patch, scenes in order, patches row-major.
    pub passed: Vec<bool>,
    pub confidences: Vec<f64>,
    pub elapsed: Duration,
    pub scenes: Vec<SceneOutcome>,
}

/// Times full inference over `scenes`, then evaluates. FPS is total patches over wall time,
/// including tiling and merging.
pub fn bench(
    model: &Model,
    detector: &dyn PatchDetector,
    scenes: &[AnnotatedScene],
    threshold: f64,
    config: &InferConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Evaluation> {
    if !(threshold >= 0.0) {
        return Err(Error::validation("threshold", format!("{threshold} must be >= 0")));
    }
    let start = Instant::now();
    let outcomes = scenes
        .iter()
        .map(|s| infer_scene(model, detector, &s.raster, threshold, config, pool))
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed();

    let mut truths = Vec::new();
    let mut total_objects = 0;
    for (scene, outcome) in scenes.iter().zip(&outcomes) {
        let plan = TilePlan::for_scene(scene, model.config.patch_size, config.stride)?;
        for (patch, out) in crop_patches(scene, &plan)?.into_iter().zip(&outcome.patches) {
            truths.push(PatchTruth {
                object_ids: patch.object_ids.iter().map(|id| id + total_objects).collect(),
                passed: out.decision.passed,
            });
        }
        total_objects += scene.boxes.len();
    }
    let gate = gate_report(&truths, total_objects);
    let images: Vec<_> = scenes
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| (o.detections.clone(), s.boxes.clone()))
        .collect();
    let ap = evaluate_dataset(&images, config.iou_match);
    let secs = elapsed.as_secs_f64();
    let row = SweepRow {
        threshold,
        skip_ratio: gate.skip_ratio,
        gate_precision: gate.precision,
        gate_recall: gate.recall,
        map: ap.map * 100.0,
        fps: if secs > 0.0 { truths.len() as f64 / secs } else { f64::INFINITY },
    };
    let passed = outcomes
        .iter()
        .flat_map(|o| o.patches.iter().map(|p| p.decision.passed))
        .collect();
    let confidences = outcomes
        .iter()
        .flat_map(|o| o.patches.iter().map(|p| p.decision.confidence))
        .collect();
    Ok(Evaluation {
        row,
        gate,
        ap,
        passed,
        confidences,
        elapsed,
        scenes: outcomes,
    })
}

/// [`bench`] at every threshold; thresholds must be ascending.
pub fn sweep(
    model: &Model,
    detector: &dyn PatchDetector,
    scenes: &[AnnotatedScene],
    thresholds: &[f64],
    config: &InferConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<Evaluation>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::validation("thresholds", "must be sorted ascending"));
    }
    thresholds
        .iter()
        .map(|&t| bench(model, detector, scenes, t, config, pool))
        .collect()
}

/// Zero, the calibrated threshold, and geometric steps of √2 around it, clipped to `[0, 1]`.
pub fn default_threshold_grid(calibrated: f64) -> Vec<f64> {
    let mut grid = vec![0.0, calibrated.clamp(0.0, 1.0)];
    grid.extend((-8..=8).map(|i| (calibrated * 2f64.powf(i as f64 / 2.0)).clamp(0.0, 1.0)));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::SceneSpec;

    fn setup() -> (Model, Vec<AnnotatedScene>) {
        let model = Model::initialised(ModelConfig::default(), 5).unwrap();
        let spec = SceneSpec {
            width: 256,
            height: 256,
            ..SceneSpec::default()
        };
        (model, crate::synth::generate_scenes(&spec, 2).unwrap())
    }

    #[test]
    fn threshold_above_every_confidence_skips_all() {
        let (model, scenes) = setup();
        let det = HeadDetector { keep_threshold: 0.05 };
        let e = bench(&model, &det, &scenes, 1.0, &InferConfig::default(), None).unwrap();
        assert_eq!(e.row.skip_ratio, 1.0);
        assert_eq!(e.row.map, 0.0);
        assert!(e.scenes.iter().all(|s| s.detections.is_empty()));
    }

    #[test]
    fn zero_threshold_passes_every_patch() {
        let (model, scenes) = setup();
        let det = HeadDetector { keep_threshold: 0.05 };
        let e = bench(&model, &det, &scenes, 0.0, &InferConfig::default(), None).unwrap();
        assert_eq!(e.row.skip_ratio, 0.0);
        assert_eq!(e.gate.recall, 1.0);
        assert_eq!(e.passed.len(), 2 * 9);
    }

    #[test]
    fn parallel_matches_sequential() {
        let (model, scenes) = setup();
        let det = HeadDetector { keep_threshold: 0.01 };
        let pool = worker_pool(3).unwrap();
        let a = infer_scene(&model, &det, &scenes[0].raster, 0.0, &InferConfig::default(), None).unwrap();
        let b = infer_scene(&model, &det, &scenes[0].raster, 0.0, &InferConfig::default(), pool.as_ref()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsorted_thresholds_rejected() {
        let (model, scenes) = setup();
        let det = HeadDetector { keep_threshold: 0.05 };
        assert!(sweep(&model, &det, &scenes, &[0.5, 0.1], &InferConfig::default(), None).is_err());
    }

    #[test]
    fn grid_contains_anchors() {
        let g = default_threshold_grid(0.2);
        assert!(g.contains(&0.0) && g.contains(&0.2) && g.contains(&0.4));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.iter().all(|&t| (0.0..=1.0).contains(&t)));
    }
}
