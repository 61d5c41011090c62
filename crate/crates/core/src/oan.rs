//! Objectness activation head: grid label assignment, the `S×S` activation map, its focal loss,
//! threshold calibration from training statistics, and the patch gate.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GroundTruthBox;
use crate::nn::{
    conv2d_backward, conv2d_forward, depth_to_space, focal_loss, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, space_to_depth, ConvLayer, FocalParams, Param, Scalar,
    Tensor,
};

/// Bias of the final objectness conv, so initial probabilities start near `sigmoid(-2) ≈ 0.12`.
pub const OBJECTNESS_PRIOR_BIAS: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLabels {
    pub size: usize,
    /// Row-major `S×S`.
    pub target: Vec<bool>,
    pub ignore: Vec<bool>,
}

impl GridLabels {
    pub fn negatives(size: usize) -> Self {
        GridLabels {
            size,
            target: vec![false; size * size],
            ignore: vec![false; size * size],
        }
    }

    pub fn positives(&self) -> usize {
        self.target.iter().filter(|&&t| t).count()
    }

    pub fn target_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.target.iter().map(|&t| if t { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[1, 1, self.size, self.size], data).expect("S×S labels")
    }

    pub fn ignore_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.ignore.iter().map(|&t| if t { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[1, 1, self.size, self.size], data).expect("S×S labels")
    }
}

fn check_grid(patch_size: usize, grid: usize) -> Result<f64> {
    if grid == 0 {
        return Err(Error::validation("grid_size", "must be positive"));
    }
    if patch_size < grid {
        return Err(Error::validation(
            "grid_size",
            format!("{grid} cells exceed patch size {patch_size}"),
        ));
    }
    Ok(patch_size as f64 / grid as f64)
}

/// Grid cell `(row, col)` containing the centre of `b`.
pub fn center_cell(b: &GroundTruthBox, patch_size: usize, grid: usize) -> Result<(usize, usize)> {
    let cell = check_grid(patch_size, grid)?;
    let (cx, cy) = b.center();
    let p = patch_size as f64;
    if !(0.0..p).contains(&cx) || !(0.0..p).contains(&cy) {
        return Err(Error::validation(
            "boxes",
            format!("centre ({cx}, {cy}) outside [0, {patch_size})²"),
        ));
    }
    let row = ((cy / cell).floor() as usize).min(grid - 1);
    let col = ((cx / cell).floor() as usize).min(grid - 1);
    Ok((row, col))
}

/// A cell is positive iff some box centre falls inside it. Class-independent.
pub fn assign_center(boxes: &[GroundTruthBox], patch_size: usize, grid: usize) -> Result<GridLabels> {
    check_grid(patch_size, grid)?;
    let mut labels = GridLabels::negatives(grid);
    for b in boxes {
        let (row, col) = center_cell(b, patch_size, grid)?;
        labels.target[row * grid + col] = true;
    }
    Ok(labels)
}

/// IoF labelling: with IoF = |cell ∩ box| / |cell| maximised over boxes, a cell is positive when
/// IoF ≥ `hi`, negative when IoF < `lo`, and ignored otherwise.
pub fn assign_iof(
    boxes: &[GroundTruthBox],
    patch_size: usize,
    grid: usize,
    hi: f64,
    lo: f64,
) -> Result<GridLabels> {
    if hi <= lo {
        return Err(Error::validation("iof_thresholds", format!("hi {hi} <= lo {lo}")));
    }
    let cell = check_grid(patch_size, grid)?;
    for b in boxes {
        center_cell(b, patch_size, grid)?;
    }
    let mut labels = GridLabels::negatives(grid);
    let cell_area = cell * cell;
    for row in 0..grid {
        for col in 0..grid {
            let cb = crate::geometry::BBox {
                x_min: col as f64 * cell,
                y_min: row as f64 * cell,
                x_max: (col + 1) as f64 * cell,
                y_max: (row + 1) as f64 * cell,
            };
            let best = boxes
                .iter()
                .map(|b| b.to_bbox().intersection(&cb) / cell_area)
                .fold(0.0, f64::max);
            let idx = row * grid + col;
            if best >= hi {
                labels.target[idx] = true;
            } else if best >= lo {
                labels.ignore[idx] = true;
            }
        }
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Center,
    Iof,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap<T = f32> {
    /// `[1, 1, S, S]`
    pub logits: Tensor<T>,
    /// `sigmoid(logits)`
    pub probs: Tensor<T>,
    pub grid_size_px: f64,
}

impl<T: Scalar> ActivationMap<T> {
    pub fn from_logits(logits: Tensor<T>, grid_size_px: f64) -> Self {
        let probs = sigmoid_forward(&logits);
        ActivationMap {
            logits,
            probs,
            grid_size_px,
        }
    }

    pub fn size(&self) -> usize {
        self.probs.shape().last().copied().unwrap_or(0)
    }

    /// Patch confidence: the largest cell probability.
    pub fn confidence(&self) -> f64 {
        self.probs.max_value().to_f64().unwrap_or(f64::NAN)
    }

    /// Population standard deviation of the cell probabilities.
    pub fn std_dev(&self) -> f64 {
        let n = self.probs.len().max(1) as f64;
        let vals: Vec<f64> = self.probs.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Channel widths of the head; the reference design uses 256 and 512.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OanHeadConfig {
    pub reduce_channels: usize,
    pub hidden_channels: usize,
}

impl Default for OanHeadConfig {
    fn default() -> Self {
        OanHeadConfig {
            reduce_channels: 256,
            hidden_channels: 512,
        }
    }
}

/// 3×3 reduce conv → ReLU → [space-to-depth] → 1×1 conv → ReLU → 1×1 conv to one channel.
///
/// The reduce conv has stride 2 when the tapped map is `2S×2S` or larger; maps of `2S·r` with
/// `r = 2, 4, …` are folded to `S×S` by space-to-depth with block `r`. A tapped map that is
/// already `S×S` uses a stride-1 reduce conv.
#[derive(Clone, Debug)]
pub struct OanHead<T = f32> {
    pub reduce: ConvLayer<T>,
    pub hidden: ConvLayer<T>,
    pub output: ConvLayer<T>,
    pub block: usize,
    pub grid: usize,
    pub tap_extent: usize,
}

/// Intermediate activations of one head forward pass, needed for the backward pass.
#[derive(Clone, Debug)]
pub struct OanTrace<T = f32> {
    reduced: Tensor<T>,
    folded: Tensor<T>,
    hidden: Tensor<T>,
    pub map: ActivationMap<T>,
}

impl<T: Scalar> OanTrace<T> {
    /// Post-ReLU activations, in forward order.
    pub fn relu_outputs(&self) -> [&Tensor<T>; 2] {
        [&self.reduced, &self.hidden]
    }
}

impl<T: Scalar> OanHead<T> {
    pub fn new(tap_channels: usize, tap_extent: usize, grid: usize, config: OanHeadConfig) -> Result<Self> {
        let (stride, block) = head_geometry(tap_extent, grid)?;
        let reduce = ConvLayer::new(tap_channels, config.reduce_channels, 3, stride)?;
        let hidden = ConvLayer::new(config.reduce_channels * block * block, config.hidden_channels, 1, 1)?;
        let output = ConvLayer::new(config.hidden_channels, 1, 1, 1)?;
        Ok(OanHead {
            reduce,
            hidden,
            output,
            block,
            grid,
            tap_extent,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.reduce.init_he(rng, 0.0);
        self.hidden.init_he(rng, 0.0);
        self.output.init_he(rng, OBJECTNESS_PRIOR_BIAS);
    }

    pub fn layers(&self) -> [(&'static str, &ConvLayer<T>); 3] {
        [("reduce", &self.reduce), ("hidden", &self.hidden), ("output", &self.output)]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut ConvLayer<T>); 3] {
        [
            ("reduce", &mut self.reduce),
            ("hidden", &mut self.hidden),
            ("output", &mut self.output),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(6);
        out.extend(self.reduce.params_mut());
        out.extend(self.hidden.params_mut());
        out.extend(self.output.params_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.parameter_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> OanHead<U> {
        OanHead {
            reduce: self.reduce.cast(),
            hidden: self.hidden.cast(),
            output: self.output.cast(),
            block: self.block,
            grid: self.grid,
            tap_extent: self.tap_extent,
        }
    }

    pub fn forward(&self, features: &Tensor<T>, patch_size: usize) -> Result<OanTrace<T>> {
        let (_, _, h, w) = features.dims4()?;
        if h != self.tap_extent || w != self.tap_extent {
            return Err(Error::Shape {
                context: "objectness head input extent",
                expected: vec![self.tap_extent, self.tap_extent],
                actual: vec![h, w],
            });
        }
        let reduced = relu_forward(&conv2d_forward(features, &self.reduce)?);
        let folded = if self.block > 1 {
            space_to_depth(&reduced, self.block)?
        } else {
            reduced.clone()
        };
        let hidden = relu_forward(&conv2d_forward(&folded, &self.hidden)?);
        let logits = conv2d_forward(&hidden, &self.output)?;
        Ok(OanTrace {
            reduced,
            folded,
            hidden,
            map: ActivationMap::from_logits(logits, patch_size as f64 / self.grid as f64),
        })
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the tapped features.
    pub fn backward(&mut self, features: &Tensor<T>, trace: &OanTrace<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let dhidden = conv2d_backward(&trace.hidden, &mut self.output, dlogits)?;
        let dhidden = relu_backward(&trace.hidden, &dhidden)?;
        let dfolded = conv2d_backward(&trace.folded, &mut self.hidden, &dhidden)?;
        let dreduced = if self.block > 1 {
            depth_to_space(&dfolded, self.block)?
        } else {
            dfolded
        };
        let dreduced = relu_backward(&trace.reduced, &dreduced)?;
        conv2d_backward(features, &mut self.reduce, &dreduced)
    }
}

/// `(reduce stride, space-to-depth block)` for a tapped map of `tap_extent` feeding an `S×S` grid.
pub fn head_geometry(tap_extent: usize, grid: usize) -> Result<(usize, usize)> {
    if grid > 0 && tap_extent == grid {
        return Ok((1, 1));
    }
    if grid > 0 && tap_extent.is_multiple_of(2 * grid) {
        let r = tap_extent / (2 * grid);
        if r.is_power_of_two() {
            return Ok((2, r));
        }
    }
    Err(Error::Shape {
        context: "objectness head needs a tap of S, 2S or 2S·2^k cells",
        expected: vec![2 * grid, 2 * grid],
        actual: vec![tap_extent, tap_extent],
    })
}

/// `(1/S²) Σ FL(label, M)` over non-ignored cells, with its gradient w.r.t. the logits.
pub fn oan_loss<T: Scalar>(
    map: &ActivationMap<T>,
    labels: &GridLabels,
    focal: FocalParams,
) -> Result<(T, Tensor<T>)> {
    let s = map.size();
    if labels.size != s {
        return Err(Error::Shape {
            context: "objectness labels vs map",
            expected: vec![s, s],
            actual: vec![labels.size, labels.size],
        });
    }
    let target = labels.target_tensor::<T>();
    let ignore = labels.ignore_tensor::<T>();
    let has_ignored = labels.ignore.iter().any(|&i| i);
    let (loss, dprob) = focal_loss(&map.probs, &target, has_ignored.then_some(&ignore), focal)?;
    let dlogits = sigmoid_backward(&map.probs, &dprob)?;
    Ok((loss, dlogits))
}

/// Rolling window of `(max, std)` pairs of recorded activation maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub capacity: usize,
    pub window: VecDeque<(f64, f64)>,
}

impl ThresholdStats {
    pub fn new(capacity: usize) -> Self {
        ThresholdStats {
            capacity,
            window: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn push(&mut self, max: f64, std: f64) {
        if self.capacity == 0 {
            return;
        }
        while self.window.len() >= self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((max, std));
    }

    pub fn record<T: Scalar>(&mut self, map: &ActivationMap<T>) {
        self.push(map.confidence(), map.std_dev());
    }
}

/// Output of threshold calibration, in the field order written to run summaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub threshold: f64,
    pub k: f64,
    /// Number of recorded maps averaged.
    pub window: usize,
    pub m: f64,
    pub v: f64,
}

/// `T = (m + v)² / k` with `m` the mean recorded max and `v` the mean recorded std.
pub fn calibrate_threshold(stats: &ThresholdStats, k: f64) -> Result<Calibration> {
    if stats.is_empty() {
        return Err(Error::Calibration("no activation maps recorded".into()));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::Calibration(format!("scaling factor k = {k} must be > 0")));
    }
    let n = stats.len() as f64;
    let m = stats.window.iter().map(|(mx, _)| mx).sum::<f64>() / n;
    let v = stats.window.iter().map(|(_, sd)| sd).sum::<f64>() / n;
    Ok(Calibration {
        threshold: (m + v).powi(2) / k,
        k,
        window: stats.len(),
        m,
        v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub passed: bool,
    pub confidence: f64,
    pub threshold_used: f64,
}

/// Pass the patch to the detector iff `max(M) > T`.
pub fn gate<T: Scalar>(map: &ActivationMap<T>, threshold: f64) -> GateDecision {
    gate_confidence(map.confidence(), threshold)
}

pub fn gate_confidence(confidence: f64, threshold: f64) -> GateDecision {
    GateDecision {
        passed: confidence > threshold,
        confidence,
        threshold_used: threshold,
    }
}
