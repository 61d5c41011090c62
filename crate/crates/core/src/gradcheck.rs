//! Central finite-difference verification of every hand-written backward pass, in f64.
//!
//! Each check builds a random small instance, reduces the op output to a scalar loss, and
//! compares the analytic gradient with `(L(x+ε) − L(x−ε)) / 2ε` taken coordinate by coordinate,
//! as the relative error of the two gradient vectors. Coordinates
//! whose ±ε probes land on different sides of a ReLU or smooth-L1 kink are skipped and counted,
//! since no finite difference is meaningful there.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{assign_targets, det_loss, total_loss, DetHead, DetLossConfig, DetTargets};
use crate::error::Result;
use crate::geometry::GroundTruthBox;
use crate::model::{BackboneConfig, Model, ModelConfig};
use crate::nn::{
    conv2d_backward, conv2d_forward, focal_loss, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, smooth_l1_element, ConvLayer, FocalParams, Param, Tensor,
};
use crate::oan::{oan_loss, ActivationMap, GridLabels, OanHead, OanHeadConfig};

pub const EPSILON: f64 = 1e-3;

/// Comparison of one instance's analytic and numeric gradient vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    diff_sq: f64,
    analytic_sq: f64,
    numeric_sq: f64,
    /// Largest per-coordinate `|a − n| / max(|a|, |n|)`, for diagnostics only: near-zero
    /// partials make it dominated by the O(ε²) truncation error.
    pub max_coordinate_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    /// Combines checks of different tensors of the same instance.
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            diff_sq: self.diff_sq + other.diff_sq,
            analytic_sq: self.analytic_sq + other.analytic_sq,
            numeric_sq: self.numeric_sq + other.numeric_sq,
            max_coordinate_error: self.max_coordinate_error.max(other.max_coordinate_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the checked coordinates.
    pub fn relative_error(&self) -> f64 {
        let denom = self.analytic_sq.max(self.numeric_sq).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            self.diff_sq.sqrt() / denom
        }
    }

    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }
}

/// `eval` returns the loss and a kink signature at the given point.
pub fn check_vector(
    x: &[f64],
    analytic: &[f64],
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<bool>)>,
) -> Result<GradCheck> {
    assert_eq!(x.len(), analytic.len(), "analytic gradient length");
    let mut probe = x.to_vec();
    let mut out = GradCheck::default();
    for i in 0..x.len() {
        probe[i] = x[i] + EPSILON;
        let (lp, sp) = eval(&probe)?;
        probe[i] = x[i] - EPSILON;
        let (lm, sm) = eval(&probe)?;
        probe[i] = x[i];
        if sp != sm {
            out.skipped += 1;
            continue;
        }
        let (a, n) = (analytic[i], (lp - lm) / (2.0 * EPSILON));
        out.diff_sq += (a - n) * (a - n);
        out.analytic_sq += a * a;
        out.numeric_sq += n * n;
        let scale = a.abs().max(n.abs());
        if scale > 0.0 {
            out.max_coordinate_error = out.max_coordinate_error.max((a - n).abs() / scale);
        }
        out.checked += 1;
    }
    Ok(out)
}

fn relu_signature<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f64>>) -> Vec<bool> {
    tensors
        .into_iter()
        .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
        .collect()
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn weighted_sum(t: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn randomise(layer: &mut ConvLayer<f64>, rng: &mut impl Rng, scale: f64) {
    for v in layer.weight.value.data_mut() {
        *v = rng.random_range(-scale..scale);
    }
    for v in layer.bias.value.data_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
}

fn flatten(params: &[&Param<f64>]) -> (Vec<f64>, Vec<f64>) {
    let values = params.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    let grads = params.iter().flat_map(|p| p.grad.data().iter().copied()).collect();
    (values, grads)
}

fn assign(params: Vec<&mut Param<f64>>, values: &[f64]) {
    let mut at = 0;
    for p in params {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    }
}

/// Convolution geometry under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCase {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub extent: usize,
    pub batch: usize,
}

/// Input, weight and bias gradients of one convolution under `L = Σ r ⊙ conv(x)`.
pub fn check_conv(case: ConvCase, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = ConvLayer::<f64>::new(case.in_channels, case.out_channels, case.kernel, case.stride)?;
    randomise(&mut layer, &mut rng, 1.0);
    let x = uniform(
        &mut rng,
        &[case.batch, case.in_channels, case.extent, case.extent],
        -1.0,
        1.0,
    );
    let out = conv2d_forward(&x, &layer)?;
    let r = uniform(&mut rng, out.shape(), -1.0, 1.0);
    let dx = conv2d_backward(&x, &mut layer, &r)?;

    let input = check_vector(x.data(), dx.data(), |v| {
        let xv = Tensor::from_vec(x.shape(), v.to_vec())?;
        Ok((weighted_sum(&conv2d_forward(&xv, &layer)?, &r), Vec::new()))
    })?;
    let (values, grads) = flatten(&[&layer.weight, &layer.bias]);
    let params = check_vector(&values, &grads, |v| {
        let mut l = layer.clone();
        assign(l.params_mut().into(), v);
        Ok((weighted_sum(&conv2d_forward(&x, &l)?, &r), Vec::new()))
    })?;
    Ok(input.merge(params))
}

pub fn check_relu(len: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[1, 1, 1, len], -2.0, 2.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let y = relu_forward(&x);
    let dx = relu_backward(&y, &r)?;
    check_vector(x.data(), dx.data(), |v| {
        let xv = Tensor::from_vec(x.shape(), v.to_vec())?;
        let y = relu_forward(&xv);
        Ok((weighted_sum(&y, &r), relu_signature([&xv])))
    })
}

pub fn check_sigmoid(len: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[1, 1, 1, len], -6.0, 6.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let y = sigmoid_forward(&x);
    let dx = sigmoid_backward(&y, &r)?;
    check_vector(x.data(), dx.data(), |v| {
        let xv = Tensor::from_vec(x.shape(), v.to_vec())?;
        Ok((weighted_sum(&sigmoid_forward(&xv), &r), Vec::new()))
    })
}

/// Focal loss w.r.t. probabilities, with random targets, ignore mask and `γ ∈ [0, 3]`.
///
/// Probabilities stay in `[0.25, 0.75]`: the central-difference truncation error of the log term
/// grows like `ε²/p²`. Extreme probabilities are covered in logit space by [`check_oan_loss`].
pub fn check_focal(len: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 1, 1, len];
    let p = uniform(&mut rng, &shape, 0.25, 0.75);
    let target = Tensor::from_vec(&shape, (0..len).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect())?;
    let ignore = Tensor::from_vec(&shape, (0..len).map(|_| f64::from(rng.random_bool(0.2) as u8)).collect())?;
    let params = FocalParams {
        alpha: rng.random_range(0.1..0.9),
        gamma: rng.random_range(0.0..3.0),
    };
    let (_, dp) = focal_loss(&p, &target, Some(&ignore), params)?;
    check_vector(p.data(), dp.data(), |v| {
        let pv = Tensor::from_vec(&shape, v.to_vec())?;
        Ok((focal_loss(&pv, &target, Some(&ignore), params)?.0, Vec::new()))
    })
}

pub fn check_smooth_l1(len: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = rng.random_range(0.05..1.0);
    let d: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let grads: Vec<f64> = d.iter().map(|&x| smooth_l1_element(x, beta).1).collect();
    check_vector(&d, &grads, |v| {
        let loss = v.iter().map(|&x| smooth_l1_element(x, beta).0).sum();
        Ok((loss, v.iter().map(|x| x.abs() < beta).collect()))
    })
}

fn random_labels(rng: &mut impl Rng, size: usize) -> GridLabels {
    let mut labels = GridLabels::negatives(size);
    for i in 0..size * size {
        match rng.random_range(0..5) {
            0 => labels.target[i] = true,
            1 => labels.ignore[i] = true,
            _ => {}
        }
    }
    labels
}

/// Objectness loss through the sigmoid, w.r.t. logits.
pub fn check_oan_loss(grid: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[1, 1, grid, grid], -4.0, 4.0);
    let labels = random_labels(&mut rng, grid);
    let focal = FocalParams::default();
    let (_, dl) = oan_loss(&ActivationMap::from_logits(logits.clone(), 1.0), &labels, focal)?;
    check_vector(logits.data(), dl.data(), |v| {
        let l = Tensor::from_vec(logits.shape(), v.to_vec())?;
        Ok((oan_loss(&ActivationMap::from_logits(l, 1.0), &labels, focal)?.0, Vec::new()))
    })
}

/// Full objectness head plus its loss, w.r.t. tapped features and every head parameter.
/// `tap_extent` may be `S`, `2S` or `2S·2^k` to cover each head geometry.
pub fn check_oan_head(tap_extent: usize, grid: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = OanHeadConfig {
        reduce_channels: 3,
        hidden_channels: 4,
    };
    let mut head = OanHead::<f64>::new(2, tap_extent, grid, cfg)?;
    for (_, l) in head.layers_mut() {
        randomise(l, &mut rng, 0.8);
    }
    let x = uniform(&mut rng, &[1, 2, tap_extent, tap_extent], -1.0, 1.0);
    let labels = random_labels(&mut rng, grid);
    let focal = FocalParams::default();
    let patch = grid * 4;

    let trace = head.forward(&x, patch)?;
    let (_, dl) = oan_loss(&trace.map, &labels, focal)?;
    let dx = head.backward(&x, &trace, &dl)?;

    let eval = |h: &OanHead<f64>, xv: &Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let t = h.forward(xv, patch)?;
        Ok((oan_loss(&t.map, &labels, focal)?.0, relu_signature(t.relu_outputs())))
    };
    let input = check_vector(x.data(), dx.data(), |v| eval(&head, &Tensor::from_vec(x.shape(), v.to_vec())?))?;
    let (values, grads) = {
        let ps: Vec<&Param<f64>> = head.layers().iter().flat_map(|(_, l)| l.params()).collect();
        flatten(&ps)
    };
    let params = check_vector(&values, &grads, |v| {
        let mut h = head.clone();
        assign(h.params_mut(), v);
        eval(&h, &x)
    })?;
    Ok(input.merge(params))
}

fn random_boxes(rng: &mut impl Rng, patch: usize, classes: usize, count: usize) -> Vec<GroundTruthBox> {
    (0..count)
        .map(|_| {
            let w = rng.random_range(3..patch as i32 / 2);
            let h = rng.random_range(3..patch as i32 / 2);
            let x = rng.random_range(0..patch as i32 - w);
            let y = rng.random_range(0..patch as i32 - h);
            GroundTruthBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
                class_id: rng.random_range(0..classes),
            }
        })
        .collect()
}

fn det_signature(deltas: &Tensor<f64>, targets: &DetTargets, beta: f64) -> Vec<bool> {
    let s2 = targets.grid * targets.grid;
    let mut sig = Vec::new();
    for (idx, t) in targets.deltas.iter().enumerate() {
        if let Some(t) = t {
            for (k, tv) in t.iter().enumerate() {
                sig.push((deltas.data()[k * s2 + idx] - tv).abs() < beta);
            }
        }
    }
    sig
}

/// Detector head plus `L_class + L_box`, w.r.t. features and every head parameter.
pub fn check_det_head(grid: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 2;
    let mut head = DetHead::<f64>::new(2, grid, 3, classes)?;
    for (_, l) in head.layers_mut() {
        randomise(l, &mut rng, 0.8);
    }
    let patch = grid * 8;
    let boxes = random_boxes(&mut rng, patch, classes, 3);
    let targets = assign_targets(&boxes, patch, grid, classes)?;
    let cfg = DetLossConfig::default();
    let x = uniform(&mut rng, &[1, 2, grid, grid], -1.0, 1.0);

    let trace = head.forward(&x)?;
    let l = det_loss(&trace.outputs, &targets, &cfg)?;
    let dx = head.backward(&x, &trace, &l.dclass_logits, &l.dbox_deltas)?;

    let eval = |h: &DetHead<f64>, xv: &Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let t = h.forward(xv)?;
        let l = det_loss(&t.outputs, &targets, &cfg)?;
        let mut sig = relu_signature(t.relu_outputs());
        sig.extend(det_signature(&t.outputs.box_deltas, &targets, cfg.smooth_l1_beta));
        Ok((l.class + l.boxes, sig))
    };
    let input = check_vector(x.data(), dx.data(), |v| eval(&head, &Tensor::from_vec(x.shape(), v.to_vec())?))?;
    let (values, grads) = {
        let ps: Vec<&Param<f64>> = head.layers().iter().flat_map(|(_, l)| l.params()).collect();
        flatten(&ps)
    };
    let params = check_vector(&values, &grads, |v| {
        let mut h = head.clone();
        assign(h.params_mut(), v);
        eval(&h, &x)
    })?;
    Ok(input.merge(params))
}

/// Small model configuration used by the end-to-end composite check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch_size: 16,
        grid: 2,
        num_classes: 2,
        backbone: BackboneConfig {
            stage_channels: vec![2, 3, 3],
            oan_tap: 1,
            det_tap: 2,
        },
        oan_head: OanHeadConfig {
            reduce_channels: 2,
            hidden_channels: 3,
        },
        det_hidden: 2,
    }
}

/// `L_box + L_class + λ·L_OAN` through the whole model, w.r.t. every parameter.
pub fn check_total_loss(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let mut model = Model::<f64>::new(cfg.clone())?;
    for (_, l) in model.named_layers_mut() {
        randomise(l, &mut rng, 0.9);
    }
    let lambda = rng.random_range(0.0..8.0);
    let p = cfg.patch_size;
    let boxes = random_boxes(&mut rng, p, cfg.num_classes, 2);
    let labels = crate::oan::assign_center(&boxes, p, cfg.grid)?;
    let targets = assign_targets(&boxes, p, cfg.det_grid(), cfg.num_classes)?;
    let x = uniform(&mut rng, &[1, 1, p, p], 0.0, 1.0);
    let focal = FocalParams::default();
    let det_cfg = DetLossConfig::default();

    let trace = model.forward(&x)?;
    let (_, mut d_oan) = oan_loss(&trace.oan.map, &labels, focal)?;
    for g in d_oan.data_mut() {
        *g *= lambda;
    }
    let l = det_loss(&trace.det.outputs, &targets, &det_cfg)?;
    model.zero_grad();
    model.backward(&trace, &d_oan, &l.dclass_logits, &l.dbox_deltas)?;

    let (values, grads) = {
        let ps: Vec<&Param<f64>> = model.named_layers().iter().flat_map(|(_, l)| l.params()).collect();
        flatten(&ps)
    };
    check_vector(&values, &grads, |v| {
        let mut m = model.clone();
        assign(m.params_mut(), v);
        let t = m.forward(&x)?;
        let l_oan = oan_loss(&t.oan.map, &labels, focal)?.0;
        let d = det_loss(&t.det.outputs, &targets, &det_cfg)?;
        let mut sig = relu_signature(t.backbone.relu_outputs());
        sig.extend(relu_signature(t.oan.relu_outputs()));
        sig.extend(relu_signature(t.det.relu_outputs()));
        sig.extend(det_signature(&t.det.outputs.box_deltas, &targets, det_cfg.smooth_l1_beta));
        Ok((total_loss(d.class, d.boxes, l_oan, lambda), sig))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let r = check_vector(&[1.0, 2.0], &[2.0, 4.5], |v| Ok((v[0] * v[0] + v[1] * v[1], vec![]))).unwrap();
        // analytic (2, 4.5) vs numeric (2, 4): ‖a − n‖ / max(‖a‖, ‖n‖) = 0.5 / √24.25
        assert!((r.relative_error() - 0.5 / 24.25f64.sqrt()).abs() < 1e-6);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let r = check_vector(&[0.0], &[123.0], |v| Ok((v[0].abs(), vec![v[0] > 0.0]))).unwrap();
        assert_eq!((r.checked, r.skipped), (0, 1));
    }
}
