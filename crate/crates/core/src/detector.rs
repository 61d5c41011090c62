//! Toy one-stage detector sharing the backbone: per-cell class logits and box deltas.
//!
//! Box deltas of a cell `(i, j)` with side `g` are `(cx/g − j, cy/g − i, ln(w/g), ln(h/g))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GroundTruthBox};
use crate::metrics::Detection;
use crate::nn::{
    conv2d_backward, conv2d_forward, focal_loss, relu_backward, relu_forward, sigmoid,
    sigmoid_backward, sigmoid_forward, smooth_l1_element, ConvLayer, FocalParams, Param, Scalar,
    Tensor,
};
use crate::oan::center_cell;

/// Prior probability used to initialise the class-logit bias.
pub const CLASS_PRIOR: f64 = 0.01;
/// Log-size deltas are clamped to this magnitude before exponentiation.
pub const MAX_LOG_SIZE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DetOutputs<T = f32> {
    /// `[1, C, S, S]`
    pub class_logits: Tensor<T>,
    /// `[1, 4, S, S]`
    pub box_deltas: Tensor<T>,
}

impl<T: Scalar> DetOutputs<T> {
    pub fn grid(&self) -> usize {
        self.class_logits.shape()[3]
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.shape()[1]
    }
}

/// Two branches over the tapped map: `3×3 conv → ReLU → 1×1 conv` for classes and for boxes.
#[derive(Clone, Debug)]
pub struct DetHead<T = f32> {
    pub cls_conv: ConvLayer<T>,
    pub cls_out: ConvLayer<T>,
    pub box_conv: ConvLayer<T>,
    pub box_out: ConvLayer<T>,
    pub grid: usize,
}

#[derive(Clone, Debug)]
pub struct DetTrace<T = f32> {
    cls_hidden: Tensor<T>,
    box_hidden: Tensor<T>,
    pub outputs: DetOutputs<T>,
}

impl<T: Scalar> DetTrace<T> {
    /// Post-ReLU activations of both branches.
    pub fn relu_outputs(&self) -> [&Tensor<T>; 2] {
        [&self.cls_hidden, &self.box_hidden]
    }
}

impl<T: Scalar> DetHead<T> {
    pub fn new(tap_channels: usize, grid: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        Ok(DetHead {
            cls_conv: ConvLayer::new(tap_channels, hidden, 3, 1)?,
            cls_out: ConvLayer::new(hidden, num_classes, 1, 1)?,
            box_conv: ConvLayer::new(tap_channels, hidden, 3, 1)?,
            box_out: ConvLayer::new(hidden, 4, 1, 1)?,
            grid,
        })
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        self.cls_conv.init_he(rng, 0.0);
        self.cls_out.init_he(rng, -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln());
        self.box_conv.init_he(rng, 0.0);
        self.box_out.init_he(rng, 0.0);
        // small regression weights keep early deltas near the cell-centred prior
        for w in self.box_out.weight.value.data_mut() {
            *w *= T::lit(0.1);
        }
    }

    pub fn layers(&self) -> [(&'static str, &ConvLayer<T>); 4] {
        [
            ("cls_conv", &self.cls_conv),
            ("cls_out", &self.cls_out),
            ("box_conv", &self.box_conv),
            ("box_out", &self.box_out),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut ConvLayer<T>); 4] {
        [
            ("cls_conv", &mut self.cls_conv),
            ("cls_out", &mut self.cls_out),
            ("box_conv", &mut self.box_conv),
            ("box_out", &mut self.box_out),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(8);
        out.extend(self.cls_conv.params_mut());
        out.extend(self.cls_out.params_mut());
        out.extend(self.box_conv.params_mut());
        out.extend(self.box_out.params_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.parameter_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DetHead<U> {
        DetHead {
            cls_conv: self.cls_conv.cast(),
            cls_out: self.cls_out.cast(),
            box_conv: self.box_conv.cast(),
            box_out: self.box_out.cast(),
            grid: self.grid,
        }
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<DetTrace<T>> {
        let (_, _, h, w) = features.dims4()?;
        if h != self.grid || w != self.grid {
            return Err(Error::Shape {
                context: "detector head input extent",
                expected: vec![self.grid, self.grid],
                actual: vec![h, w],
            });
        }
        let cls_hidden = relu_forward(&conv2d_forward(features, &self.cls_conv)?);
        let box_hidden = relu_forward(&conv2d_forward(features, &self.box_conv)?);
        let outputs = DetOutputs {
            class_logits: conv2d_forward(&cls_hidden, &self.cls_out)?,
            box_deltas: conv2d_forward(&box_hidden, &self.box_out)?,
        };
        Ok(DetTrace {
            cls_hidden,
            box_hidden,
            outputs,
        })
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the tapped features.
    pub fn backward(
        &mut self,
        features: &Tensor<T>,
        trace: &DetTrace<T>,
        dclass_logits: &Tensor<T>,
        dbox_deltas: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dh = conv2d_backward(&trace.cls_hidden, &mut self.cls_out, dclass_logits)?;
        let dh = relu_backward(&trace.cls_hidden, &dh)?;
        let mut dfeat = conv2d_backward(features, &mut self.cls_conv, &dh)?;
        let dh = conv2d_backward(&trace.box_hidden, &mut self.box_out, dbox_deltas)?;
        let dh = relu_backward(&trace.box_hidden, &dh)?;
        dfeat.add_scaled(&conv2d_backward(features, &mut self.box_conv, &dh)?, T::one())?;
        Ok(dfeat)
    }
}

/// Regression target of `b` relative to cell `(row, col)` of side `cell`.
pub fn encode_box(b: &BBox, row: usize, col: usize, cell: f64) -> [f64; 4] {
    let cx = (b.x_min + b.x_max) / 2.0;
    let cy = (b.y_min + b.y_max) / 2.0;
    [
        cx / cell - col as f64,
        cy / cell - row as f64,
        ((b.x_max - b.x_min) / cell).ln(),
        ((b.y_max - b.y_min) / cell).ln(),
    ]
}

pub fn decode_box(deltas: [f64; 4], row: usize, col: usize, cell: f64) -> BBox {
    let cx = (col as f64 + deltas[0]) * cell;
    let cy = (row as f64 + deltas[1]) * cell;
    let w = deltas[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * cell;
    let h = deltas[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * cell;
    BBox {
        x_min: cx - w / 2.0,
        y_min: cy - h / 2.0,
        x_max: cx + w / 2.0,
        y_max: cy + h / 2.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetLossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Smooth-L1 transition point.
    pub smooth_l1_beta: f64,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        DetLossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetLoss<T = f32> {
    pub class: T,
    pub boxes: T,
    pub dclass_logits: Tensor<T>,
    pub dbox_deltas: Tensor<T>,
    pub positives: usize,
}

/// Per-cell targets: multi-hot classes and the regression target of the first box per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets {
    pub grid: usize,
    pub num_classes: usize,
    /// `[C, S, S]` row-major.
    pub classes: Vec<bool>,
    /// `Some(deltas)` for positive cells, row-major `S×S`.
    pub deltas: Vec<Option<[f64; 4]>>,
}

pub fn assign_targets(
    boxes: &[GroundTruthBox],
    patch_size: usize,
    grid: usize,
    num_classes: usize,
) -> Result<DetTargets> {
    let cell = patch_size as f64 / grid as f64;
    let mut t = DetTargets {
        grid,
        num_classes,
        classes: vec![false; num_classes * grid * grid],
        deltas: vec![None; grid * grid],
    };
    for b in boxes {
        if b.class_id >= num_classes {
            return Err(Error::validation(
                "class_id",
                format!("{} not below {num_classes}", b.class_id),
            ));
        }
        let (row, col) = center_cell(b, patch_size, grid)?;
        let idx = row * grid + col;
        t.classes[b.class_id * grid * grid + idx] = true;
        if t.deltas[idx].is_none() {
            t.deltas[idx] = Some(encode_box(&b.to_bbox(), row, col, cell));
        }
    }
    Ok(t)
}

/// `L_class`: sigmoid focal loss summed over every cell and class, divided by the number of
/// positive cells (at least one). `L_box`: smooth-L1 summed over the four deltas, averaged over
/// positive cells (zero without positives).
pub fn det_loss<T: Scalar>(
    outputs: &DetOutputs<T>,
    targets: &DetTargets,
    config: &DetLossConfig,
) -> Result<DetLoss<T>> {
    let (s, c) = (targets.grid, targets.num_classes);
    outputs
        .class_logits
        .expect_shape("detector class logits", &[1, c, s, s])?;
    outputs.box_deltas.expect_shape("detector box deltas", &[1, 4, s, s])?;

    let probs = sigmoid_forward(&outputs.class_logits);
    let target = Tensor::from_vec(
        &[1, c, s, s],
        targets.classes.iter().map(|&t| if t { T::one() } else { T::zero() }).collect(),
    )?;
    let focal = FocalParams {
        alpha: config.focal_alpha,
        gamma: config.focal_gamma,
    };
    let positives = targets.deltas.iter().filter(|d| d.is_some()).count();
    let (mean, dprob) = focal_loss(&probs, &target, None, focal)?;
    // focal_loss averages over all elements; rescale to a per-positive normaliser
    let rescale = T::from_usize(c * s * s).expect("count fits") / T::from_usize(positives.max(1)).expect("count fits");
    let class = mean * rescale;
    let mut dclass_logits = sigmoid_backward(&probs, &dprob)?;
    for g in dclass_logits.data_mut() {
        *g *= rescale;
    }

    let mut boxes = T::zero();
    let mut dbox = Tensor::zeros(&[1, 4, s, s]);
    if positives > 0 {
        let norm = T::from_usize(positives).expect("count fits");
        let pred = outputs.box_deltas.data();
        for (idx, target) in targets.deltas.iter().enumerate() {
            let Some(target) = target else { continue };
            for (k, &tv) in target.iter().enumerate() {
                let at = k * s * s + idx;
                let (l, g) = smooth_l1_element(pred[at] - T::lit(tv), config.smooth_l1_beta);
                boxes += l / norm;
                dbox.data_mut()[at] = g / norm;
            }
        }
    }
    Ok(DetLoss {
        class,
        boxes,
        dclass_logits,
        dbox_deltas: dbox,
        positives,
    })
}

/// `L = L_box + L_class + λ·L_OAN`
pub fn total_loss<T: Scalar>(class: T, boxes: T, oan: T, lambda: f64) -> T {
    boxes + class + T::lit(lambda) * oan
}

/// Every (cell, class) whose sigmoid score exceeds `keep_threshold`, in patch coordinates.
pub fn decode<T: Scalar>(outputs: &DetOutputs<T>, keep_threshold: f64, patch_size: usize) -> Vec<Detection> {
    let (s, c) = (outputs.grid(), outputs.num_classes());
    let cell = patch_size as f64 / s as f64;
    let p = patch_size as f64;
    let logits = outputs.class_logits.data();
    let deltas = outputs.box_deltas.data();
    let mut out = Vec::new();
    for row in 0..s {
        for col in 0..s {
            let idx = row * s + col;
            let mut bbox = None;
            for class_id in 0..c {
                let score = sigmoid(logits[class_id * s * s + idx].to_f64().unwrap_or(f64::NAN));
                if !(score > keep_threshold) {
                    continue;
                }
                let b = *bbox.get_or_insert_with(|| {
                    let d = [0, 1, 2, 3].map(|k| deltas[k * s * s + idx].to_f64().unwrap_or(f64::NAN));
                    decode_box(d, row, col, cell).clipped(p, p)
                });
                if b.is_valid() {
                    out.push(Detection {
                        bbox: b,
                        class_id,
                        score,
                    });
                }
            }
        }
    }
    out
}
