//! Toy backbone plus the two heads, with checkpoint (de)serialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetHead, DetOutputs, DetTrace};
use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, relu_backward, relu_forward, Checkpoint,
    ConvLayer, Param, Scalar, Tensor,
};
use crate::oan::{ActivationMap, OanHead, OanHeadConfig, OanTrace};
use crate::raster::GrayImage;

/// Stage `i` maps extent `E` to `E/2` with `3×3 s2 conv → ReLU → 3×3 conv → ReLU`.
/// Taps are zero-based stage indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub oan_tap: usize,
    pub det_tap: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![8, 16, 32, 64],
            oan_tap: 2,
            det_tap: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// OAN grid `S`; the detector grid equals the detector tap extent.
    pub grid: usize,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub oan_head: OanHeadConfig,
    pub det_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 128,
            grid: 8,
            num_classes: 3,
            backbone: BackboneConfig::default(),
            oan_head: OanHeadConfig {
                reduce_channels: 32,
                hidden_channels: 64,
            },
            det_hidden: 32,
        }
    }
}

impl ModelConfig {
    /// Spatial extent of stage `i`'s output.
    pub fn stage_extent(&self, stage: usize) -> usize {
        self.patch_size >> (stage + 1)
    }

    pub fn det_grid(&self) -> usize {
        self.stage_extent(self.backbone.det_tap)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let b = &self.backbone;
        let n = b.stage_channels.len();
        if n < 2 {
            v.push(format!("model.backbone.stage_channels: need at least 2 stages, got {n}"));
        }
        if b.stage_channels.contains(&0) {
            v.push("model.backbone.stage_channels: channel counts must be positive".into());
        }
        if b.oan_tap >= n {
            v.push(format!("model.backbone.oan_tap: {} not below stage count {n}", b.oan_tap));
        }
        if b.det_tap >= n {
            v.push(format!("model.backbone.det_tap: {} not below stage count {n}", b.det_tap));
        }
        if self.patch_size == 0 || n >= usize::BITS as usize || !self.patch_size.is_multiple_of(1 << n) {
            v.push(format!(
                "model.patch_size: {} must be a positive multiple of 2^{n}",
                self.patch_size
            ));
        }
        if self.grid == 0 {
            v.push("model.grid: must be positive".into());
        } else if !self.patch_size.is_multiple_of(self.grid) {
            v.push(format!("model.grid: {} does not divide patch_size {}", self.grid, self.patch_size));
        }
        if self.num_classes == 0 {
            v.push("model.num_classes: must be positive".into());
        }
        if self.oan_head.reduce_channels == 0 || self.oan_head.hidden_channels == 0 || self.det_hidden == 0 {
            v.push("model: head channel counts must be positive".into());
        }
        if v.is_empty() {
            let extent = self.stage_extent(b.oan_tap);
            if let Err(e) = crate::oan::head_geometry(extent, self.grid) {
                v.push(format!("model.backbone.oan_tap: {e}"));
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T = f32> {
    pub down: ConvLayer<T>,
    pub conv: ConvLayer<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T = f32> {
    pub stages: Vec<Stage<T>>,
}

/// Stage activations; `outputs[i]` is the tap of stage `i`.
#[derive(Clone, Debug)]
pub struct BackboneTrace<T = f32> {
    input: Tensor<T>,
    mids: Vec<Tensor<T>>,
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> BackboneTrace<T> {
    /// Post-ReLU activations, in forward order.
    pub fn relu_outputs(&self) -> Vec<&Tensor<T>> {
        self.mids.iter().zip(&self.outputs).flat_map(|(m, o)| [m, o]).collect()
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn new(in_channels: usize, channels: &[usize]) -> Result<Self> {
        let mut stages = Vec::with_capacity(channels.len());
        let mut c_in = in_channels;
        for &c in channels {
            stages.push(Stage {
                down: ConvLayer::new(c_in, c, 3, 2)?,
                conv: ConvLayer::new(c, c, 3, 1)?,
            });
            c_in = c;
        }
        Ok(Backbone { stages })
    }

    /// Runs stages `0..=last`.
    pub fn forward(&self, input: &Tensor<T>, last: usize) -> Result<BackboneTrace<T>> {
        let mut mids = Vec::with_capacity(last + 1);
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(last + 1);
        for stage in &self.stages[..=last] {
            let x = outputs.last().unwrap_or(input);
            let mid = relu_forward(&conv2d_forward(x, &stage.down)?);
            let out = relu_forward(&conv2d_forward(&mid, &stage.conv)?);
            mids.push(mid);
            outputs.push(out);
        }
        Ok(BackboneTrace {
            input: input.clone(),
            mids,
            outputs,
        })
    }

    /// `grads[i]` is the loss gradient arriving at stage `i`'s output, if any.
    pub fn backward(&mut self, trace: &BackboneTrace<T>, mut grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..trace.outputs.len()).rev() {
            let g = match (carry.take(), grads.get_mut(i).and_then(Option::take)) {
                (Some(mut a), Some(b)) => {
                    a.add_scaled(&b, T::one())?;
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => continue,
            };
            let stage = &mut self.stages[i];
            let g = relu_backward(&trace.outputs[i], &g)?;
            let g = conv2d_backward(&trace.mids[i], &mut stage.conv, &g)?;
            let g = relu_backward(&trace.mids[i], &g)?;
            if i == 0 {
                conv2d_backward_params(&trace.input, &mut stage.down, &g)?;
            } else {
                carry = Some(conv2d_backward(&trace.outputs[i - 1], &mut stage.down, &g)?);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub oan: OanHead<T>,
    pub det: DetHead<T>,
}

#[derive(Clone, Debug)]
pub struct ModelTrace<T = f32> {
    pub backbone: BackboneTrace<T>,
    pub oan: OanTrace<T>,
    pub det: DetTrace<T>,
}

/// Pixel intensities scaled to `[0, 1]`, shaped `[1, 1, H, W]`.
pub fn input_tensor<T: Scalar>(raster: &GrayImage) -> Tensor<T> {
    let scale = T::lit(1.0 / 255.0);
    let data = raster.pixels().iter().map(|&p| T::lit(p as f64) * scale).collect();
    Tensor::from_vec(&[1, 1, raster.height(), raster.width()], data).expect("raster shape")
}

impl<T: Scalar> Model<T> {
    /// Zero-initialised model; see [`Model::init`].
    pub fn new(config: ModelConfig) -> Result<Self> {
        let violations = config.validate();
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let ch = &config.backbone.stage_channels;
        let backbone = Backbone::new(1, ch)?;
        let oan_tap = config.backbone.oan_tap;
        let oan = OanHead::new(ch[oan_tap], config.stage_extent(oan_tap), config.grid, config.oan_head)?;
        let det = DetHead::new(
            ch[config.backbone.det_tap],
            config.det_grid(),
            config.det_hidden,
            config.num_classes,
        )?;
        Ok(Model {
            config,
            backbone,
            oan,
            det,
        })
    }

    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut self.backbone.stages {
            s.down.init_he(&mut rng, 0.0);
            s.conv.init_he(&mut rng, 0.0);
        }
        self.oan.init(&mut rng);
        self.det.init(&mut rng);
    }

    pub fn initialised(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.init(seed);
        Ok(m)
    }

    fn last_stage(&self) -> usize {
        self.config.backbone.oan_tap.max(self.config.backbone.det_tap)
    }

    pub fn features(&self, input: &Tensor<T>) -> Result<BackboneTrace<T>> {
        self.backbone.forward(input, self.last_stage())
    }

    pub fn objectness(&self, features: &BackboneTrace<T>) -> Result<ActivationMap<T>> {
        let tap = &features.outputs[self.config.backbone.oan_tap];
        Ok(self.oan.forward(tap, self.config.patch_size)?.map)
    }

    pub fn detect(&self, features: &BackboneTrace<T>) -> Result<DetOutputs<T>> {
        Ok(self.det.forward(&features.outputs[self.config.backbone.det_tap])?.outputs)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<ModelTrace<T>> {
        let backbone = self.features(input)?;
        let taps = &self.config.backbone;
        let oan = self.oan.forward(&backbone.outputs[taps.oan_tap], self.config.patch_size)?;
        let det = self.det.forward(&backbone.outputs[taps.det_tap])?;
        Ok(ModelTrace { backbone, oan, det })
    }

    /// Accumulates gradients for all parameters given loss gradients at the three outputs.
    pub fn backward(
        &mut self,
        trace: &ModelTrace<T>,
        doan_logits: &Tensor<T>,
        dclass_logits: &Tensor<T>,
        dbox_deltas: &Tensor<T>,
    ) -> Result<()> {
        let taps = self.config.backbone.clone();
        let outputs = &trace.backbone.outputs;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; outputs.len()];
        let d_oan = self.oan.backward(&outputs[taps.oan_tap], &trace.oan, doan_logits)?;
        grads[taps.oan_tap] = Some(d_oan);
        let d_det = self
            .det
            .backward(&outputs[taps.det_tap], &trace.det, dclass_logits, dbox_deltas)?;
        match &mut grads[taps.det_tap] {
            Some(g) => g.add_scaled(&d_det, T::one())?,
            slot => *slot = Some(d_det),
        }
        self.backbone.backward(&trace.backbone, grads)
    }

    /// Layers in canonical order with stable checkpoint names.
    pub fn named_layers(&self) -> Vec<(String, &ConvLayer<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.backbone.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.down"), &s.down));
            out.push((format!("backbone.stage{i}.conv"), &s.conv));
        }
        out.extend(self.oan.layers().map(|(n, l)| (format!("oan.{n}"), l)));
        out.extend(self.det.layers().map(|(n, l)| (format!("det.{n}"), l)));
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut ConvLayer<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.backbone.stages.iter_mut().enumerate() {
            out.push((format!("backbone.stage{i}.down"), &mut s.down));
            out.push((format!("backbone.stage{i}.conv"), &mut s.conv));
        }
        out.extend(self.oan.layers_mut().map(|(n, l)| (format!("oan.{n}"), l)));
        out.extend(self.det.layers_mut().map(|(n, l)| (format!("det.{n}"), l)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.named_layers_mut()
            .into_iter()
            .flat_map(|(_, l)| l.params_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_layers().iter().map(|(_, l)| l.parameter_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            backbone: Backbone {
                stages: self
                    .backbone
                    .stages
                    .iter()
                    .map(|s| Stage {
                        down: s.down.cast(),
                        conv: s.conv.cast(),
                    })
                    .collect(),
            },
            oan: self.oan.cast(),
            det: self.det.cast(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for (name, layer) in self.named_layers() {
            for (suffix, p) in ["weight", "bias"].iter().zip(layer.params()) {
                let values = p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
                ckpt.push(format!("{name}.{suffix}"), p.value.shape(), values);
            }
        }
        ckpt
    }

    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config)?;
        let expected = model.named_layers().len() * 2;
        if ckpt.entries.len() != expected {
            return Err(Error::Shape {
                context: "checkpoint entry count",
                expected: vec![expected],
                actual: vec![ckpt.entries.len()],
            });
        }
        for (name, layer) in model.named_layers_mut() {
            for (suffix, p) in ["weight", "bias"].iter().zip(layer.params_mut()) {
                let key = format!("{name}.{suffix}");
                let entry = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::validation("checkpoint", format!("missing entry {key}")))?;
                p.value.expect_shape("checkpoint entry", &entry.dims)?;
                let data = entry.values.iter().map(|&v| T::lit(v as f64)).collect();
                p.value = Tensor::from_vec(&entry.dims, data)?;
            }
        }
        Ok(model)
    }
}
