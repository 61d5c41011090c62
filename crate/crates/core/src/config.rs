//! Run configuration: every knob of every stage in one JSON document.
//!
//! Missing keys take their defaults and unknown keys are rejected. [`RunConfig::validate`]
//! collects every violation instead of stopping at the first.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::InferConfig;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

/// Evaluation scenes are seeded from the training seed plus this offset.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub num_scenes: usize,
    pub eval_scenes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Scaling factor `k` of threshold calibration.
    pub calibration_k: f64,
    /// Sweep thresholds; empty means a grid around the calibrated threshold.
    pub sweep_thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec::default(),
            num_scenes: 200,
            eval_scenes: 20,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            calibration_k: 4.0,
            sweep_thresholds: Vec::new(),
        }
    }
}

impl RunConfig {
    /// An unreadable file is an I/O error; malformed JSON or schema violations are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Reseeds scene generation and training from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.init_seed = seed;
        self.train.shuffle_seed = seed.wrapping_add(1);
        self
    }

    pub fn eval_scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.scene.seed.wrapping_add(EVAL_SEED_OFFSET),
            ..self.scene.clone()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let p = self.model.patch_size;
        if let Err(e) = self.scene.validate_for_patch(p) {
            v.push(format!("scene: {e}"));
        }
        if self.scene.num_classes != self.model.num_classes {
            v.push(format!(
                "model.num_classes: {} differs from scene.num_classes {}",
                self.model.num_classes, self.scene.num_classes
            ));
        }
        if self.num_scenes == 0 {
            v.push("num_scenes: must be positive".into());
        }
        v.extend(self.model.validate());
        v.extend(self.train.validate());
        v.extend(self.infer.validate(p));
        if !(self.calibration_k > 0.0 && self.calibration_k.is_finite()) {
            v.push(format!("calibration_k: {} must be finite and > 0", self.calibration_k));
        }
        if self.sweep_thresholds.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            v.push("sweep_thresholds: entries must be finite and >= 0".into());
        }
        if self.sweep_thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
            v.push("sweep_thresholds: must be ascending".into());
        }
        v
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(v))
        }
    }

    /// SHA-256 of the compact JSON serialisation.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// Git blob object id computed with SHA-256: `sha256("blob <len>\0" ‖ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(RunConfig::default().validate().is_empty());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"num_scenes": 3, "train": {"lambda": 0}}"#).unwrap();
        assert_eq!(c.num_scenes, 3);
        assert_eq!(c.train.lambda, 0.0);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"num_scene": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lamda": 1}}"#).is_err());
    }

    #[test]
    fn load_classifies_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        assert_eq!(RunConfig::load(&path).unwrap_err().exit_code(), 2);
        std::fs::write(&path, r#"{"num_scene": 3}"#).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap_err().exit_code(), 3);
        std::fs::write(&path, r#"{"num_scenes": 3}"#).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap().num_scenes, 3);
    }

    #[test]
    fn every_violation_is_listed() {
        let mut c = RunConfig::default();
        c.train.lambda = -1.0;
        c.infer.stride = 0;
        c.calibration_k = 0.0;
        let v = c.validate();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(matches!(c.validated(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), a.clone().with_seed(9).hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn empty_blob_hash() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
