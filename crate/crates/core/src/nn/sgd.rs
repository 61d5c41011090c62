use serde::{Deserialize, Serialize};

use super::conv::Param;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Step-decayed SGD with classic momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Zero-based epoch indices at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
}

impl Default for SgdConfig {
    /// 12 epochs from 0.01, decayed ×0.1 after epochs 8 and 11.
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            epochs: 12,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::validation("decay_factor", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

/// `v ← μ·v + g; w ← w − lr·v`
pub fn sgd_step<T: Scalar>(param: &mut Param<T>, config: &SgdConfig, epoch: usize) {
    let lr = T::lit(config.learning_rate_at(epoch));
    let mu = T::lit(config.momentum);
    let Param {
        value,
        grad,
        velocity,
    } = param;
    for ((w, v), &g) in value
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut())
        .zip(grad.data())
    {
        *v = mu * *v + g;
        *w = *w - lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn plain_step() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![1.0f64, -1.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            ..SgdConfig::default()
        };
        sgd_step(&mut p, &cfg, 0);
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
        assert!((p.value.data()[1] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn default_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        assert_eq!(cfg.learning_rate_at(7), 0.01);
        assert!((cfg.learning_rate_at(8) - 1e-3).abs() < 1e-18);
        assert!((cfg.learning_rate_at(11) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![0.0f64]).unwrap());
        p.grad.fill(1.0);
        let cfg = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.5,
            ..SgdConfig::default()
        };
        sgd_step(&mut p, &cfg, 0);
        sgd_step(&mut p, &cfg, 0);
        assert_eq!(p.value.data()[0], -(1.0 + 1.5));
    }

    #[test]
    fn validation() {
        let bad = SgdConfig {
            decay_factor: 1.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
