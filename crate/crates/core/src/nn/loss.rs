use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Per-element binary focal loss and its derivative w.r.t. the probability.
///
/// The derivative is evaluated at the clamped probability so that saturated predictions still
/// receive a learning signal.
pub fn focal_element<T: Scalar>(p: T, target: bool, params: FocalParams) -> (T, T) {
    let eps = T::lit(PROB_EPS);
    let p = p.max(eps).min(T::one() - eps);
    let (alpha, gamma) = (T::lit(params.alpha), T::lit(params.gamma));
    let one = T::one();
    if target {
        let q = one - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let mut grad = -alpha * q.powf(gamma) / p;
        if params.gamma != 0.0 {
            grad += alpha * gamma * q.powf(gamma - one) * p.ln();
        }
        (loss, grad)
    } else {
        let q = one - p;
        let beta = one - alpha;
        let loss = -beta * p.powf(gamma) * q.ln();
        let mut grad = beta * p.powf(gamma) / q;
        if params.gamma != 0.0 {
            grad = grad - beta * gamma * p.powf(gamma - one) * q.ln();
        }
        (loss, grad)
    }
}

/// Mean binary focal loss over all elements (ignored elements contribute zero but still count
/// in the denominator), with the gradient w.r.t. `prob`.
pub fn focal_loss<T: Scalar>(
    prob: &Tensor<T>,
    target: &Tensor<T>,
    ignore: Option<&Tensor<T>>,
    params: FocalParams,
) -> Result<(T, Tensor<T>)> {
    target.expect_shape("focal target", prob.shape())?;
    if let Some(ig) = ignore {
        ig.expect_shape("focal ignore mask", prob.shape())?;
    }
    let count = T::from_usize(prob.len().max(1)).expect("count fits");
    let mut total = T::zero();
    let mut grad = Tensor::zeros(prob.shape());
    for (i, (&p, &t)) in prob.data().iter().zip(target.data()).enumerate() {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(Error::Numeric(format!(
                "focal loss probability {p:?} at index {i} outside [0, 1]"
            )));
        }
        if ignore.is_some_and(|ig| ig.data()[i] > T::zero()) {
            continue;
        }
        let (l, g) = focal_element(p, t > T::lit(0.5), params);
        total += l;
        grad.data_mut()[i] = g / count;
    }
    Ok((total / count, grad))
}

/// Smooth-L1 (Huber) with transition point `beta`.
pub fn smooth_l1_element<T: Scalar>(diff: T, beta: f64) -> (T, T) {
    let beta_t = T::lit(beta);
    let ad = diff.abs();
    if beta <= 0.0 {
        return (ad, diff.signum());
    }
    if ad < beta_t {
        (T::lit(0.5) * diff * diff / beta_t, diff / beta_t)
    } else {
        (ad - T::lit(0.5) * beta_t, diff.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_half_probability_positive() {
        // 0.25 · 0.5² · ln 2
        let (l, _) = focal_element(0.5f64, true, FocalParams::default());
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_half_alpha_is_half_bce() {
        let params = FocalParams {
            alpha: 0.5,
            gamma: 0.0,
        };
        for &p in &[0.1f64, 0.4, 0.9] {
            let (lp, _) = focal_element(p, true, params);
            let (ln, _) = focal_element(p, false, params);
            assert!((lp - 0.5 * -p.ln()).abs() < 1e-14);
            assert!((ln - 0.5 * -(1.0 - p).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn all_ignored_is_zero() {
        let p = Tensor::full(&[4], 0.3f64);
        let t = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let ig = Tensor::full(&[4], 1.0);
        let (l, g) = focal_loss(&p, &t, Some(&ig), FocalParams::default()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_probability_is_numeric_error() {
        let p = Tensor::from_vec(&[2], vec![0.5f32, 1.5]).unwrap();
        let t = Tensor::zeros(&[2]);
        assert!(matches!(
            focal_loss(&p, &t, None, FocalParams::default()),
            Err(Error::Numeric(_))
        ));
        let p = Tensor::from_vec(&[1], vec![f32::NAN]).unwrap();
        assert!(focal_loss(&p, &Tensor::zeros(&[1]), None, FocalParams::default()).is_err());
    }

    #[test]
    fn zero_iff_clamped_perfect() {
        let params = FocalParams::default();
        assert!(focal_element(1.0f64, true, params).0 < 1e-12);
        assert!(focal_element(0.0f64, false, params).0 < 1e-12);
        assert!(focal_element(0.99f64, true, params).0 > 0.0);
        assert!(focal_element(0.01f64, false, params).0 > 0.0);
    }

    #[test]
    fn smooth_l1_pieces() {
        let (l, g) = smooth_l1_element(0.05f64, 0.1);
        assert!((l - 0.5 * 0.05 * 0.05 / 0.1).abs() < 1e-15);
        assert!((g - 0.5).abs() < 1e-15);
        let (l, g) = smooth_l1_element(-2.0f64, 0.1);
        assert!((l - 1.95).abs() < 1e-15);
        assert_eq!(g, -1.0);
    }
}
