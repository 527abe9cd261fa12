//! Loss terms and their weighted combination.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Detection weight.
    pub alpha: f64,
    /// Recognition weight.
    pub beta: f64,
    /// Extraction weight.
    pub gamma: f64,
    /// Contrastive weight.
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 10.0,
            lambda: 10.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!("focal_alpha = {} must lie in (0, 1)", self.focal_alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub det: f64,
    pub rec: f64,
    pub ie: f64,
    pub contrastive: f64,
}

impl LossReport {
    pub fn combine(det: f64, rec: f64, ie: f64, contrastive: f64, cfg: &LossConfig) -> Result<Self> {
        for (part, value) in [("det", det), ("rec", rec), ("ie", ie), ("contrastive", contrastive)] {
            if !value.is_finite() {
                return Err(Error::NonFinite { part, value });
            }
        }
        Ok(LossReport {
            total: cfg.alpha * det + cfg.beta * rec + cfg.gamma * ie + cfg.lambda * contrastive,
            det,
            rec,
            ie,
            contrastive,
        })
    }

    pub const CSV_HEADER: &'static str = "step,total,det,rec,ie,contrastive";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.total, self.det, self.rec, self.ie, self.contrastive
        )
    }
}

/// Scalar loss tensors of one step, before weighting.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub det: Tensor,
    pub rec: Tensor,
    pub ie: Tensor,
    pub contrastive: Tensor,
}

/// Weighted total as a differentiable scalar plus its numeric report.
/// Non-finite parts are rejected by name.
pub fn loss_total(parts: &LossParts, cfg: &LossConfig) -> Result<(Tensor, LossReport)> {
    let value = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport::combine(
        value(&parts.det)?,
        value(&parts.rec)?,
        value(&parts.ie)?,
        value(&parts.contrastive)?,
        cfg,
    )?;
    let mut total = (&parts.det * cfg.alpha)?;
    for (t, w) in [(&parts.rec, cfg.beta), (&parts.ie, cfg.gamma), (&parts.contrastive, cfg.lambda)] {
        if w != 0.0 {
            total = (total + (t * w)?)?;
        }
    }
    Ok((total, report))
}

fn pow_gamma(t: &Tensor, gamma: f64) -> Result<Tensor> {
    if gamma == 0.0 {
        return Ok(t.ones_like()?);
    }
    if gamma.fract() == 0.0 && gamma <= 8.0 {
        let mut out = t.clone();
        for _ in 1..gamma as usize {
            out = (out * t)?;
        }
        return Ok(out);
    }
    Ok(t.clamp(1e-30, 1.0)?.powf(gamma)?)
}

/// Elementwise binary focal loss on logits `x` against 0/1 targets `y`,
/// using `ln p = -softplus(-x)` and `ln(1-p) = -softplus(x)`.
pub fn focal_elements(x: &Tensor, y: &Tensor, focal_alpha: f64, focal_gamma: f64) -> Result<Tensor> {
    let p = sigmoid(x)?;
    let q = sigmoid(&x.neg()?)?;
    let pos = (pow_gamma(&q, focal_gamma)? * softplus(&x.neg()?)?)?.mul(y)?;
    let neg = (pow_gamma(&p, focal_gamma)? * softplus(x)?)?.mul(&y.ones_like()?.sub(y)?)?;
    Ok(((pos * focal_alpha)? + (neg * (1.0 - focal_alpha))?)?)
}

/// Mean focal loss over all `N x M` entries of `s`; zero when `N = 0`.
pub fn loss_contrastive(s: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    if s.dims() != target.dims() {
        return Err(Error::Shape {
            axis: "similarity target",
            expected: s.elem_count(),
            actual: target.elem_count(),
        });
    }
    if s.elem_count() == 0 {
        return Ok(Tensor::zeros((), s.dtype(), s.device())?);
    }
    Ok(focal_elements(s, target, cfg.focal_alpha, cfg.focal_gamma)?.mean_all()?)
}

/// Mean cross-entropy of `logits (N, L, V)` against `targets (N, L)` (u32)
/// over positions where `mask (N, L)` is 1. The flag is set when no
/// position is valid, in which case the loss is 0.
pub fn loss_rec(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<(Tensor, bool)> {
    let count = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if count == 0.0 || logits.elem_count() == 0 {
        return Ok((Tensor::zeros((), logits.dtype(), logits.device())?, true));
    }
    let logp = log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    let nll = (picked.mul(mask)?.sum_all()?.neg()? / count)?;
    Ok((nll, false))
}

/// Mean over sequences of per-sequence negative log-likelihoods `(N,)`.
pub fn loss_ie(nll: &Tensor) -> Result<Tensor> {
    if nll.elem_count() == 0 {
        return Ok(Tensor::zeros((), nll.dtype(), nll.device())?);
    }
    Ok(nll.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn focal_oracle(x: f64, y: f64, a: f64, g: f64) -> f64 {
        let p = 1.0 / (1.0 + (-x).exp());
        -a * y * (1.0 - p).powf(g) * p.ln() - (1.0 - a) * (1.0 - y) * p.powf(g) * (1.0 - p).ln()
    }

    #[test]
    fn focal_hand_value() {
        let s = Tensor::new(&[[0.0f64]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        let l = scalar(&loss_contrastive(&s, &y, &LossConfig::default()).unwrap());
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_matches_oracle_and_reduces_to_bce() {
        let xs = [-3.0, -0.4, 0.0, 0.7, 5.0, -12.0];
        let ys = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let x = Tensor::new(&xs, &Device::Cpu).unwrap();
        let y = Tensor::new(&ys, &Device::Cpu).unwrap();
        for (a, g) in [(0.25, 2.0), (0.5, 0.0), (0.7, 1.5)] {
            let got = focal_elements(&x, &y, a, g).unwrap().to_vec1::<f64>().unwrap();
            for i in 0..xs.len() {
                assert!((got[i] - focal_oracle(xs[i], ys[i], a, g)).abs() < 1e-12);
            }
        }
        let cfg = LossConfig {
            focal_alpha: 0.5,
            focal_gamma: 0.0,
            ..LossConfig::default()
        };
        let bce: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x as f64).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / xs.len() as f64;
        let l = scalar(&loss_contrastive(&x, &y, &cfg).unwrap());
        assert!((l - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_vanishes_at_confident_correct_logits() {
        let x = Tensor::new(&[[60.0f64, -60.0], [-60.0, -60.0]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[[1.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        assert!(scalar(&loss_contrastive(&x, &y, &LossConfig::default()).unwrap()) < 1e-20);
    }

    #[test]
    fn rec_loss_uniform_is_ln_v() {
        let v = 7;
        let logits = Tensor::zeros((2, 3, v), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32, 2, 0], [4, 0, 0]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0], [1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let (l, empty) = loss_rec(&logits, &targets, &mask).unwrap();
        assert!(!empty);
        assert!((scalar(&l) - (v as f64).ln()).abs() < 1e-12);
        let none = mask.zeros_like().unwrap();
        let (l, empty) = loss_rec(&logits, &targets, &none).unwrap();
        assert!(empty && scalar(&l) == 0.0);
    }

    #[test]
    fn rec_loss_confident_correct_is_zero() {
        let mut data = vec![-50.0f64; 2 * 4];
        data[1] = 50.0;
        data[4 + 3] = 50.0;
        let logits = Tensor::from_vec(data, (1, 2, 4), &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32, 3]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        assert!(scalar(&loss_rec(&logits, &targets, &mask).unwrap().0) < 1e-30);
    }

    #[test]
    fn total_with_defaults() {
        let r = LossReport::combine(1.0, 1.0, 1.0, 1.0, &LossConfig::default()).unwrap();
        assert_eq!(r.total, 22.0);
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let a = LossReport::combine(0.3, 0.2, 0.1, 5.0, &cfg).unwrap();
        let b = LossReport::combine(0.3, 0.2, 0.1, 9.0, &cfg).unwrap();
        assert_eq!(a.total, b.total);
        assert!(matches!(
            LossReport::combine(0.0, f64::NAN, 0.0, 0.0, &cfg),
            Err(Error::NonFinite { part: "rec", .. })
        ));
    }
}
