//! Hard-sample weighted regression loss and the FBI cross-entropy.
//!
//! For a per-sample mean squared error `L0` (in standardized coordinates):
//!
//! ```text
//! L1   = (L0 + α)² · L0 · exp(L0 / (1 − α))
//! Loss = L0 + ε · L1
//! ```
//!
//! `1 − α` tracks the mean `L0` over the training set, so samples far above
//! the mean get an exponentially larger share of the gradient.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbi::FbiMatrix;

/// Exponent arguments above this are clamped before `exp`.
pub const EXPONENT_CLAMP: f64 = 50.0;
pub const ALPHA_MIN: f64 = 0.01;
pub const ALPHA_MAX: f64 = 0.99;
/// Probability floor inside `ln` for the FBI cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedLossConfig {
    pub epsilon: f64,
    pub alpha: f64,
}

impl WeightedLossConfig {
    pub const DEFAULT_EPSILON: f64 = 0.001;

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedLoss {
    pub loss: f64,
    pub l1: f64,
    /// dLoss/dL0
    pub derivative: f64,
    /// Whether the exponent argument hit [`EXPONENT_CLAMP`].
    pub clamped: bool,
}

/// Per-sample mean squared error.
pub fn l0(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "L0 operands",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / gt.len() as f64)
}

pub fn weighted_loss(l0_value: f64, cfg: &WeightedLossConfig) -> Result<WeightedLoss> {
    if !(l0_value >= 0.0) {
        return Err(Error::NegativeL0(l0_value));
    }
    cfg.validate()?;
    let alpha = cfg.alpha;
    let arg = l0_value / (1.0 - alpha);
    let clamped = arg > EXPONENT_CLAMP;
    let e = arg.min(EXPONENT_CLAMP).exp();
    let shifted = l0_value + alpha;
    let l1 = shifted * shifted * l0_value * e;
    let mut dl1 = e * (2.0 * shifted * l0_value + shifted * shifted);
    if !clamped {
        dl1 += shifted * shifted * l0_value * e / (1.0 - alpha);
    }
    Ok(WeightedLoss {
        loss: l0_value + cfg.epsilon * l1,
        l1,
        derivative: 1.0 + cfg.epsilon * dl1,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// `1 − mean(L0)` before clamping.
    pub raw_alpha: f64,
    pub mean_l0: f64,
    pub clamped: bool,
}

/// α = 1 − mean(L0), clamped into `[ALPHA_MIN, ALPHA_MAX]`.
pub fn estimate_alpha(l0_values: &[f64]) -> Result<AlphaEstimate> {
    if l0_values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mean_l0 = l0_values.iter().sum::<f64>() / l0_values.len() as f64;
    let raw_alpha = 1.0 - mean_l0;
    let alpha = raw_alpha.clamp(ALPHA_MIN, ALPHA_MAX);
    Ok(AlphaEstimate {
        alpha,
        raw_alpha,
        mean_l0,
        clamped: alpha != raw_alpha,
    })
}

/// Row-wise mean squared error of a batch.
pub fn l0_rows(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Result<Vec<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension {
            what: "L0 batch",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let d = gt.ncols() as f64;
    Ok(Zip::from(pred.rows())
        .and(gt.rows())
        .map_collect(|p, g| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
        .to_vec())
}

/// How the regression loss combines per-sample errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionLoss {
    /// Mean of per-sample L0.
    PlainL2,
    /// Mean of per-sample weighted losses.
    Weighted(WeightedLossConfig),
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub mean_l0: f64,
    /// Gradient of `loss` w.r.t. the predictions.
    pub grad: Array2<f64>,
    pub clamped_samples: usize,
}

pub fn regression_batch_loss(pred: ArrayView2<f64>, gt: ArrayView2<f64>, kind: RegressionLoss) -> Result<BatchLoss> {
    let per_sample = l0_rows(pred, gt)?;
    let n = per_sample.len() as f64;
    let d = gt.ncols() as f64;
    let mut loss = 0.0;
    let mut clamped_samples = 0;
    let mut scale = Vec::with_capacity(per_sample.len());
    for &v in &per_sample {
        match kind {
            RegressionLoss::PlainL2 => {
                loss += v;
                scale.push(2.0 / (d * n));
            }
            RegressionLoss::Weighted(cfg) => {
                let w = weighted_loss(v, &cfg)?;
                loss += w.loss;
                clamped_samples += usize::from(w.clamped);
                scale.push(w.derivative * (2.0 / (d * n)));
            }
        }
    }
    let mut grad = &pred - &gt;
    for (mut row, s) in grad.axis_iter_mut(Axis(0)).zip(&scale) {
        row *= *s;
    }
    Ok(BatchLoss {
        loss: loss / n,
        mean_l0: per_sample.iter().sum::<f64>() / n,
        grad,
        clamped_samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbiCrossEntropy {
    pub loss: f64,
    /// Gradient w.r.t. each group's softmax logits.
    pub logit_grad: Vec<[f64; 3]>,
    /// Some true-class probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// Mean over bones of −ln p(true class).
pub fn fbi_ce_loss(probs: &[[f64; 3]], gt: &FbiMatrix) -> Result<FbiCrossEntropy> {
    if probs.len() != gt.num_bones() {
        return Err(Error::Dimension {
            what: "fbi probability rows",
            expected: gt.num_bones(),
            got: probs.len(),
        });
    }
    let m = probs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut clamped = false;
    let logit_grad = probs
        .iter()
        .zip(gt.statuses())
        .map(|(p, s)| {
            let t = s.index();
            if p[t] < PROB_FLOOR {
                clamped = true;
            }
            loss -= p[t].max(PROB_FLOOR).ln();
            let mut g = [p[0] / m, p[1] / m, p[2] / m];
            g[t] -= 1.0 / m;
            g
        })
        .collect();
    Ok(FbiCrossEntropy {
        loss: loss / m,
        logit_grad,
        clamped,
    })
}

/// Batched cross-entropy on an `n × 3m` probability matrix; returns the mean
/// loss and the gradient w.r.t. logits.
pub fn fbi_ce_batch(probs: ArrayView2<f64>, gt: &[&FbiMatrix]) -> Result<(f64, Array2<f64>)> {
    if probs.nrows() != gt.len() {
        return Err(Error::Dimension {
            what: "fbi batch rows",
            expected: gt.len(),
            got: probs.nrows(),
        });
    }
    let n = gt.len() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    for (r, labels) in gt.iter().enumerate() {
        let row = probs.row(r);
        let rows: Vec<[f64; 3]> = row
            .as_slice()
            .ok_or_else(|| Error::Format("non-contiguous probabilities".into()))?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let ce = fbi_ce_loss(&rows, labels)?;
        total += ce.loss;
        for (i, g) in ce.logit_grad.iter().enumerate() {
            for k in 0..3 {
                grad[[r, 3 * i + k]] = g[k] / n;
            }
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbi::BoneStatus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(epsilon: f64, alpha: f64) -> WeightedLossConfig {
        WeightedLossConfig { epsilon, alpha }
    }

    #[test]
    fn l0_cases() {
        let gt: Vec<f64> = (0..51).map(|i| i as f64 * 0.1).collect();
        assert_eq!(l0(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 1.0).collect();
        assert!((l0(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!(l0(&gt[..50], &gt).is_err());
    }

    #[test]
    fn l0_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a: Vec<f64> = (0..51).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..51).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut acc = 0.0;
            for i in 0..51 {
                let d = a[i] - b[i];
                acc += d * d;
            }
            assert!((l0(&a, &b).unwrap() - acc / 51.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_l0_gives_zero_loss() {
        let w = weighted_loss(0.0, &cfg(0.001, 0.5)).unwrap();
        assert_eq!(w.loss, 0.0);
        assert_eq!(w.l1, 0.0);
    }

    #[test]
    fn worked_example() {
        // (0.5 + 0.5)^2 * 0.5 * e^1 = 1.3591409142295225
        let w = weighted_loss(0.5, &cfg(0.001, 0.5)).unwrap();
        assert!((w.l1 - 1.359_140_914_229_522_5).abs() < 1e-12);
        assert!((w.loss - 0.501359).abs() < 1e-6);
    }

    #[test]
    fn epsilon_zero_reduces_to_l0() {
        for &v in &[0.0, 0.3, 2.0, 80.0] {
            let w = weighted_loss(v, &cfg(0.0, 0.4)).unwrap();
            assert_eq!(w.loss, v);
            assert_eq!(w.derivative, 1.0);
        }
    }

    #[test]
    fn errors_and_clamp_flag() {
        assert!(matches!(weighted_loss(-1e-3, &cfg(0.001, 0.5)), Err(Error::NegativeL0(_))));
        assert!(weighted_loss(f64::NAN, &cfg(0.001, 0.5)).is_err());
        assert!(weighted_loss(0.1, &cfg(0.001, 1.0)).is_err());
        assert!(weighted_loss(0.1, &cfg(-0.1, 0.5)).is_err());
        let w = weighted_loss(10.0, &cfg(0.001, 0.9)).unwrap();
        assert!(w.clamped && w.loss.is_finite());
        assert!(!weighted_loss(1.0, &cfg(0.001, 0.9)).unwrap().clamped);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let h = 1e-6;
        for &alpha in &[0.1, 0.5, 0.9] {
            let c = cfg(0.001, alpha);
            for k in 1..200 {
                let v = k as f64 * 0.1;
                let arg = v / (1.0 - alpha);
                if (arg - EXPONENT_CLAMP).abs() < 1.0 {
                    continue;
                }
                let w = weighted_loss(v, &c).unwrap();
                let num = (weighted_loss(v + h, &c).unwrap().loss - weighted_loss(v - h, &c).unwrap().loss) / (2.0 * h);
                let rel = (w.derivative - num).abs() / w.derivative.abs().max(num.abs());
                assert!(rel < 1e-8, "alpha {alpha} L0 {v}: {rel}");
            }
        }
    }

    #[test]
    fn strictly_increasing_on_dense_grid() {
        for &alpha in &[0.1, 0.5, 0.9] {
            let c = cfg(0.001, alpha);
            let mut prev = weighted_loss(0.0, &c).unwrap().loss;
            for k in 1..=10_000 {
                let cur = weighted_loss(k as f64 * 0.01, &c).unwrap().loss;
                assert!(cur > prev, "alpha {alpha} step {k}");
                prev = cur;
            }
        }
    }

    #[test]
    fn hard_sample_ratio_strictly_increasing() {
        for &alpha in &[0.1, 0.5, 0.9] {
            let c = cfg(0.001, alpha);
            let ratio = |v: f64| weighted_loss(v, &c).unwrap().l1 / v;
            let mut prev = ratio(1e-4);
            for k in 1..=10_000 {
                let v = 1e-4 + k as f64 * 0.01;
                let cur = ratio(v);
                assert!(cur > prev, "alpha {alpha} step {k}");
                prev = cur;
            }
        }
    }

    #[test]
    fn alpha_estimates() {
        assert_eq!(estimate_alpha(&[0.0, 0.0]).unwrap().alpha, ALPHA_MAX);
        assert!(estimate_alpha(&[0.0]).unwrap().clamped);
        let a = estimate_alpha(&[0.3; 10]).unwrap();
        assert!((a.alpha - 0.7).abs() < 1e-12 && !a.clamped);
        assert_eq!(estimate_alpha(&[5.0]).unwrap().alpha, ALPHA_MIN);
        assert!(matches!(estimate_alpha(&[]), Err(Error::EmptyDataset)));
        let mixed = [0.1, 0.25, 0.4, 0.05];
        let mut acc = 0.0;
        for v in mixed {
            acc += v;
        }
        assert!((estimate_alpha(&mixed).unwrap().alpha - (1.0 - acc / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn ce_closed_forms() {
        let gt = FbiMatrix(vec![BoneStatus::Forward, BoneStatus::Parallel, BoneStatus::Backward]);
        let perfect = fbi_ce_loss(&gt.one_hot_rows(), &gt).unwrap();
        assert_eq!(perfect.loss, 0.0);
        let uniform = fbi_ce_loss(&[[1.0 / 3.0; 3]; 3], &gt).unwrap();
        assert!((uniform.loss - 3f64.ln()).abs() < 1e-12);
        assert!((uniform.loss - 1.098612).abs() < 1e-6);
        let zero = fbi_ce_loss(&[[0.0, 1.0, 0.0]; 3], &gt).unwrap();
        assert!(zero.clamped && zero.loss.is_finite());
        assert!(fbi_ce_loss(&[[1.0, 0.0, 0.0]], &gt).is_err());
    }

    #[test]
    fn ce_matches_per_bone_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rows: Vec<[f64; 3]> = (0..14)
                .map(|_| {
                    let r = [rng.random::<f64>() + 0.01, rng.random::<f64>() + 0.01, rng.random::<f64>() + 0.01];
                    let s = r[0] + r[1] + r[2];
                    [r[0] / s, r[1] / s, r[2] / s]
                })
                .collect();
            let gt = FbiMatrix((0..14).map(|_| BoneStatus::ALL[rng.random_range(0..3)]).collect());
            let mut oracle = 0.0;
            for (row, s) in rows.iter().zip(gt.statuses()) {
                oracle += -row[*s as usize].ln();
            }
            oracle /= 14.0;
            let ce = fbi_ce_loss(&rows, &gt).unwrap();
            assert!((ce.loss - oracle).abs() < 1e-12);
            for (g, (row, s)) in ce.logit_grad.iter().zip(rows.iter().zip(gt.statuses())) {
                for k in 0..3 {
                    let y = if k == s.index() { 1.0 } else { 0.0 };
                    assert!((g[k] - (row[k] - y) / 14.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn plain_and_zero_epsilon_batches_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = Array2::from_shape_fn((8, 51), |_| rng.random_range(-2.0..2.0));
        let gt = Array2::from_shape_fn((8, 51), |_| rng.random_range(-2.0..2.0));
        let a = regression_batch_loss(pred.view(), gt.view(), RegressionLoss::PlainL2).unwrap();
        let b = regression_batch_loss(pred.view(), gt.view(), RegressionLoss::Weighted(cfg(0.0, 0.3))).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let gt = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let kind = RegressionLoss::Weighted(cfg(0.05, 0.6));
        let base = regression_batch_loss(pred.view(), gt.view(), kind).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (3, 5)] {
            let mut p = pred.clone();
            p[idx] += h;
            let lp = regression_batch_loss(p.view(), gt.view(), kind).unwrap().loss;
            p[idx] -= 2.0 * h;
            let lm = regression_batch_loss(p.view(), gt.view(), kind).unwrap().loss;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - base.grad[idx]).abs() < 1e-8 * num.abs().max(1e-3));
        }
    }
}
