//! Training-loop plumbing shared by the generator, discriminator and refiner.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{opt_step, GradWrt, MlpModel, Mode, OptimState};

pub use crate::synth::stream_rng;

/// Rows per eval-mode forward.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Rescales each step's gradient to at most this global norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Independent 64-bit seed for sub-component `k` of a run.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    stream_rng(seed, k).random()
}

/// Shuffled mini-batches covering `0..n`. A trailing batch of one row is
/// folded into its predecessor so batch statistics stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches
}

/// Stacks equal-length rows into a matrix.
pub fn stack_rows(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(Error::Dimension {
                what: "matrix row",
                expected: width,
                got: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::Format(e.to_string()))
}

pub fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Eval-mode forward over an arbitrarily long matrix.
pub fn predict_chunked(model: &MlpModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.nrows() <= EVAL_CHUNK {
        return model.predict(x);
    }
    let parts = (0..x.nrows())
        .step_by(EVAL_CHUNK)
        .map(|start| model.predict(x.slice(s![start..(start + EVAL_CHUNK).min(x.nrows()), ..])))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))
}

/// One optimizer step: train-mode forward, loss, backward, running
/// statistics, update. `loss_fn` maps the network output to the loss and
/// its gradient (w.r.t. `wrt`). Returns the loss.
pub fn train_step<F>(
    model: &mut MlpModel,
    opt: &mut OptimState,
    x: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
    wrt: GradWrt,
    loss_fn: F,
) -> Result<f64>
where
    F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
{
    train_step_clipped(model, opt, x, rng, wrt, None, loss_fn)
}

/// [`train_step`] with optional global-norm gradient clipping.
pub fn train_step_clipped<F>(
    model: &mut MlpModel,
    opt: &mut OptimState,
    x: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
    wrt: GradWrt,
    max_grad_norm: Option<f64>,
    loss_fn: F,
) -> Result<f64>
where
    F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
{
    let (out, cache) = model.forward(x, Mode::Train, rng)?;
    let (loss, upstream) = loss_fn(&out)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss} at optimizer step {}", opt.step + 1)));
    }
    let (mut grads, _) = model.backward(&cache, upstream.view(), wrt)?;
    if let Some(limit) = max_grad_norm {
        let norm = grads.global_norm();
        if norm > limit {
            grads.scale(limit / norm);
        }
    }
    model.update_running_stats(&cache)?;
    opt_step(model, &grads, opt).map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} at optimizer step {}", opt.step + 1)),
        other => other,
    })?;
    Ok(loss)
}

/// Per-row mean squared error and its gradient, averaged over the batch.
pub fn mse_loss(pred: &Array2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let b = crate::loss::regression_batch_loss(pred.view(), target, crate::loss::RegressionLoss::PlainL2)?;
    Ok((b.loss, b.grad))
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}
