use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Gradients, GradWrt, MlpModel, Mode};
use crate::error::Result;

/// Entries checked per parameter tensor; larger tensors are strided.
const MAX_ENTRIES_PER_TENSOR: usize = 48;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param_entries_checked: usize,
    pub input_entries_checked: usize,
    /// Entries whose ±step perturbation flipped a ReLU; finite differences
    /// are not valid across a kink.
    pub skipped_at_kinks: usize,
}

/// `max |a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradients of a train-mode forward (dropout off,
/// batch statistics on) against central finite differences.
pub fn grad_check<F>(model: &MlpModel, batch: ArrayView2<f64>, loss_fn: F, fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    let model = model.without_dropout();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, cache) = model.forward(batch, Mode::Train, &mut rng)?;
    let (_, upstream) = loss_fn(&out);
    let (grads, input_grad) = model.backward(&cache, upstream.view(), GradWrt::Output)?;
    grad_check_against(&model, batch, &loss_fn, fd_step, &grads, &input_grad)
}

/// Finite-difference check of externally supplied gradients.
pub fn grad_check_against<F>(
    model: &MlpModel,
    batch: ArrayView2<f64>,
    loss_fn: &F,
    fd_step: f64,
    grads: &Gradients,
    input_grad: &Array2<f64>,
) -> Result<GradCheckReport>
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    let model = model.without_dropout();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, base_cache) = model.forward(batch, Mode::Train, &mut rng)?;
    let base_pattern = base_cache.relu_pattern();

    // Loss at a perturbed point, or None when a ReLU changed sides.
    let eval = |m: &MlpModel, x: ArrayView2<f64>| -> Result<Option<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, cache) = m.forward(x, Mode::Train, &mut rng)?;
        if cache.relu_pattern() != base_pattern {
            return Ok(None);
        }
        Ok(Some(loss_fn(&out).0))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        param_entries_checked: 0,
        input_entries_checked: 0,
        skipped_at_kinks: 0,
    };

    let analytic = grads.slices();
    let mut probe = model.clone();
    for (t, a) in analytic.iter().enumerate() {
        for i in strided_indices(a.len()) {
            let orig = probe.param_slices()[t][i];
            probe.param_slices_mut()[t][i] = orig + fd_step;
            let plus = eval(&probe, batch)?;
            probe.param_slices_mut()[t][i] = orig - fd_step;
            let minus = eval(&probe, batch)?;
            probe.param_slices_mut()[t][i] = orig;
            match (plus, minus) {
                (Some(p), Some(m)) => {
                    let numeric = (p - m) / (2.0 * fd_step);
                    report.max_rel_error = report.max_rel_error.max(relative_error(a[i], numeric));
                    report.param_entries_checked += 1;
                }
                _ => report.skipped_at_kinks += 1,
            }
        }
    }

    let mut x = batch.as_standard_layout().into_owned();
    let flat_grad = input_grad.as_slice().expect("standard layout");
    for i in strided_indices(x.len()) {
        let slot = x.as_slice_mut().expect("standard layout");
        let orig = slot[i];
        slot[i] = orig + fd_step;
        let plus = eval(&model, x.view())?;
        x.as_slice_mut().expect("standard layout")[i] = orig - fd_step;
        let minus = eval(&model, x.view())?;
        x.as_slice_mut().expect("standard layout")[i] = orig;
        match (plus, minus) {
            (Some(p), Some(m)) => {
                let numeric = (p - m) / (2.0 * fd_step);
                report.max_rel_error = report.max_rel_error.max(relative_error(flat_grad[i], numeric));
                report.input_entries_checked += 1;
            }
            _ => report.skipped_at_kinks += 1,
        }
    }
    Ok(report)
}

fn strided_indices(len: usize) -> Vec<usize> {
    if len <= MAX_ENTRIES_PER_TENSOR {
        return (0..len).collect();
    }
    // Odd stride so large matrices are sampled across both rows and columns.
    let stride = (len / MAX_ENTRIES_PER_TENSOR) | 1;
    (0..MAX_ENTRIES_PER_TENSOR).map(|k| (k * stride) % len).collect()
}
