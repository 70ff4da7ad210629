use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state, one moment buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(model: &MlpModel, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            step: 0,
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching the model or the state.
pub fn opt_step(model: &mut MlpModel, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    let g = grads.slices();
    let shapes_match = g.len() == state.first_moment.len()
        && g.iter().zip(&state.first_moment).all(|(a, b)| a.len() == b.len())
        && model.param_slices().iter().zip(&g).all(|(a, b)| a.len() == b.len())
        && model.param_slices().len() == g.len();
    if !shapes_match {
        return Err(Error::Dimension {
            what: "optimizer parameter tensors",
            expected: state.first_moment.len(),
            got: g.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }

    let AdamConfig {
        learning_rate: lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let params = model.param_slices_mut();
    for (((p, g), m), v) in params
        .into_iter()
        .zip(g)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
