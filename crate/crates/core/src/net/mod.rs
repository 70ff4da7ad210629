//! Dense residual networks with exact reverse-mode gradients.
//!
//! Layout for `num_residual_blocks = B >= 1`:
//!
//! ```text
//! x -> unit_0 -> [ h + unit_{2b+2}(unit_{2b+1}(h)) ] x B -> linear -> activation
//! unit = linear -> batch-norm (optional) -> relu -> dropout
//! ```
//!
//! With `B = 0` the network is a single affine map. Linear layers that feed a
//! batch-norm carry no bias (the norm's shift makes it redundant).

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{Checkpoint, ModelRecord, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, grad_check_against, relative_error, GradCheckReport};
pub use optim::{opt_step, AdamConfig, OptimState};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    /// Softmax over consecutive groups of three outputs.
    GroupSoftmax3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
    pub use_batch_stats_norm: bool,
    pub dropout_rate: f64,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    /// Hidden width 256, two residual blocks, norm on, dropout 0.1.
    pub fn residual(input_dim: usize, output_dim: usize, output_activation: OutputActivation) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_dim: 256,
            num_residual_blocks: 2,
            use_batch_stats_norm: true,
            dropout_rate: 0.1,
            output_activation,
        }
    }

    /// A single affine layer.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_dim: 1,
            num_residual_blocks: 0,
            use_batch_stats_norm: false,
            dropout_rate: 0.0,
            output_activation: OutputActivation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("network dimensions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.output_activation == OutputActivation::GroupSoftmax3 && !self.output_dim.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "group softmax needs output_dim divisible by 3, got {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    fn num_units(&self) -> usize {
        if self.num_residual_blocks == 0 {
            0
        } else {
            1 + 2 * self.num_residual_blocks
        }
    }

    fn uses_norm(&self) -> bool {
        self.use_batch_stats_norm && self.num_residual_blocks > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `input × output`
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which quantity an upstream gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    Output,
    /// Pre-activation logits; skips the output activation's Jacobian.
    Logits,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    spec: MlpSpec,
    linears: Vec<Linear>,
    norms: Vec<BatchNorm>,
    /// Bumped on every parameter or running-statistics change.
    revision: u64,
}

// Parameters and running statistics; the revision counter is bookkeeping.
impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.linears == other.linears && self.norms == other.norms
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

#[derive(Debug, Clone)]
struct UnitCache {
    input: Array2<f64>,
    norm: Option<NormCache>,
    pre_relu: Array2<f64>,
    drop_mask: Option<Array2<f64>>,
}

/// Activations recorded by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    mode: Mode,
    units: Vec<UnitCache>,
    final_input: Array2<f64>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Sign pattern of every ReLU input; changes when a perturbation crosses a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.units
            .iter()
            .flat_map(|u| u.pre_relu.iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Parameter gradients, shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub linears: Vec<LinearGrad>,
    pub norms: Vec<NormGrad>,
}

impl Gradients {
    /// Flat views in the same order as [`MlpModel::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.linears {
            out.push(l.weight.as_slice().expect("standard layout"));
            if let Some(b) = &l.bias {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        for n in &self.norms {
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.linears {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut l.bias {
                out.push(b.as_slice_mut().expect("standard layout"));
            }
        }
        for n in &mut self.norms {
            out.push(n.gamma.as_slice_mut().expect("standard layout"));
            out.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Euclidean norm over every parameter gradient.
    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Row-wise softmax over consecutive groups of three columns.
pub fn group_softmax3(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("standard layout");
        for g in row.chunks_exact_mut(3) {
            let m = g[0].max(g[1]).max(g[2]);
            let e = [(g[0] - m).exp(), (g[1] - m).exp(), (g[2] - m).exp()];
            let s = e[0] + e[1] + e[2];
            g[0] = e[0] / s;
            g[1] = e[1] / s;
            g[2] = e[2] / s;
        }
    }
    out
}

impl MlpModel {
    /// He-normal weights (variance 2/fan_in), zero biases, unit norms.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |fan_in: usize, fan_out: usize, bias: bool| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng));
            Linear {
                weight,
                bias: bias.then(|| Array1::zeros(fan_out)),
            }
        };
        let norm = spec.uses_norm();
        let mut linears = Vec::new();
        let mut norms = Vec::new();
        if spec.num_residual_blocks == 0 {
            linears.push(dense(spec.input_dim, spec.output_dim, true));
        } else {
            linears.push(dense(spec.input_dim, spec.hidden_dim, !norm));
            for _ in 0..2 * spec.num_residual_blocks {
                linears.push(dense(spec.hidden_dim, spec.hidden_dim, !norm));
            }
            linears.push(dense(spec.hidden_dim, spec.output_dim, true));
            if norm {
                norms = (0..spec.num_units()).map(|_| BatchNorm::new(spec.hidden_dim)).collect();
            }
        }
        Ok(Self {
            spec,
            linears,
            norms,
            revision: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn linears(&self) -> &[Linear] {
        &self.linears
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn linears_mut(&mut self) -> &mut [Linear] {
        self.revision += 1;
        &mut self.linears
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNorm] {
        self.revision += 1;
        &mut self.norms
    }

    /// Same parameters with dropout switched off.
    pub fn without_dropout(&self) -> Self {
        let mut m = self.clone();
        m.spec.dropout_rate = 0.0;
        m
    }

    pub fn num_parameters(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.linears {
            out.push(l.weight.as_slice().expect("standard layout"));
            if let Some(b) = &l.bias {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        for n in &self.norms {
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.linears {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut l.bias {
                out.push(b.as_slice_mut().expect("standard layout"));
            }
        }
        for n in &mut self.norms {
            out.push(n.gamma.as_slice_mut().expect("standard layout"));
            out.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self
                .norms
                .iter()
                .all(|n| n.running_mean.iter().chain(&n.running_var).all(|v| v.is_finite()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            linears: self
                .linears
                .iter()
                .map(|l| LinearGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: l.bias.as_ref().map(|b| Array1::zeros(b.len())),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormGrad {
                    gamma: Array1::zeros(n.gamma.len()),
                    beta: Array1::zeros(n.beta.len()),
                })
                .collect(),
        }
    }

    /// Eval-mode forward; a pure function of the model and batch.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.forward(batch, Mode::Eval, &mut unused).map(|(out, _)| out)
    }

    /// Forward pass. In train mode the norm uses batch statistics and dropout
    /// draws masks from `rng`; running statistics are updated separately via
    /// [`MlpModel::update_running_stats`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: ArrayView2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if batch.ncols() != self.spec.input_dim {
            return Err(Error::Dimension {
                what: "network input columns",
                expected: self.spec.input_dim,
                got: batch.ncols(),
            });
        }
        let n = batch.nrows();
        if n == 0 {
            return Err(Error::Dimension {
                what: "network batch rows",
                expected: 1,
                got: 0,
            });
        }
        if mode == Mode::Train && self.spec.uses_norm() && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }

        let mut units = Vec::with_capacity(self.spec.num_units());
        let mut x = batch.to_owned();
        if self.spec.num_residual_blocks > 0 {
            let (h, cache) = self.unit_forward(0, x, mode, rng);
            units.push(cache);
            x = h;
            for b in 0..self.spec.num_residual_blocks {
                let (y1, c1) = self.unit_forward(1 + 2 * b, x.clone(), mode, rng);
                let (y2, c2) = self.unit_forward(2 + 2 * b, y1, mode, rng);
                units.push(c1);
                units.push(c2);
                x += &y2;
            }
        }
        let last = self.linears.last().expect("at least one layer");
        let mut logits = x.dot(&last.weight);
        if let Some(b) = &last.bias {
            logits += b;
        }
        let output = match self.spec.output_activation {
            OutputActivation::Linear => logits,
            OutputActivation::GroupSoftmax3 => group_softmax3(&logits),
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        let cache = ForwardCache {
            revision: self.revision,
            mode,
            units,
            final_input: x,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    fn unit_forward<R: Rng + ?Sized>(
        &self,
        k: usize,
        input: Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> (Array2<f64>, UnitCache) {
        let lin = &self.linears[k];
        let mut h = input.dot(&lin.weight);
        if let Some(b) = &lin.bias {
            h += b;
        }
        let norm = if self.spec.uses_norm() {
            let bn = &self.norms[k];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = h.var_axis(Axis(0), 0.0);
                    (mean, var)
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
            let xhat = (&h - &mean) * &inv_std;
            h = &xhat * &bn.gamma + &bn.beta;
            Some(NormCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            })
        } else {
            None
        };
        let pre_relu = h;
        let mut out = pre_relu.mapv(relu);
        let p = self.spec.dropout_rate;
        let drop_mask = if mode == Mode::Train && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_fn(out.raw_dim(), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            out *= &mask;
            Some(mask)
        } else {
            None
        };
        (
            out,
            UnitCache {
                input,
                norm,
                pre_relu,
                drop_mask,
            },
        )
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache(format!(
                "cache from revision {}, model at {}",
                cache.revision, self.revision
            )));
        }
        self.check_structure(cache)
    }

    fn check_structure(&self, cache: &ForwardCache) -> Result<()> {
        if cache.units.len() != self.spec.num_units()
            || cache.final_input.ncols() != self.linears.last().expect("layer").weight.nrows()
        {
            return Err(Error::StaleCache("layer structure differs".into()));
        }
        Ok(())
    }

    /// Reverse-mode pass: parameter gradients and the gradient w.r.t. the batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
        wrt: GradWrt,
    ) -> Result<(Gradients, Array2<f64>)> {
        self.check_cache(cache)?;
        if upstream.dim() != cache.output.dim() {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: cache.output.len(),
                got: upstream.len(),
            });
        }
        let g_logits = match (self.spec.output_activation, wrt) {
            (OutputActivation::Linear, _) | (_, GradWrt::Logits) => upstream.to_owned(),
            (OutputActivation::GroupSoftmax3, GradWrt::Output) => {
                let mut g = upstream.to_owned();
                Zip::from(g.rows_mut()).and(cache.output.rows()).for_each(|mut grow, prow| {
                    let grow = grow.as_slice_mut().expect("standard layout");
                    let prow = prow.to_slice().expect("standard layout");
                    for (gg, pp) in grow.chunks_exact_mut(3).zip(prow.chunks_exact(3)) {
                        let dot = gg[0] * pp[0] + gg[1] * pp[1] + gg[2] * pp[2];
                        for k in 0..3 {
                            gg[k] = pp[k] * (gg[k] - dot);
                        }
                    }
                });
                g
            }
        };

        let mut grads = self.zero_gradients();
        let last = self.linears.len() - 1;
        grads.linears[last].weight = cache.final_input.t().dot(&g_logits).as_standard_layout().into_owned();
        if let Some(b) = &mut grads.linears[last].bias {
            *b = g_logits.sum_axis(Axis(0));
        }
        let mut gx = g_logits.dot(&self.linears[last].weight.t());

        if self.spec.num_residual_blocks > 0 {
            for b in (0..self.spec.num_residual_blocks).rev() {
                let g_y1 = self.unit_backward(2 + 2 * b, &cache.units[2 + 2 * b], &gx, cache.mode, &mut grads);
                let g_x = self.unit_backward(1 + 2 * b, &cache.units[1 + 2 * b], &g_y1, cache.mode, &mut grads);
                gx += &g_x;
            }
            gx = self.unit_backward(0, &cache.units[0], &gx, cache.mode, &mut grads);
        }
        Ok((grads, gx.as_standard_layout().into_owned()))
    }

    fn unit_backward(
        &self,
        k: usize,
        unit: &UnitCache,
        g_out: &Array2<f64>,
        mode: Mode,
        grads: &mut Gradients,
    ) -> Array2<f64> {
        let mut g = g_out.clone();
        if let Some(mask) = &unit.drop_mask {
            g *= mask;
        }
        Zip::from(&mut g).and(&unit.pre_relu).for_each(|gv, &a| {
            if a <= 0.0 {
                *gv = 0.0;
            }
        });
        if let Some(nc) = &unit.norm {
            let bn = &self.norms[k];
            grads.norms[k].gamma = (&g * &nc.xhat).sum_axis(Axis(0));
            grads.norms[k].beta = g.sum_axis(Axis(0));
            let g_xhat = &g * &bn.gamma;
            g = match mode {
                Mode::Eval => g_xhat * &nc.inv_std,
                Mode::Train => {
                    let n = g.nrows() as f64;
                    let sum_g = g_xhat.sum_axis(Axis(0));
                    let sum_gx = (&g_xhat * &nc.xhat).sum_axis(Axis(0));
                    let centered = g_xhat * n - &sum_g - &(&nc.xhat * &sum_gx);
                    centered * &(&nc.inv_std / n)
                }
            };
        }
        grads.linears[k].weight = unit.input.t().dot(&g).as_standard_layout().into_owned();
        if let Some(b) = &mut grads.linears[k].bias {
            *b = g.sum_axis(Axis(0));
        }
        g.dot(&self.linears[k].weight.t())
    }

    /// Folds a train-mode forward's batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        self.check_structure(cache)?;
        if cache.mode != Mode::Train {
            return Ok(());
        }
        for (bn, unit) in self.norms.iter_mut().zip(&cache.units) {
            if let Some(nc) = &unit.norm {
                bn.running_mean = &bn.running_mean * NORM_MOMENTUM + &nc.batch_mean * (1.0 - NORM_MOMENTUM);
                bn.running_var = &bn.running_var * NORM_MOMENTUM + &nc.batch_var * (1.0 - NORM_MOMENTUM);
            }
        }
        self.revision += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
