//! Conditional adversarial fine-tuning of the coarse-depth head.
//!
//! The discriminator scores `(2D pose, depth)` pairs, concatenated into one
//! input row. Real pairs carry ground-truth depth; fake pairs carry the
//! generator's prediction for the same 2D pose.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorData, GeneratorModel};
use crate::net::{
    opt_step, AdamConfig, Checkpoint, GradWrt, MlpModel, MlpSpec, ModelRecord, Mode, OptimState, OutputActivation,
};
use crate::skeleton::{Pose2D, SkeletonTopology};
use crate::synth::{CameraModel, Sample};
use crate::train::{derive_seed, epoch_batches, gather, mse_loss, stream_rng, train_step};

pub const GENERATOR_FT_TAG: &str = "generator_ft";
pub const DISCRIMINATOR_TAG: &str = "discriminator";
pub const DISCRIMINATOR: &str = "discriminator";

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub lambda_adv: f64,
    pub d_steps_per_g_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub g_learning_rate: f64,
    pub d_learning_rate: f64,
    pub seed: u64,
    pub discriminator: MlpSpec,
}

impl AdvConfig {
    pub fn for_topology(topo: &SkeletonTopology) -> Self {
        Self {
            lambda_adv: 0.01,
            d_steps_per_g_step: 1,
            epochs: 5,
            batch_size: 64,
            g_learning_rate: 1e-4,
            d_learning_rate: 1e-3,
            seed: 0,
            discriminator: discriminator_spec(topo),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!("lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        if self.d_steps_per_g_step == 0 || self.batch_size == 0 {
            return Err(Error::Config("d_steps_per_g_step and batch_size must be at least 1".into()));
        }
        for lr in [self.g_learning_rate, self.d_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        if self.discriminator.output_dim != 1 || self.discriminator.output_activation != OutputActivation::Linear {
            return Err(Error::Config("discriminator must emit one linear logit".into()));
        }
        self.discriminator.validate()
    }
}

/// One residual block of width 128, no normalization, no dropout.
pub fn discriminator_spec(topo: &SkeletonTopology) -> MlpSpec {
    MlpSpec {
        input_dim: 3 * topo.num_joints(),
        output_dim: 1,
        hidden_dim: 128,
        num_residual_blocks: 1,
        use_batch_stats_norm: false,
        dropout_rate: 0.0,
        output_activation: OutputActivation::Linear,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: MlpModel,
}

impl Discriminator {
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            net: MlpModel::init(spec, seed)?,
        })
    }

    pub fn logits(&self, pairs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.predict(pairs)?.column(0).to_vec())
    }
}

/// Concatenates standardized 2D rows with standardized depth rows.
pub fn pair_matrix(x2d: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    concatenate(Axis(1), &[x2d, z]).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct DLoss {
    pub loss: f64,
    /// Fraction of real logits > 0 and fake logits < 0.
    pub accuracy: f64,
    pub grads: crate::net::Gradients,
}

/// `mean[−ln σ(real) − ln(1 − σ(fake))]` over pairs, with parameter gradients.
pub fn d_loss(d: &Discriminator, real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<DLoss> {
    if real.nrows() != fake.nrows() || real.nrows() == 0 {
        return Err(Error::Dimension {
            what: "real/fake pair counts",
            expected: real.nrows(),
            got: fake.nrows(),
        });
    }
    let n = real.nrows();
    let both = concatenate(Axis(0), &[real, fake]).map_err(|e| Error::Format(e.to_string()))?;
    let mut rng = stream_rng(0, 0);
    let (out, cache) = d.net.forward(both.view(), Mode::Train, &mut rng)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut upstream = Array2::zeros(out.raw_dim());
    for i in 0..n {
        let (r, f) = (out[[i, 0]], out[[n + i, 0]]);
        loss += softplus(-r) + softplus(f);
        correct += usize::from(r > 0.0) + usize::from(f < 0.0);
        upstream[[i, 0]] = (sigmoid(r) - 1.0) / n as f64;
        upstream[[n + i, 0]] = sigmoid(f) / n as f64;
    }
    let (grads, _) = d.net.backward(&cache, upstream.view(), GradWrt::Output)?;
    Ok(DLoss {
        loss: loss / n as f64,
        accuracy: correct as f64 / (2 * n) as f64,
        grads,
    })
}

/// Non-saturating generator loss `mean[−ln σ(fake)]` and its gradient with
/// respect to the fake pairs, through the frozen discriminator.
pub fn g_adv_loss(d: &Discriminator, fake: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = fake.nrows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream_rng(0, 0);
    let (out, cache) = d.net.forward(fake, Mode::Eval, &mut rng)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    let loss = out.column(0).iter().map(|&f| softplus(-f)).sum::<f64>() / n as f64;
    let upstream = out.mapv(|f| (sigmoid(f) - 1.0) / n as f64);
    let (_, input_grad) = d.net.backward(&cache, upstream.view(), GradWrt::Output)?;
    Ok((loss, input_grad))
}

/// Mean absolute deviation (mm) of lifted bone lengths from `reference_lengths`
/// (indexed by child joint). Depths are root-relative mm; the root sits at
/// the camera's subject distance.
pub fn bone_plausibility(
    pose2d: &Pose2D,
    z_mm: &[f64],
    cam: &CameraModel,
    topo: &SkeletonTopology,
    reference_lengths: &[f64],
) -> Result<f64> {
    let j = topo.num_joints();
    for (what, len) in [("2D joints", pose2d.num_joints()), ("depths", z_mm.len()), ("reference lengths", reference_lengths.len())] {
        if len != j {
            return Err(Error::Dimension {
                what,
                expected: j,
                got: len,
            });
        }
    }
    let lifted = pose2d
        .joints
        .iter()
        .zip(z_mm)
        .enumerate()
        .map(|(k, (uv, z))| {
            let depth = z + cam.subject_distance;
            if !(depth > 0.0) {
                return Err(Error::BehindCamera { joint: k, depth });
            }
            Ok(cam.lift(*uv, depth))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut bones = 0usize;
    for (child, parent) in topo.parents().iter().enumerate() {
        if let Some(p) = parent {
            let (a, b) = (lifted[*p], lifted[child]);
            let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            total += (len - reference_lengths[child]).abs();
            bones += 1;
        }
    }
    Ok(total / bones.max(1) as f64)
}

/// Mean bone deviation of the generator's coarse poses over `samples`.
pub fn mean_bone_plausibility(
    generator: &GeneratorModel,
    samples: &[Sample],
    cam: &CameraModel,
    topo: &SkeletonTopology,
    reference_lengths: &[f64],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = generator.input_matrix(samples.iter().map(|s| &s.pose2d_noisy))?;
    let z = generator.predict_coarse_batch(x.view())?;
    let mut total = 0.0;
    for (s, row) in samples.iter().zip(z.rows()) {
        let z_mm = generator.stats.depth.destandardize(row.as_slice().unwrap_or_default());
        total += bone_plausibility(&s.pose2d_noisy, &z_mm, cam, topo, reference_lengths)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub d_acc: f64,
    pub g_sup: f64,
    pub g_adv: f64,
    /// Mean bone deviation (mm) on the evaluation set after this epoch.
    pub bone_dev: f64,
}

/// Where the bone metric is measured and against which lengths.
#[derive(Debug, Clone, Copy)]
pub struct PlausibilityProbe<'a> {
    pub samples: &'a [Sample],
    pub cam: &'a CameraModel,
    pub topo: &'a SkeletonTopology,
    pub reference_lengths: &'a [f64],
}

impl PlausibilityProbe<'_> {
    pub fn measure(&self, generator: &GeneratorModel) -> Result<f64> {
        mean_bone_plausibility(generator, self.samples, self.cam, self.topo, self.reference_lengths)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub generator: GeneratorModel,
    pub discriminator: Option<Discriminator>,
    pub metrics: Vec<FinetuneEpoch>,
    /// Set when a non-finite loss stopped training; the models are then the
    /// last ones completing an epoch cleanly.
    pub aborted: Option<String>,
}

// Stream ids.
const ORDER: u64 = 20;
const G_DROPOUT: u64 = 21;
const D_INIT: u64 = 22;

/// Alternating discriminator / generator updates on the coarse head.
pub fn finetune(
    generator: GeneratorModel,
    train: &[Sample],
    probe: &PlausibilityProbe,
    cfg: &AdvConfig,
) -> Result<FinetuneRun> {
    run(generator, train, probe, cfg, true)
}

/// The same generator updates with the adversarial term and discriminator
/// removed.
pub fn finetune_supervised(
    generator: GeneratorModel,
    train: &[Sample],
    probe: &PlausibilityProbe,
    cfg: &AdvConfig,
) -> Result<FinetuneRun> {
    run(generator, train, probe, cfg, false)
}

fn run(
    mut generator: GeneratorModel,
    train: &[Sample],
    probe: &PlausibilityProbe,
    cfg: &AdvConfig,
    adversarial: bool,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = GeneratorData::new(train, &generator.stats)?;
    let n2d = data.x.ncols();
    let mut disc = if adversarial {
        let d = Discriminator::init(cfg.discriminator.clone(), derive_seed(cfg.seed, D_INIT))?;
        if d.net.spec().input_dim != n2d + data.z.ncols() {
            return Err(Error::Config(format!(
                "discriminator input_dim must be {}",
                n2d + data.z.ncols()
            )));
        }
        Some(d)
    } else {
        None
    };
    let mut g_opt = OptimState::new(
        &generator.coarse_head,
        AdamConfig {
            learning_rate: cfg.g_learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut d_opt = disc.as_ref().map(|d| {
        OptimState::new(
            &d.net,
            AdamConfig {
                learning_rate: cfg.d_learning_rate,
                ..AdamConfig::default()
            },
        )
    });
    let mut order = stream_rng(cfg.seed, ORDER);
    let mut g_drop = stream_rng(cfg.seed, G_DROPOUT);
    let use_adv = adversarial && cfg.lambda_adv > 0.0;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let snapshot = (generator.clone(), disc.clone());
        let outcome = (|| -> Result<FinetuneEpoch> {
            let batches = epoch_batches(data.len(), cfg.batch_size, &mut order);
            let (mut d_sum, mut acc_sum, mut d_count) = (0.0, 0.0, 0usize);
            let (mut sup_sum, mut adv_sum) = (0.0, 0.0);
            for idx in &batches {
                let x = gather(&data.x, idx);
                let z = gather(&data.z, idx);
                if let (Some(d), Some(opt)) = (disc.as_mut(), d_opt.as_mut()) {
                    let real = pair_matrix(x.view(), z.view())?;
                    for _ in 0..cfg.d_steps_per_g_step {
                        let fake_z = generator.coarse_head.predict(x.view())?;
                        let fake = pair_matrix(x.view(), fake_z.view())?;
                        let dl = d_loss(d, real.view(), fake.view())?;
                        if !dl.loss.is_finite() {
                            return Err(Error::Diverged(format!("discriminator loss {}", dl.loss)));
                        }
                        opt_step(&mut d.net, &dl.grads, opt)?;
                        d_sum += dl.loss;
                        acc_sum += dl.accuracy;
                        d_count += 1;
                    }
                }
                let mut parts = (0.0, 0.0);
                let d_ref = disc.as_ref();
                train_step(
                    &mut generator.coarse_head,
                    &mut g_opt,
                    x.view(),
                    &mut g_drop,
                    GradWrt::Output,
                    |out| {
                        let (sup, mut grad) = mse_loss(out, z.view())?;
                        parts.0 = sup;
                        if !use_adv {
                            return Ok((sup, grad));
                        }
                        let d = d_ref.ok_or_else(|| Error::Config("missing discriminator".into()))?;
                        let fake = pair_matrix(x.view(), out.view())?;
                        let (adv, in_grad) = g_adv_loss(d, fake.view())?;
                        parts.1 = adv;
                        grad.scaled_add(cfg.lambda_adv, &in_grad.slice(s![.., n2d..]));
                        Ok((sup + cfg.lambda_adv * adv, grad))
                    },
                )?;
                sup_sum += parts.0;
                adv_sum += parts.1;
            }
            let nb = batches.len() as f64;
            let (d_loss_mean, d_acc) = if d_count > 0 {
                (d_sum / d_count as f64, acc_sum / d_count as f64)
            } else {
                (f64::NAN, f64::NAN)
            };
            Ok(FinetuneEpoch {
                epoch,
                d_loss: d_loss_mean,
                d_acc,
                g_sup: sup_sum / nb,
                g_adv: if use_adv { adv_sum / nb } else { f64::NAN },
                bone_dev: probe.measure(&generator)?,
            })
        })();
        match outcome {
            Ok(m) => metrics.push(m),
            Err(Error::Diverged(msg)) | Err(Error::NonFinite(msg)) => {
                (generator, disc) = snapshot;
                return Ok(FinetuneRun {
                    generator,
                    discriminator: disc,
                    metrics,
                    aborted: Some(format!("epoch {epoch}: {msg}")),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(FinetuneRun {
        generator,
        discriminator: disc,
        metrics,
        aborted: None,
    })
}

/// Trains only the discriminator against a fixed generator; returns the
/// per-epoch (loss, accuracy) on the training pairs.
pub fn train_discriminator(
    generator: &GeneratorModel,
    train: &[Sample],
    cfg: &AdvConfig,
) -> Result<(Discriminator, Vec<(f64, f64)>)> {
    cfg.validate()?;
    let data = GeneratorData::new(train, &generator.stats)?;
    let mut d = Discriminator::init(cfg.discriminator.clone(), derive_seed(cfg.seed, D_INIT))?;
    let mut opt = OptimState::new(
        &d.net,
        AdamConfig {
            learning_rate: cfg.d_learning_rate,
            ..AdamConfig::default()
        },
    );
    let fake_all = generator.predict_coarse_batch(data.x.view())?;
    let mut order = stream_rng(cfg.seed, ORDER);
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut order) {
            let x = gather(&data.x, &idx);
            let real = pair_matrix(x.view(), gather(&data.z, &idx).view())?;
            let fake = pair_matrix(x.view(), gather(&fake_all, &idx).view())?;
            let dl = d_loss(&d, real.view(), fake.view())?;
            opt_step(&mut d.net, &dl.grads, &mut opt)?;
        }
        let real = pair_matrix(data.x.view(), data.z.view())?;
        let fake = pair_matrix(data.x.view(), fake_all.view())?;
        let dl = d_loss(&d, real.view(), fake.view())?;
        log.push((dl.loss, dl.accuracy));
    }
    Ok((d, log))
}

pub fn discriminator_checkpoint(d: &Discriminator, config_hash: &str) -> Result<Checkpoint> {
    Checkpoint::new(
        DISCRIMINATOR_TAG,
        config_hash,
        vec![ModelRecord::new(DISCRIMINATOR, &d.net, None)],
        serde_json::Value::Null,
    )
}
