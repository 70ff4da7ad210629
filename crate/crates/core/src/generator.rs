//! Two-branch generator: 2D joints to per-joint depth (the coarse pose) and
//! to per-bone FBI class probabilities. The branches share no parameters.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbi::{argmax3, FbiMatrix};
use crate::loss::fbi_ce_batch;
use crate::net::{AdamConfig, Checkpoint, GradWrt, MlpModel, MlpSpec, ModelRecord, OptimState, OutputActivation};
use crate::skeleton::{Pose2D, SkeletonTopology};
use crate::standardize::PoseStats;
use crate::synth::Sample;
use crate::train::{
    derive_seed, epoch_batches, gather, mse_loss, predict_chunked, stack_rows, stream_rng, train_step, TrainConfig,
};

pub const GENERATOR_TAG: &str = "generator";
pub const COARSE_HEAD: &str = "coarse_head";
pub const FBI_HEAD: &str = "fbi_head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpecs {
    pub coarse: MlpSpec,
    pub fbi: MlpSpec,
}

impl GeneratorSpecs {
    /// Default residual heads sized for `topo`.
    pub fn for_topology(topo: &SkeletonTopology) -> Self {
        let j = topo.num_joints();
        Self {
            coarse: MlpSpec::residual(2 * j, j, OutputActivation::Linear),
            fbi: MlpSpec::residual(2 * j, 3 * topo.num_fbi_bones(), OutputActivation::GroupSoftmax3),
        }
    }

    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        let j = topo.num_joints();
        let m = topo.num_fbi_bones();
        self.coarse.validate()?;
        self.fbi.validate()?;
        let ok = self.coarse.input_dim == 2 * j
            && self.coarse.output_dim == j
            && self.coarse.output_activation == OutputActivation::Linear
            && self.fbi.input_dim == 2 * j
            && self.fbi.output_dim == 3 * m
            && self.fbi.output_activation == OutputActivation::GroupSoftmax3;
        if !ok {
            return Err(Error::Config(format!(
                "generator heads must map {} inputs to {j} depths (linear) and {} FBI logits (softmax)",
                2 * j,
                3 * m
            )));
        }
        Ok(())
    }
}

/// 2D joints paired with per-joint root-relative depth in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePose {
    pub pose2d: Pose2D,
    pub z: Vec<f64>,
}

impl CoarsePose {
    pub fn z_mm(&self, stats: &PoseStats) -> Vec<f64> {
        stats.depth.destandardize(&self.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub coarse_head: MlpModel,
    pub fbi_head: MlpModel,
    pub stats: PoseStats,
}

impl GeneratorModel {
    pub fn init(specs: &GeneratorSpecs, stats: PoseStats, seed: u64) -> Result<Self> {
        Ok(Self {
            coarse_head: MlpModel::init(specs.coarse.clone(), derive_seed(seed, 1))?,
            fbi_head: MlpModel::init(specs.fbi.clone(), derive_seed(seed, 2))?,
            stats,
        })
    }

    pub fn specs(&self) -> GeneratorSpecs {
        GeneratorSpecs {
            coarse: self.coarse_head.spec().clone(),
            fbi: self.fbi_head.spec().clone(),
        }
    }

    /// Standardized network input for one 2D pose.
    pub fn input_row(&self, pose2d: &Pose2D) -> Result<Vec<f64>> {
        let flat = pose2d.to_flat();
        if flat.len() != self.stats.pose2d.dim() {
            return Err(Error::Dimension {
                what: "2D pose coordinates",
                expected: self.stats.pose2d.dim(),
                got: flat.len(),
            });
        }
        Ok(self.stats.pose2d.standardize(&flat))
    }

    pub fn input_matrix<'a>(&self, poses: impl IntoIterator<Item = &'a Pose2D>) -> Result<Array2<f64>> {
        let rows = poses
            .into_iter()
            .map(|p| self.input_row(p))
            .collect::<Result<Vec<_>>>()?;
        stack_rows(&rows, self.stats.pose2d.dim())
    }

    pub fn predict_coarse(&self, pose2d: &Pose2D) -> Result<CoarsePose> {
        let x = Array2::from_shape_vec((1, self.stats.pose2d.dim()), self.input_row(pose2d)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let z = self.coarse_head.predict(x.view())?.into_raw_vec_and_offset().0;
        Ok(CoarsePose {
            pose2d: pose2d.clone(),
            z,
        })
    }

    pub fn predict_fbi(&self, pose2d: &Pose2D) -> Result<Vec<[f64; 3]>> {
        let x = Array2::from_shape_vec((1, self.stats.pose2d.dim()), self.input_row(pose2d)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let p = self.fbi_head.predict(x.view())?;
        Ok(p.as_slice()
            .unwrap_or_default()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    /// Standardized depths for a standardized input matrix.
    pub fn predict_coarse_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_chunked(&self.coarse_head, x)
    }

    /// `n × 3m` class probabilities for a standardized input matrix.
    pub fn predict_fbi_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_chunked(&self.fbi_head, x)
    }

    pub fn to_checkpoint(
        &self,
        tag: &str,
        config_hash: &str,
        coarse_opt: Option<&OptimState>,
        fbi_opt: Option<&OptimState>,
    ) -> Result<Checkpoint> {
        Checkpoint::new(
            tag,
            config_hash,
            vec![
                ModelRecord::new(COARSE_HEAD, &self.coarse_head, coarse_opt),
                ModelRecord::new(FBI_HEAD, &self.fbi_head, fbi_opt),
            ],
            serde_json::json!({ "stats": self.stats }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, specs: &GeneratorSpecs) -> Result<Self> {
        let stats = serde_json::from_value(ckpt.extra.get("stats").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("normalization statistics: {e}")))?;
        Ok(Self {
            coarse_head: ckpt.model(COARSE_HEAD, &specs.coarse)?,
            fbi_head: ckpt.model(FBI_HEAD, &specs.fbi)?,
            stats,
        })
    }
}

/// Network-ready tensors for a sample set.
#[derive(Debug, Clone)]
pub struct GeneratorData {
    /// Standardized noisy 2D input.
    pub x: Array2<f64>,
    /// Standardized ground-truth depth.
    pub z: Array2<f64>,
    pub fbi: Vec<FbiMatrix>,
}

impl GeneratorData {
    pub fn new(samples: &[Sample], stats: &PoseStats) -> Result<Self> {
        let x: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| stats.pose2d.standardize(&s.pose2d_noisy.to_flat()))
            .collect();
        let z: Vec<Vec<f64>> = samples.iter().map(|s| stats.depth.standardize(&s.coarse_z_gt)).collect();
        Ok(Self {
            x: stack_rows(&x, stats.pose2d.dim())?,
            z: stack_rows(&z, stats.depth.dim())?,
            fbi: samples.iter().map(|s| s.fbi_gt.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub coarse: bool,
    pub fbi: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads { coarse: true, fbi: true };
    pub const COARSE: Heads = Heads { coarse: true, fbi: false };
    pub const FBI: Heads = Heads { coarse: false, fbi: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    /// Mean mini-batch L0 of the coarse head.
    pub coarse_loss: f64,
    /// Mean mini-batch cross-entropy of the FBI head.
    pub fbi_loss: f64,
    /// Held-out FBI accuracy.
    pub fbi_accuracy: f64,
    /// Held-out mean absolute depth error, mm.
    pub z_mae_mm: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratorRun {
    pub model: GeneratorModel,
    pub metrics: Vec<GeneratorEpoch>,
    pub coarse_opt: OptimState,
    pub fbi_opt: OptimState,
}

// Stream ids; each head owns its shuffling and dropout streams.
const COARSE_ORDER: u64 = 10;
const COARSE_DROPOUT: u64 = 11;
const FBI_ORDER: u64 = 12;
const FBI_DROPOUT: u64 = 13;

/// Initializes a generator and trains both heads.
pub fn train_generator(
    train: &[Sample],
    test: &[Sample],
    stats: &PoseStats,
    specs: &GeneratorSpecs,
    cfg: &TrainConfig,
) -> Result<GeneratorRun> {
    let model = GeneratorModel::init(specs, stats.clone(), cfg.seed)?;
    train_generator_heads(model, train, test, cfg, Heads::BOTH)
}

/// Trains the selected heads; unselected heads are left bitwise unchanged.
pub fn train_generator_heads(
    mut model: GeneratorModel,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    heads: Heads,
) -> Result<GeneratorRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = GeneratorData::new(train, &model.stats)?;
    let held_out = GeneratorData::new(test, &model.stats)?;
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut coarse_opt = OptimState::new(&model.coarse_head, adam);
    let mut fbi_opt = OptimState::new(&model.fbi_head, adam);
    let mut coarse_order = stream_rng(cfg.seed, COARSE_ORDER);
    let mut coarse_drop = stream_rng(cfg.seed, COARSE_DROPOUT);
    let mut fbi_order = stream_rng(cfg.seed, FBI_ORDER);
    let mut fbi_drop = stream_rng(cfg.seed, FBI_DROPOUT);

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut coarse_loss = f64::NAN;
        if heads.coarse {
            let mut total = 0.0;
            let batches = epoch_batches(data.len(), cfg.batch_size, &mut coarse_order);
            for idx in &batches {
                let x = gather(&data.x, idx);
                let z = gather(&data.z, idx);
                total += train_step(
                    &mut model.coarse_head,
                    &mut coarse_opt,
                    x.view(),
                    &mut coarse_drop,
                    GradWrt::Output,
                    |out| mse_loss(out, z.view()),
                )?;
            }
            coarse_loss = total / batches.len() as f64;
        }
        let mut fbi_loss = f64::NAN;
        if heads.fbi {
            let mut total = 0.0;
            let batches = epoch_batches(data.len(), cfg.batch_size, &mut fbi_order);
            for idx in &batches {
                let x = gather(&data.x, idx);
                let labels: Vec<&FbiMatrix> = idx.iter().map(|&i| &data.fbi[i]).collect();
                total += train_step(
                    &mut model.fbi_head,
                    &mut fbi_opt,
                    x.view(),
                    &mut fbi_drop,
                    GradWrt::Logits,
                    |out| fbi_ce_batch(out.view(), &labels),
                )?;
            }
            fbi_loss = total / batches.len() as f64;
        }
        let (fbi_accuracy, z_mae_mm) = evaluate_generator(&model, &held_out)?;
        metrics.push(GeneratorEpoch {
            epoch,
            coarse_loss,
            fbi_loss,
            fbi_accuracy,
            z_mae_mm,
        });
    }
    Ok(GeneratorRun {
        model,
        metrics,
        coarse_opt,
        fbi_opt,
    })
}

/// Held-out FBI accuracy and mean absolute depth error in mm; NaN when
/// `data` is empty.
pub fn evaluate_generator(model: &GeneratorModel, data: &GeneratorData) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let probs = model.predict_fbi_batch(data.x.view())?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, gt) in probs.rows().into_iter().zip(&data.fbi) {
        for (k, status) in gt.statuses().iter().enumerate() {
            let p = [row[3 * k], row[3 * k + 1], row[3 * k + 2]];
            correct += usize::from(argmax3(&p) == status.index());
            total += 1;
        }
    }
    let z = model.predict_coarse_batch(data.x.view())?;
    let std = &model.stats.depth.std;
    let mut abs_err = 0.0;
    for (pred, gt) in z.rows().into_iter().zip(data.z.rows()) {
        for ((p, g), s) in pred.iter().zip(gt.iter()).zip(std) {
            abs_err += (p - g).abs() * s;
        }
    }
    Ok((correct as f64 / total.max(1) as f64, abs_err / z.len() as f64))
}
