//! Final 3D regression from 2D joints, optionally with coarse depth and FBI
//! channels, trained under the hard-sample weighted loss.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbi::{argmax3, BoneStatus, FbiMatrix};
use crate::generator::{CoarsePose, GeneratorModel};
use crate::loss::{estimate_alpha, l0_rows, regression_batch_loss, RegressionLoss, WeightedLossConfig};
use crate::net::{AdamConfig, Checkpoint, GradWrt, MlpModel, MlpSpec, ModelRecord, OptimState, OutputActivation};
use crate::skeleton::{mpjpe_aligned, root_relative, Pose2D, Pose3D, SkeletonTopology};
use crate::standardize::PoseStats;
use crate::synth::{Sample, NUM_ACTIONS};
use crate::train::{
    derive_seed, epoch_batches, gather, percentile, predict_chunked, stack_rows, stream_rng, train_step_clipped, TrainConfig,
};

pub const REFINER_TAG: &str = "refiner";
pub const REFINER: &str = "refiner";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerMode {
    /// 2D joints only.
    Base,
    /// 2D joints, coarse depth and one-hot FBI.
    Final,
}

impl RefinerMode {
    pub fn input_dim(self, topo: &SkeletonTopology) -> usize {
        let j = topo.num_joints();
        match self {
            RefinerMode::Base => 2 * j,
            RefinerMode::Final => 3 * j + 3 * topo.num_fbi_bones(),
        }
    }

    pub fn default_spec(self, topo: &SkeletonTopology) -> MlpSpec {
        MlpSpec::residual(self.input_dim(topo), 3 * topo.num_joints(), OutputActivation::Linear)
    }
}

impl std::str::FromStr for RefinerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(RefinerMode::Base),
            "final" => Ok(RefinerMode::Final),
            other => Err(Error::Config(format!("mode must be 'base' or 'final', got '{other}'"))),
        }
    }
}

/// Where the coarse-depth and FBI input channels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// The dataset's corrupted channels.
    Corrupted,
    /// Live predictions of a generator; FBI as argmax one-hot.
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// α = 1 − mean training L0 under the current model, at every epoch start.
    PerEpoch,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossPolicy {
    PlainL2,
    Weighted { epsilon: f64, alpha_policy: AlphaPolicy },
}

impl Default for LossPolicy {
    fn default() -> Self {
        LossPolicy::Weighted {
            epsilon: WeightedLossConfig::DEFAULT_EPSILON,
            alpha_policy: AlphaPolicy::PerEpoch,
        }
    }
}

impl LossPolicy {
    pub fn validate(&self) -> Result<()> {
        if let LossPolicy::Weighted { epsilon, alpha_policy } = *self {
            let alpha = match alpha_policy {
                AlphaPolicy::Fixed(a) => a,
                AlphaPolicy::PerEpoch => 0.5,
            };
            WeightedLossConfig { epsilon, alpha }.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerModel {
    pub net: MlpModel,
    pub mode: RefinerMode,
    pub stats: PoseStats,
    pub root: usize,
}

impl RefinerModel {
    pub fn init(mode: RefinerMode, spec: MlpSpec, stats: PoseStats, topo: &SkeletonTopology, seed: u64) -> Result<Self> {
        if spec.input_dim != mode.input_dim(topo) || spec.output_dim != 3 * topo.num_joints() {
            return Err(Error::ModeMismatch(format!(
                "{mode:?} refiner needs {} inputs and {} outputs, spec has {} and {}",
                mode.input_dim(topo),
                3 * topo.num_joints(),
                spec.input_dim,
                spec.output_dim
            )));
        }
        let mut net = MlpModel::init(spec, derive_seed(seed, 30))?;
        // Start from the mean pose: a random output layer puts L0 far above
        // 1, where the exponential weighting swamps the optimizer.
        if let Some(last) = net.linears_mut().last_mut() {
            last.weight.fill(0.0);
        }
        Ok(Self {
            net,
            mode,
            stats,
            root: topo.root(),
        })
    }

    /// Eval-mode prediction for one pose. `coarse` and `fbi` must be present
    /// exactly when the mode is final; `coarse.z` is in standardized units.
    pub fn refine(&self, pose2d: &Pose2D, coarse: Option<&CoarsePose>, fbi: Option<&FbiMatrix>) -> Result<Pose3D> {
        let mut row = self.stats.pose2d.standardize(&pose2d.to_flat());
        if row.len() != self.stats.pose2d.dim() {
            return Err(Error::Dimension {
                what: "2D pose coordinates",
                expected: self.stats.pose2d.dim(),
                got: row.len(),
            });
        }
        match (self.mode, coarse, fbi) {
            (RefinerMode::Base, None, None) => {}
            (RefinerMode::Final, Some(c), Some(f)) => {
                row.extend_from_slice(&c.z);
                row.extend(f.to_one_hot_flat());
            }
            (mode, c, f) => {
                return Err(Error::ModeMismatch(format!(
                    "{mode:?} mode given coarse depth: {}, FBI: {}",
                    c.is_some(),
                    f.is_some()
                )))
            }
        }
        let x = Array2::from_shape_vec((1, row.len()), row).map_err(|_| Error::Dimension {
            what: "refiner input",
            expected: self.net.spec().input_dim,
            got: 0,
        })?;
        let out = self.net.predict(x.view())?;
        self.to_pose(out.row(0).as_slice().unwrap_or_default())
    }

    /// Destandardized, root-relative pose from one standardized output row.
    pub fn to_pose(&self, row: &[f64]) -> Result<Pose3D> {
        let pose = Pose3D::from_flat(&self.stats.pose3d.destandardize(row))?;
        let r = *pose.joints.get(self.root).ok_or(Error::IndexOutOfRange {
            what: "root joint",
            index: self.root,
            len: pose.num_joints(),
        })?;
        Ok(pose.translated([-r[0], -r[1], -r[2]]))
    }

    pub fn to_checkpoint(&self, config_hash: &str, opt: Option<&OptimState>) -> Result<Checkpoint> {
        Checkpoint::new(
            REFINER_TAG,
            config_hash,
            vec![ModelRecord::new(REFINER, &self.net, opt)],
            serde_json::json!({ "mode": self.mode, "stats": self.stats, "root": self.root }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, mode: RefinerMode, spec: &MlpSpec) -> Result<Self> {
        let field = |name: &str| ckpt.extra.get(name).cloned().unwrap_or_default();
        let stored: RefinerMode = serde_json::from_value(field("mode"))
            .map_err(|e| Error::Checkpoint(format!("refiner mode: {e}")))?;
        if stored != mode {
            return Err(Error::ModeMismatch(format!("checkpoint holds a {stored:?} refiner, {mode:?} requested")));
        }
        Ok(Self {
            net: ckpt.model(REFINER, spec)?,
            mode,
            stats: serde_json::from_value(field("stats"))
                .map_err(|e| Error::Checkpoint(format!("normalization statistics: {e}")))?,
            root: serde_json::from_value(field("root")).map_err(|e| Error::Checkpoint(format!("root: {e}")))?,
        })
    }
}

/// Standardized refiner inputs for `samples`.
pub fn refiner_inputs(
    samples: &[Sample],
    mode: RefinerMode,
    stats: &PoseStats,
    source: InputSource,
    generator: Option<&GeneratorModel>,
) -> Result<Array2<f64>> {
    let x2d: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| stats.pose2d.standardize(&s.pose2d_noisy.to_flat()))
        .collect();
    let x2d = stack_rows(&x2d, stats.pose2d.dim())?;
    if mode == RefinerMode::Base {
        return Ok(x2d);
    }
    let (z, fbi) = match source {
        InputSource::Corrupted => {
            let z: Vec<Vec<f64>> = samples.iter().map(|s| stats.depth.standardize(&s.coarse_z_noisy)).collect();
            let f: Vec<Vec<f64>> = samples.iter().map(|s| s.fbi_noisy.to_one_hot_flat()).collect();
            let width = f.first().map_or(0, Vec::len);
            (stack_rows(&z, stats.depth.dim())?, stack_rows(&f, width)?)
        }
        InputSource::Generator => {
            let g = generator.ok_or_else(|| Error::Config("generator input source needs a generator".into()))?;
            let gx = g.input_matrix(samples.iter().map(|s| &s.pose2d_noisy))?;
            let z_g = g.predict_coarse_batch(gx.view())?;
            let z: Vec<Vec<f64>> = z_g
                .rows()
                .into_iter()
                .map(|r| stats.depth.standardize(&g.stats.depth.destandardize(r.as_slice().unwrap_or_default())))
                .collect();
            let probs = g.predict_fbi_batch(gx.view())?;
            let f: Vec<Vec<f64>> = probs
                .rows()
                .into_iter()
                .map(|r| {
                    r.as_slice()
                        .unwrap_or_default()
                        .chunks_exact(3)
                        .flat_map(|c| BoneStatus::ALL[argmax3(&[c[0], c[1], c[2]])].one_hot())
                        .collect()
                })
                .collect();
            (stack_rows(&z, stats.depth.dim())?, stack_rows(&f, probs.ncols())?)
        }
    };
    concatenate(Axis(1), &[x2d.view(), z.view(), fbi.view()]).map_err(|e| Error::Format(e.to_string()))
}

pub fn refiner_targets(samples: &[Sample], stats: &PoseStats) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| stats.pose3d.standardize(&s.pose3d_gt.to_flat()))
        .collect();
    stack_rows(&rows, stats.pose3d.dim())
}

/// Root-aligned MPJPE (mm) of each standardized prediction row.
pub fn mpjpe_rows(
    model: &RefinerModel,
    pred: ArrayView2<f64>,
    samples: &[Sample],
    topo: &SkeletonTopology,
) -> Result<Vec<f64>> {
    pred.rows()
        .into_iter()
        .zip(samples)
        .map(|(row, s)| {
            let pose = model.to_pose(&row.to_vec())?;
            mpjpe_aligned(&pose, &s.pose3d_gt, topo)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerEpoch {
    pub epoch: usize,
    /// α used during this epoch; NaN under plain L2.
    pub alpha: f64,
    pub alpha_clamped: bool,
    /// Mean mini-batch loss.
    pub loss: f64,
    /// Mean training L0 after the epoch.
    pub train_l0: f64,
    pub train_mpjpe: f64,
    pub test_mpjpe: f64,
    /// Samples whose exponent hit the clamp during the epoch.
    pub clamped_samples: usize,
}

#[derive(Debug, Clone)]
pub struct RefinerSetup<'a> {
    pub mode: RefinerMode,
    pub spec: MlpSpec,
    pub loss: LossPolicy,
    pub train: TrainConfig,
    pub source: InputSource,
    pub generator: Option<&'a GeneratorModel>,
}

#[derive(Debug, Clone)]
pub struct RefinerRun {
    pub model: RefinerModel,
    pub metrics: Vec<RefinerEpoch>,
    pub opt: OptimState,
}

const ORDER: u64 = 31;
const DROPOUT: u64 = 32;

pub fn train_refiner(
    train: &[Sample],
    test: &[Sample],
    stats: &PoseStats,
    topo: &SkeletonTopology,
    setup: &RefinerSetup,
) -> Result<RefinerRun> {
    setup.train.validate()?;
    setup.loss.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = RefinerModel::init(setup.mode, setup.spec.clone(), stats.clone(), topo, setup.train.seed)?;
    let x = refiner_inputs(train, setup.mode, stats, setup.source, setup.generator)?;
    let y = refiner_targets(train, stats)?;
    let x_test = refiner_inputs(test, setup.mode, stats, setup.source, setup.generator)?;
    let mut opt = OptimState::new(
        &model.net,
        AdamConfig {
            learning_rate: setup.train.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut order = stream_rng(setup.train.seed, ORDER);
    let mut dropout = stream_rng(setup.train.seed, DROPOUT);

    let mut train_pred = predict_chunked(&model.net, x.view())?;
    let mut metrics = Vec::with_capacity(setup.train.epochs);
    for epoch in 0..setup.train.epochs {
        let (kind, alpha, alpha_clamped) = match setup.loss {
            LossPolicy::PlainL2 => (RegressionLoss::PlainL2, f64::NAN, false),
            LossPolicy::Weighted { epsilon, alpha_policy } => {
                let (alpha, clamped) = match alpha_policy {
                    AlphaPolicy::Fixed(a) => (a, false),
                    AlphaPolicy::PerEpoch => {
                        let est = estimate_alpha(&l0_rows(train_pred.view(), y.view())?)?;
                        (est.alpha, est.clamped)
                    }
                };
                (RegressionLoss::Weighted(WeightedLossConfig { epsilon, alpha }), alpha, clamped)
            }
        };
        let batches = epoch_batches(x.nrows(), setup.train.batch_size, &mut order);
        let mut total = 0.0;
        let mut clamped_samples = 0;
        for idx in &batches {
            let xb = gather(&x, idx);
            let yb = gather(&y, idx);
            let mut clamped = 0;
            total += train_step_clipped(&mut model.net, &mut opt, xb.view(), &mut dropout, GradWrt::Output, setup.train.max_grad_norm, |out| {
                let b = regression_batch_loss(out.view(), yb.view(), kind)?;
                clamped = b.clamped_samples;
                Ok((b.loss, b.grad))
            })
            .map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("refiner epoch {epoch}: {msg}")),
                other => other,
            })?;
            clamped_samples += clamped;
        }
        train_pred = predict_chunked(&model.net, x.view())?;
        let l0s = l0_rows(train_pred.view(), y.view())?;
        let train_mpjpe = mean(&mpjpe_rows(&model, train_pred.view(), train, topo)?);
        let test_mpjpe = if test.is_empty() {
            f64::NAN
        } else {
            let p = predict_chunked(&model.net, x_test.view())?;
            mean(&mpjpe_rows(&model, p.view(), test, topo)?)
        };
        metrics.push(RefinerEpoch {
            epoch,
            alpha,
            alpha_clamped,
            loss: total / batches.len() as f64,
            train_l0: mean(&l0s),
            train_mpjpe,
            test_mpjpe,
            clamped_samples,
        });
    }
    Ok(RefinerRun { model, metrics, opt })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: u64,
    pub action: usize,
    pub mpjpe: f64,
}

/// Per-action MPJPE table with a sample-weighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean MPJPE per action bin, `None` when the bin has no samples.
    pub per_action: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub average: f64,
    /// Sorted by sample id.
    pub per_sample: Vec<SampleError>,
}

impl EvalReport {
    pub fn from_errors(mut per_sample: Vec<SampleError>, num_actions: usize) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::EmptyDataset);
        }
        per_sample.sort_by_key(|e| e.id);
        let mut sums = vec![0.0; num_actions];
        let mut counts = vec![0usize; num_actions];
        for e in &per_sample {
            if e.action >= num_actions {
                return Err(Error::IndexOutOfRange {
                    what: "action bin",
                    index: e.action,
                    len: num_actions,
                });
            }
            sums[e.action] += e.mpjpe;
            counts[e.action] += 1;
        }
        let per_action: Vec<Option<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let weighted: f64 = per_action
            .iter()
            .zip(&counts)
            .filter_map(|(m, &c)| m.map(|m| m * c as f64))
            .sum();
        Ok(Self {
            per_action,
            counts,
            average: weighted / per_sample.len() as f64,
            per_sample,
        })
    }

    pub fn missing_actions(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&a| self.counts[a] == 0).collect()
    }

    /// Bin with the highest mean MPJPE; ties go to the lowest index.
    pub fn hardest_action(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (a, m) in self.per_action.iter().enumerate() {
            if let Some(m) = *m {
                if best.is_none_or(|(_, b)| m > b) {
                    best = Some((a, m));
                }
            }
        }
        best.map(|(a, _)| a)
    }

    pub fn action_percentile(&self, action: usize, q: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .per_sample
            .iter()
            .filter(|e| e.action == action)
            .map(|e| e.mpjpe)
            .collect();
        percentile(&v, q)
    }
}

/// Scores precomputed predictions against the samples' ground truth.
pub fn evaluate_predictions(preds: &[Pose3D], samples: &[Sample], topo: &SkeletonTopology) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::Dimension {
            what: "predictions",
            expected: samples.len(),
            got: preds.len(),
        });
    }
    let errors = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            Ok(SampleError {
                id: s.id,
                action: s.action,
                mpjpe: mpjpe_aligned(&root_relative(p, topo), &s.pose3d_gt, topo)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_errors(errors, NUM_ACTIONS)
}

pub fn evaluate(
    model: &RefinerModel,
    samples: &[Sample],
    topo: &SkeletonTopology,
    source: InputSource,
    generator: Option<&GeneratorModel>,
) -> Result<EvalReport> {
    let x = refiner_inputs(samples, model.mode, &model.stats, source, generator)?;
    let pred = predict_chunked(&model.net, x.view())?;
    let preds = pred
        .rows()
        .into_iter()
        .map(|r| model.to_pose(&r.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, samples, topo)
}

/// Table with header `model,A1..A15,Avg`, one row per tag; empty bins are
/// left blank.
pub fn table_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from("model");
    for a in 1..=NUM_ACTIONS {
        out.push_str(&format!(",A{a}"));
    }
    out.push_str(",Avg\n");
    for (tag, report) in rows {
        out.push_str(tag);
        for m in &report.per_action {
            match m {
                Some(v) => out.push_str(&format!(",{v:.4}")),
                None => out.push(','),
            }
        }
        out.push_str(&format!(",{:.4}\n", report.average));
    }
    out
}
