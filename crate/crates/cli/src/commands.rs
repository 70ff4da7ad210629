//! Command implementations. Every file is written atomically and stamped with
//! the code version and the config hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::Array2;
use serde::Serialize;

use posedepth::adversarial::{
    discriminator_checkpoint, finetune, Discriminator, FinetuneEpoch, PlausibilityProbe, GENERATOR_FT_TAG,
};
use posedepth::fbi::{label_fbi, FbiMatrix};
use posedepth::generator::{train_generator, GeneratorEpoch, GeneratorModel, GENERATOR_TAG};
use posedepth::io::{json_hash, read_jsonl_values, to_jsonl, write_atomic, CODE_VERSION};
use posedepth::loss::{regression_batch_loss, weighted_loss, RegressionLoss, WeightedLossConfig, EXPONENT_CLAMP};
use posedepth::net::{grad_check, relative_error, Checkpoint, GradCheckReport, MlpModel, Mode};
use posedepth::refiner::{
    evaluate, evaluate_predictions, refiner_inputs, refiner_targets, table_csv, train_refiner, EvalReport,
    InputSource, RefinerEpoch, RefinerMode, RefinerModel, RefinerSetup, REFINER_TAG,
};
use posedepth::skeleton::{Pose3D, SkeletonTopology};
use posedepth::standardize::PoseStats;
use posedepth::synth::{make_dataset, make_out_of_domain, stream_rng, Dataset, DatasetHeader, Sample, SynthConfig};
use posedepth::train::derive_seed;

use crate::config::{mode_name, Run};
use crate::render::skeleton_svg;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const OOD_FILE: &str = "ood.jsonl";
pub const GENERATOR_FILE: &str = "generator.json";
pub const GENERATOR_FT_FILE: &str = "generator_ft.json";
pub const DISCRIMINATOR_FILE: &str = "discriminator.json";
pub const TABLE_FILE: &str = "table.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub fn refiner_file(mode: RefinerMode) -> String {
    format!("refiner_{}.json", mode_name(mode))
}

/// First line of every CSV and SVG.
pub fn stamp(run: &Run) -> String {
    format!("{CODE_VERSION} config_hash={}", run.hash)
}

fn stamped_csv<T: Serialize>(run: &Run, notes: &[String], rows: &[T]) -> Result<Vec<u8>> {
    let mut out = format!("# {}\n", stamp(run)).into_bytes();
    for n in notes {
        out.extend_from_slice(format!("# {n}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

// ---------------------------------------------------------------- datasets

pub fn cmd_synth(run: &Run) -> Result<()> {
    let ds = make_dataset(&run.cfg.synth, &run.cfg.camera, &run.topo)?;
    write_atomic(&run.out(DATASET_FILE), &ds.to_jsonl()?)?;
    let ood = make_out_of_domain(&run.cfg.synth, &run.cfg.camera, &run.topo, run.cfg.ood_count)?;
    let header = DatasetHeader {
        train_count: 0,
        test_count: ood.len(),
        ..ds.header.clone()
    };
    let ood = Dataset {
        header,
        train: Vec::new(),
        test: ood,
    };
    write_atomic(&run.out(OOD_FILE), &ood.to_jsonl()?)?;
    println!(
        "wrote {} train / {} test samples and {} out-of-domain samples to {}",
        ds.train.len(),
        ds.test.len(),
        ood.test.len(),
        run.out_dir.display()
    );
    Ok(())
}

/// Loads a dataset file and checks it was generated by this run's settings.
fn load_dataset(run: &Run, name: &str) -> Result<Dataset> {
    let path = run.out(name);
    ensure!(path.exists(), "{} not found; run `posedepth synth` first", path.display());
    let ds = Dataset::from_jsonl(&path)?;
    let expected = json_hash(&(&run.cfg.synth, &run.cfg.camera))?;
    ensure!(
        ds.header.config_hash == expected && ds.header.topology_hash == run.topo.content_hash(),
        "{} was generated with different synth settings; rerun `posedepth synth`",
        path.display()
    );
    Ok(ds)
}

fn load_checkpoint(run: &Run, name: &str, tag: &str, hint: &str) -> Result<Checkpoint> {
    let path = run.out(name);
    ensure!(path.exists(), "{} not found; run `posedepth {hint}` first", path.display());
    Checkpoint::load(&path, tag).with_context(|| format!("loading {}", path.display()))
}

// ---------------------------------------------------------------- label

#[derive(Serialize)]
struct FbiRow {
    id: u64,
    fbi: FbiMatrix,
}

#[derive(Serialize)]
struct FbiHeader<'a> {
    format: &'a str,
    code_version: &'a str,
    config_hash: &'a str,
    topology_hash: String,
    parallel_fraction: f64,
}

/// Labels every 3D pose in a JSON-lines file. Each line needs `pose3d` or
/// `pose3d_gt` (flat, mm) and may carry an `id`; a leading header line with a
/// `format` field is skipped, so dataset files are accepted as input.
pub fn cmd_label(run: &Run, input: &Path, output: &Path) -> Result<usize> {
    let mut rows = Vec::new();
    for (k, (line, value)) in read_jsonl_values(input)?.into_iter().enumerate() {
        if k == 0 && value.get("format").is_some() {
            continue;
        }
        let flat = value
            .get("pose3d")
            .or_else(|| value.get("pose3d_gt"))
            .with_context(|| format!("{}:{line}: missing `pose3d`", input.display()))?;
        let flat: Vec<f64> = serde_json::from_value(flat.clone())
            .with_context(|| format!("{}:{line}: `pose3d` must be an array of numbers", input.display()))?;
        let pose = Pose3D::from_flat(&flat).with_context(|| format!("{}:{line}", input.display()))?;
        let id = value.get("id").and_then(|v| v.as_u64()).unwrap_or(rows.len() as u64);
        let fbi = label_fbi(&pose, &run.topo, &run.cfg.synth.fbi).with_context(|| format!("{}:{line}", input.display()))?;
        rows.push(FbiRow { id, fbi });
    }
    let header = FbiHeader {
        format: "posedepth-fbi/1",
        code_version: CODE_VERSION,
        config_hash: &run.hash,
        topology_hash: run.topo.content_hash(),
        parallel_fraction: run.cfg.synth.fbi.parallel_fraction,
    };
    write_atomic(output, &to_jsonl(&header, &rows)?)?;
    println!("labelled {} poses into {}", rows.len(), output.display());
    Ok(rows.len())
}

// ---------------------------------------------------------------- generator

pub fn cmd_train_gen(run: &Run) -> Result<Vec<GeneratorEpoch>> {
    let ds = load_dataset(run, DATASET_FILE)?;
    let stats = PoseStats::fit(&ds.train)?;
    let cfg = run.cfg.generator.train.with_seed(run.cfg.seed);
    let out = train_generator(&ds.train, &ds.test, &stats, &run.generator_specs(), &cfg)?;
    out.model
        .to_checkpoint(GENERATOR_TAG, &run.hash, Some(&out.coarse_opt), Some(&out.fbi_opt))?
        .save(&run.out(GENERATOR_FILE))?;
    write_atomic(&run.out("generator_metrics.csv"), &stamped_csv(run, &[], &out.metrics)?)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "generator: fbi accuracy {:.4}, depth MAE {:.2} mm after {} epochs",
            last.fbi_accuracy,
            last.z_mae_mm,
            out.metrics.len()
        );
    }
    Ok(out.metrics)
}

pub fn load_generator(run: &Run, name: &str, tag: &str) -> Result<GeneratorModel> {
    let hint = if tag == GENERATOR_TAG { "train-gen" } else { "finetune" };
    let ckpt = load_checkpoint(run, name, tag, hint)?;
    Ok(GeneratorModel::from_checkpoint(&ckpt, &run.generator_specs())?)
}

/// Out-of-domain bone deviation before and after fine-tuning.
#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub pretrained_bone_dev: f64,
    pub metrics: Vec<FinetuneEpoch>,
}

pub fn cmd_finetune(run: &Run, generator: Option<&Path>) -> Result<FinetuneSummary> {
    let ds = load_dataset(run, DATASET_FILE)?;
    let ood = load_dataset(run, OOD_FILE)?;
    let pretrained = match generator {
        Some(p) => GeneratorModel::from_checkpoint(&Checkpoint::load(p, GENERATOR_TAG)?, &run.generator_specs())?,
        None => load_generator(run, GENERATOR_FILE, GENERATOR_TAG)?,
    };
    let probe = PlausibilityProbe {
        samples: &ood.test,
        cam: &run.cfg.camera,
        topo: &run.topo,
        reference_lengths: &run.cfg.synth.bone_lengths,
    };
    let before = probe.measure(&pretrained)?;
    let out = finetune(pretrained, &ds.train, &probe, &run.adv_config())?;
    out.generator
        .to_checkpoint(GENERATOR_FT_TAG, &run.hash, None, None)?
        .save(&run.out(GENERATOR_FT_FILE))?;
    if let Some(d) = &out.discriminator {
        discriminator_checkpoint(d, &run.hash)?.save(&run.out(DISCRIMINATOR_FILE))?;
    }
    let notes = [format!("pretrained_bone_dev={before}")];
    write_atomic(&run.out("finetune_metrics.csv"), &stamped_csv(run, &notes, &out.metrics)?)?;
    if let Some(reason) = out.aborted {
        bail!("fine-tuning aborted ({reason}); last good generator saved");
    }
    let after = out.metrics.last().map_or(before, |m| m.bone_dev);
    println!("out-of-domain bone deviation: {before:.3} mm before, {after:.3} mm after fine-tuning");
    Ok(FinetuneSummary {
        pretrained_bone_dev: before,
        metrics: out.metrics,
    })
}

// ---------------------------------------------------------------- refiner

/// The generator feeding the refiner's depth and FBI channels, if configured.
fn input_generator(run: &Run) -> Result<Option<GeneratorModel>> {
    match run.cfg.refiner.source {
        InputSource::Corrupted => Ok(None),
        InputSource::Generator => {
            let model = if run.out(GENERATOR_FT_FILE).exists() {
                load_generator(run, GENERATOR_FT_FILE, GENERATOR_FT_TAG)?
            } else {
                load_generator(run, GENERATOR_FILE, GENERATOR_TAG)?
            };
            Ok(Some(model))
        }
    }
}

pub fn cmd_train_refiner(run: &Run, mode: RefinerMode) -> Result<Vec<RefinerEpoch>> {
    let ds = load_dataset(run, DATASET_FILE)?;
    let stats = PoseStats::fit(&ds.train)?;
    let generator = input_generator(run)?;
    let setup = RefinerSetup {
        mode,
        spec: run.refiner_spec(mode),
        loss: run.cfg.refiner.loss,
        train: run.cfg.refiner.train.with_seed(run.cfg.seed),
        source: run.cfg.refiner.source,
        generator: generator.as_ref(),
    };
    let out = train_refiner(&ds.train, &ds.test, &stats, &run.topo, &setup)?;
    out.model
        .to_checkpoint(&run.hash, Some(&out.opt))?
        .save(&run.out(&refiner_file(mode)))?;
    let name = format!("refiner_{}_metrics.csv", mode_name(mode));
    write_atomic(&run.out(&name), &stamped_csv(run, &[], &out.metrics)?)?;
    if let Some(last) = out.metrics.last() {
        println!("{} refiner: test MPJPE {:.3} mm, alpha {:.4}", mode_name(mode), last.test_mpjpe, last.alpha);
    }
    Ok(out.metrics)
}

// ---------------------------------------------------------------- eval

#[derive(Serialize)]
struct PerSampleRow<'a> {
    model: &'a str,
    id: u64,
    action: usize,
    mpjpe: f64,
}

/// Scores the ground-truth stub and every trained refiner on the test split.
pub fn cmd_eval(run: &Run, renders: usize) -> Result<Vec<(String, EvalReport)>> {
    let ds = load_dataset(run, DATASET_FILE)?;
    let mut rows = vec![("gt".to_string(), gt_stub_report(&ds.test, &run.topo)?)];
    let generator = input_generator(run)?;
    let mut models = Vec::new();
    for mode in [RefinerMode::Base, RefinerMode::Final] {
        let path = run.out(&refiner_file(mode));
        if !path.exists() {
            continue;
        }
        let ckpt = Checkpoint::load(&path, REFINER_TAG).with_context(|| format!("loading {}", path.display()))?;
        let model = RefinerModel::from_checkpoint(&ckpt, mode, &run.refiner_spec(mode))?;
        let report = evaluate(&model, &ds.test, &run.topo, run.cfg.refiner.source, generator.as_ref())?;
        rows.push((mode_name(mode).to_string(), report));
        models.push(model);
    }
    ensure!(!models.is_empty(), "no refiner checkpoint in {}; run `posedepth train-refiner` first", run.out_dir.display());
    for (tag, report) in &rows {
        let missing = report.missing_actions();
        if !missing.is_empty() {
            eprintln!("warning: {tag}: no test samples for action bins {missing:?}");
        }
    }

    let refs: Vec<(&str, &EvalReport)> = rows.iter().map(|(t, r)| (t.as_str(), r)).collect();
    let table = format!("# {}\n{}", stamp(run), table_csv(&refs));
    write_atomic(&run.out(TABLE_FILE), table.as_bytes())?;
    let per_sample: Vec<PerSampleRow> = rows
        .iter()
        .flat_map(|(tag, r)| {
            r.per_sample.iter().map(move |e| PerSampleRow {
                model: tag,
                id: e.id,
                action: e.action,
                mpjpe: e.mpjpe,
            })
        })
        .collect();
    write_atomic(&run.out("eval_per_sample.csv"), &stamped_csv(run, &[], &per_sample)?)?;

    if renders > 0 {
        let model = models.last().expect("checked non-empty");
        render_samples(run, model, &ds, generator.as_ref(), renders)?;
    }
    print!("{table}");
    Ok(rows)
}

/// Report of a "model" that returns the ground truth; every entry is zero.
pub fn gt_stub_report(samples: &[Sample], topo: &SkeletonTopology) -> Result<EvalReport> {
    let preds: Vec<Pose3D> = samples.iter().map(|s| s.pose3d_gt.clone()).collect();
    Ok(evaluate_predictions(&preds, samples, topo)?)
}

fn render_samples(
    run: &Run,
    model: &RefinerModel,
    ds: &Dataset,
    generator: Option<&GeneratorModel>,
    count: usize,
) -> Result<()> {
    let mut samples: Vec<_> = ds.test.iter().collect();
    samples.sort_by_key(|s| s.id);
    let chosen: Vec<_> = samples.into_iter().take(count).cloned().collect();
    let x = refiner_inputs(&chosen, model.mode, &model.stats, run.cfg.refiner.source, generator)?;
    let pred = model.net.predict(x.view())?;
    for (s, row) in chosen.iter().zip(pred.rows()) {
        let pose = model.to_pose(&row.to_vec())?;
        let fbi = label_fbi(&pose, &run.topo, &run.cfg.synth.fbi)?;
        let svg = skeleton_svg(&pose, Some(&s.pose3d_gt), &fbi, &run.topo, &stamp(run));
        write_atomic(&run.out_dir.join("renders").join(format!("sample_{:06}.svg", s.id)), svg.as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

pub const NET_TOLERANCE: f64 = 1e-4;
pub const DERIVATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub component: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub entries_checked: usize,
    pub skipped_at_kinks: usize,
    pub pass: bool,
}

impl GradCheckRow {
    fn from_report(component: &str, r: &GradCheckReport) -> Self {
        Self {
            component: component.into(),
            max_rel_error: r.max_rel_error,
            tolerance: NET_TOLERANCE,
            entries_checked: r.param_entries_checked + r.input_entries_checked,
            skipped_at_kinks: r.skipped_at_kinks,
            pass: r.max_rel_error < NET_TOLERANCE && r.param_entries_checked > 0,
        }
    }
}

const GRADCHECK_ROWS: usize = 8;
const FD_STEP: f64 = 1e-5;

/// Finite-difference audit of every network configuration the run uses and
/// of the weighted loss's analytic derivative.
pub fn cmd_gradcheck(run: &Run) -> Result<Vec<GradCheckRow>> {
    let synth = SynthConfig {
        count: 4 * GRADCHECK_ROWS,
        ..run.cfg.synth.clone()
    };
    let ds = make_dataset(&synth, &run.cfg.camera, &run.topo)?;
    let stats = PoseStats::fit(&ds.train)?;
    let batch: Vec<_> = ds.train.iter().take(GRADCHECK_ROWS).cloned().collect();
    let specs = run.generator_specs();
    let seed = derive_seed(run.cfg.seed, 99);

    let x2d = refiner_inputs(&batch, RefinerMode::Base, &stats, InputSource::Corrupted, None)?;
    let z: Vec<f64> = batch.iter().flat_map(|s| stats.depth.standardize(&s.coarse_z_gt)).collect();
    let z = Array2::from_shape_vec((batch.len(), stats.depth.dim()), z)?;
    let classes: Vec<Vec<usize>> = batch.iter().map(|s| s.fbi_gt.class_indices()).collect();

    let mut rows = Vec::new();
    let coarse = MlpModel::init(specs.coarse.clone(), seed)?;
    let target = z.clone();
    let r = grad_check(&coarse, x2d.view(), move |out| squared_error(out, &target), FD_STEP)?;
    rows.push(GradCheckRow::from_report("generator.coarse_head", &r));

    let fbi = MlpModel::init(specs.fbi.clone(), seed + 1)?;
    let r = grad_check(&fbi, x2d.view(), move |out| class_nll(out, &classes), FD_STEP)?;
    rows.push(GradCheckRow::from_report("generator.fbi_head", &r));

    let adv = run.adv_config();
    let d = Discriminator::init(adv.discriminator.clone(), seed + 2)?;
    let pairs = ndarray::concatenate![ndarray::Axis(1), x2d.view(), z.view()];
    let r = grad_check(&d.net, pairs.view(), non_saturating, FD_STEP)?;
    rows.push(GradCheckRow::from_report("discriminator", &r));

    let targets = refiner_targets(&batch, &stats)?;
    for mode in [RefinerMode::Base, RefinerMode::Final] {
        let net = MlpModel::init(run.refiner_spec(mode), seed + 3)?;
        let x = refiner_inputs(&batch, mode, &stats, InputSource::Corrupted, None)?;
        // A fresh net sits far from any pose, where the exponent is clamped;
        // anchor the targets near its output so the check sees a trained regime.
        let (out, _) = net.without_dropout().forward(x.view(), Mode::Train, &mut stream_rng(seed, 0))?;
        let t = out + &targets * 0.5;
        let kind = RegressionLoss::Weighted(WeightedLossConfig {
            epsilon: WeightedLossConfig::DEFAULT_EPSILON,
            alpha: 0.5,
        });
        let r = grad_check(
            &net,
            x.view(),
            move |out| {
                let b = regression_batch_loss(out.view(), t.view(), kind).expect("shapes agree");
                (b.loss, b.grad)
            },
            FD_STEP,
        )?;
        rows.push(GradCheckRow::from_report(&format!("refiner.{}", mode_name(mode)), &r));
    }

    let (err, checked) = loss_derivative_error(WeightedLossConfig::DEFAULT_EPSILON)?;
    rows.push(GradCheckRow {
        component: "weighted_loss.dloss_dl0".into(),
        max_rel_error: err,
        tolerance: DERIVATIVE_TOLERANCE,
        entries_checked: checked,
        skipped_at_kinks: 0,
        pass: err < DERIVATIVE_TOLERANCE,
    });

    write_atomic(&run.out(GRADCHECK_FILE), &stamped_csv(run, &[], &rows)?)?;
    for r in &rows {
        println!(
            "{:<26} max rel err {:.3e} (tol {:.0e}, {} entries) {}",
            r.component,
            r.max_rel_error,
            r.tolerance,
            r.entries_checked,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    if let Some(bad) = rows.iter().find(|r| !r.pass) {
        bail!("gradient check failed for {}", bad.component);
    }
    Ok(rows)
}

fn squared_error(out: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let diff = out - target;
    let n = diff.len() as f64;
    (diff.mapv(|v| v * v).sum() / n, diff * (2.0 / n))
}

/// Negative log-likelihood of the true class, taken on the softmax outputs so
/// the check covers the softmax Jacobian.
fn class_nll(probs: &Array2<f64>, classes: &[Vec<usize>]) -> (f64, Array2<f64>) {
    let count = classes.iter().map(Vec::len).sum::<usize>() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for (i, row) in classes.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            let p = probs[[i, 3 * b + c]];
            loss -= p.ln();
            grad[[i, 3 * b + c]] = -1.0 / (p * count);
        }
    }
    (loss / count, grad)
}

/// Mean `−log σ(logit)`, the generator's adversarial objective.
fn non_saturating(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let loss = logits.iter().map(|&l| posedepth::adversarial::softplus(-l)).sum::<f64>() / n;
    let grad = logits.mapv(|l| -(1.0 - posedepth::adversarial::sigmoid(l)) / n);
    (loss, grad)
}

/// Worst relative error of dLoss/dL0 against central differences over a
/// grid of L0 in (0, 20], three α values, skipping points near the clamp.
pub fn loss_derivative_error(epsilon: f64) -> Result<(f64, usize)> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for alpha in [0.1, 0.5, 0.9] {
        let cfg = WeightedLossConfig { epsilon, alpha };
        for k in 1..=200 {
            let v = k as f64 * 0.1;
            if (v / (1.0 - alpha) - EXPONENT_CLAMP).abs() < 1.0 {
                continue;
            }
            let analytic = weighted_loss(v, &cfg)?.derivative;
            let numeric = (weighted_loss(v + h, &cfg)?.loss - weighted_loss(v - h, &cfg)?.loss) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

// ---------------------------------------------------------------- pipeline

/// synth → train-gen → finetune → train-refiner (base, final) → eval.
pub fn cmd_pipeline(run: &Run, renders: usize) -> Result<()> {
    cmd_synth(run)?;
    cmd_train_gen(run)?;
    cmd_finetune(run, None)?;
    for mode in [RefinerMode::Base, RefinerMode::Final] {
        cmd_train_refiner(run, mode)?;
    }
    cmd_eval(run, renders)?;
    Ok(())
}

/// Paths of the primary outputs, for determinism checks.
pub fn primary_outputs(run: &Run) -> Vec<PathBuf> {
    let mut names = vec![
        DATASET_FILE.to_string(),
        OOD_FILE.to_string(),
        GENERATOR_FILE.to_string(),
        "generator_metrics.csv".to_string(),
        GENERATOR_FT_FILE.to_string(),
        DISCRIMINATOR_FILE.to_string(),
        "finetune_metrics.csv".to_string(),
        TABLE_FILE.to_string(),
        "eval_per_sample.csv".to_string(),
    ];
    for mode in [RefinerMode::Base, RefinerMode::Final] {
        names.push(refiner_file(mode));
        names.push(format!("refiner_{}_metrics.csv", mode_name(mode)));
    }
    names.into_iter().map(|n| run.out(&n)).collect()
}
