use posedepth::adversarial::{finetune, finetune_supervised, AdvConfig, PlausibilityProbe};
use posedepth::generator::{train_generator, GeneratorSpecs};
use posedepth::net::MlpSpec;
use posedepth::refiner::{evaluate, train_refiner, InputSource, LossPolicy, RefinerMode, RefinerSetup};
use posedepth::skeleton::SkeletonTopology;
use posedepth::standardize::PoseStats;
use posedepth::synth::{make_dataset, make_out_of_domain, CameraModel, Dataset, SynthConfig, NUM_ACTIONS};
use posedepth::train::TrainConfig;

fn dataset(cfg: SynthConfig) -> Dataset {
    make_dataset(&cfg, &CameraModel::default(), &SkeletonTopology::h36m()).unwrap()
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// A single sample has no batch statistics, so memorization runs use the
/// default widths with normalization and dropout off.
fn memorizing(mut spec: MlpSpec) -> MlpSpec {
    spec.use_batch_stats_norm = false;
    spec.dropout_rate = 0.0;
    spec
}

#[test]
fn generator_learns_noiseless_data() {
    let ds = dataset(SynthConfig {
        count: 10_000,
        noise_2d_std: 0.0,
        coarse_z_noise_std: 0.0,
        fbi_flip_prob: 0.0,
        ..SynthConfig::default()
    });
    let topo = SkeletonTopology::h36m();
    let stats = PoseStats::fit(&ds.train).unwrap();
    let run = train_generator(&ds.train, &ds.test, &stats, &GeneratorSpecs::for_topology(&topo), &train_cfg(10, 0)).unwrap();
    let last = run.metrics.last().unwrap();
    let range: f64 = ds
        .test
        .iter()
        .map(|s| {
            let z = &s.coarse_z_gt;
            z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min)
        })
        .sum::<f64>()
        / ds.test.len() as f64;
    assert!(last.z_mae_mm < range / 4.0, "{} vs {}", last.z_mae_mm, range / 4.0);
    assert!(last.fbi_accuracy > 0.8, "{}", last.fbi_accuracy);
}

#[test]
fn one_sample_is_memorized() {
    let topo = SkeletonTopology::h36m();
    let ds = dataset(SynthConfig {
        count: 40,
        ..SynthConfig::default()
    });
    let stats = PoseStats::fit(&ds.train).unwrap();
    let one = vec![ds.train[0].clone()];
    let mut specs = GeneratorSpecs::for_topology(&topo);
    specs.coarse = memorizing(specs.coarse);
    specs.fbi = memorizing(specs.fbi);
    let g = train_generator(&one, &one, &stats, &specs, &train_cfg(200, 0)).unwrap();
    let last = g.metrics.last().unwrap();
    assert!(last.coarse_loss < 1e-3 && last.fbi_loss < 1e-3, "{last:?}");

    for mode in [RefinerMode::Base, RefinerMode::Final] {
        let setup = RefinerSetup {
            mode,
            spec: memorizing(mode.default_spec(&topo)),
            loss: LossPolicy::default(),
            train: train_cfg(200, 0),
            source: InputSource::Corrupted,
            generator: None,
        };
        let r = train_refiner(&one, &one, &stats, &topo, &setup).unwrap();
        let last = r.metrics.last().unwrap();
        assert!(last.train_mpjpe < 1.0, "{mode:?}: {last:?}");
    }
}

#[test]
fn zero_adversarial_weight_matches_supervised_bitwise() {
    let topo = SkeletonTopology::h36m();
    let cam = CameraModel::default();
    let cfg = SynthConfig {
        count: 400,
        ..SynthConfig::default()
    };
    let ds = dataset(cfg.clone());
    let ood = make_out_of_domain(&cfg, &cam, &topo, 50).unwrap();
    let stats = PoseStats::fit(&ds.train).unwrap();
    let g = train_generator(&ds.train, &ds.test, &stats, &GeneratorSpecs::for_topology(&topo), &train_cfg(2, 0)).unwrap();
    let probe = PlausibilityProbe {
        samples: &ood,
        cam: &cam,
        topo: &topo,
        reference_lengths: &cfg.bone_lengths,
    };
    let adv = AdvConfig {
        lambda_adv: 0.0,
        epochs: 2,
        ..AdvConfig::for_topology(&topo)
    };
    let a = finetune(g.model.clone(), &ds.train, &probe, &adv).unwrap();
    let b = finetune_supervised(g.model.clone(), &ds.train, &probe, &adv).unwrap();
    assert_eq!(a.generator.coarse_head.param_slices(), b.generator.coarse_head.param_slices());
    let bones = |r: &posedepth::adversarial::FinetuneRun| r.metrics.iter().map(|m| m.bone_dev.to_bits()).collect::<Vec<_>>();
    assert_eq!(bones(&a), bones(&b));
    let with_adv = finetune(g.model.clone(), &ds.train, &probe, &AdvConfig { lambda_adv: 0.01, ..adv.clone() }).unwrap();
    assert_ne!(with_adv.generator.coarse_head.param_slices(), b.generator.coarse_head.param_slices());
}

#[test]
fn evaluation_matches_brute_force_mpjpe() {
    let topo = SkeletonTopology::h36m();
    let ds = dataset(SynthConfig {
        count: 600,
        ..SynthConfig::default()
    });
    let stats = PoseStats::fit(&ds.train).unwrap();
    let setup = RefinerSetup {
        mode: RefinerMode::Final,
        spec: RefinerMode::Final.default_spec(&topo),
        loss: LossPolicy::default(),
        train: TrainConfig {
            max_grad_norm: Some(2.0),
            ..train_cfg(2, 1)
        },
        source: InputSource::Corrupted,
        generator: None,
    };
    let run = train_refiner(&ds.train, &ds.test, &stats, &topo, &setup).unwrap();
    let report = evaluate(&run.model, &ds.test, &topo, InputSource::Corrupted, None).unwrap();

    let root = topo.root();
    let mut sums = [0.0; NUM_ACTIONS];
    let mut counts = [0usize; NUM_ACTIONS];
    let mut all = 0.0;
    for s in &ds.test {
        let coarse = posedepth::generator::CoarsePose {
            pose2d: s.pose2d_noisy.clone(),
            z: stats.depth.standardize(&s.coarse_z_noisy),
        };
        let pred = run.model.refine(&s.pose2d_noisy, Some(&coarse), Some(&s.fbi_noisy)).unwrap();
        let (pr, gr) = (pred.joints[root], s.pose3d_gt.joints[root]);
        let mut err = 0.0;
        for (p, g) in pred.joints.iter().zip(&s.pose3d_gt.joints) {
            let d: f64 = (0..3).map(|k| ((p[k] - pr[k]) - (g[k] - gr[k])).powi(2)).sum();
            err += d.sqrt();
        }
        err /= pred.joints.len() as f64;
        sums[s.action] += err;
        counts[s.action] += 1;
        all += err;
    }
    assert!((report.average - all / ds.test.len() as f64).abs() < 1e-9);
    for a in 0..NUM_ACTIONS {
        let want = (counts[a] > 0).then(|| sums[a] / counts[a] as f64);
        match (report.per_action[a], want) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
            (x, y) => assert_eq!(x, y),
        }
    }
}
