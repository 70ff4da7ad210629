use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
}

fn squared_error_to(target: Array2<f64>) -> impl Fn(&Array2<f64>) -> (f64, Array2<f64>) {
    move |out: &Array2<f64>| {
        let diff = out - &target;
        (0.5 * diff.mapv(|v| v * v).sum(), diff)
    }
}

fn small_residual(input: usize, output: usize, act: OutputActivation) -> MlpSpec {
    MlpSpec {
        hidden_dim: 24,
        ..MlpSpec::residual(input, output, act)
    }
}

#[test]
fn init_is_deterministic_and_shaped() {
    let spec = MlpSpec::residual(34, 51, OutputActivation::Linear);
    let a = MlpModel::init(spec.clone(), 7).unwrap();
    let b = MlpModel::init(spec.clone(), 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.linears()[0].weight.dim(), (34, 256));
    assert!(a.linears()[0].bias.is_none(), "bias before norm is redundant");
    assert_eq!(a.linears().last().unwrap().weight.dim(), (256, 51));
    assert_eq!(a.norms().len(), 5);
    let c = MlpModel::init(spec, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_weight_variance_is_fan_in_scaled() {
    // 400 x 256 = 102,400 draws
    let spec = MlpSpec {
        hidden_dim: 256,
        num_residual_blocks: 1,
        ..MlpSpec::residual(400, 3, OutputActivation::Linear)
    };
    let m = MlpModel::init(spec, 3).unwrap();
    let w = &m.linears()[0].weight;
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / 400.0;
    assert!((var - expected).abs() < 0.1 * expected, "var {var}");
}

#[test]
fn spec_validation() {
    assert!(MlpModel::init(MlpSpec { dropout_rate: 1.0, ..MlpSpec::linear(2, 2) }, 0).is_err());
    assert!(MlpModel::init(MlpSpec::linear(0, 2), 0).is_err());
    let bad_softmax = MlpSpec::residual(4, 4, OutputActivation::GroupSoftmax3);
    assert!(MlpModel::init(bad_softmax, 0).is_err());
}

#[test]
fn identity_single_layer_is_identity() {
    let mut m = MlpModel::init(MlpSpec::linear(5, 5), 1).unwrap();
    m.linears_mut()[0].weight = Array2::eye(5);
    let x = random_batch(4, 5, 2);
    assert_eq!(m.predict(x.view()).unwrap(), x);
}

#[test]
fn softmax_groups_sum_to_one() {
    let m = MlpModel::init(small_residual(6, 42, OutputActivation::GroupSoftmax3), 4).unwrap();
    let out = m.predict(random_batch(9, 6, 5).view()).unwrap();
    for row in out.rows() {
        for g in row.to_slice().unwrap().chunks(3) {
            assert!(g.iter().all(|&p| p >= 0.0));
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_output_layer_gives_uniform_probabilities() {
    let mut m = MlpModel::init(small_residual(6, 9, OutputActivation::GroupSoftmax3), 4).unwrap();
    let last = m.linears_mut().last_mut().unwrap();
    last.weight.fill(0.0);
    let out = m.predict(random_batch(3, 6, 1).view()).unwrap();
    assert!(out.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn eval_forward_is_pure() {
    let m = MlpModel::init(small_residual(8, 5, OutputActivation::Linear), 9).unwrap();
    let x = random_batch(6, 8, 10);
    assert_eq!(m.predict(x.view()).unwrap(), m.predict(x.view()).unwrap());
    // Single rows are fine in eval mode.
    assert!(m.predict(x.slice(ndarray::s![0..1, ..])).is_ok());
}

#[test]
fn forward_errors() {
    let m = MlpModel::init(small_residual(8, 5, OutputActivation::Linear), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        m.forward(random_batch(4, 7, 0).view(), Mode::Eval, &mut rng),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        m.forward(random_batch(1, 8, 0).view(), Mode::Train, &mut rng),
        Err(Error::BatchTooSmall(1))
    ));
}

#[test]
fn stale_cache_is_rejected() {
    let mut m = MlpModel::init(small_residual(8, 5, OutputActivation::Linear), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, cache) = m.forward(random_batch(4, 8, 1).view(), Mode::Train, &mut rng).unwrap();
    m.linears_mut()[0].weight[[0, 0]] += 1.0;
    assert!(matches!(
        m.backward(&cache, out.view(), GradWrt::Output),
        Err(Error::StaleCache(_))
    ));
    let other = MlpModel::init(small_residual(8, 5, OutputActivation::Linear), 9).unwrap();
    let fresh = MlpModel::init(MlpSpec::linear(8, 5), 0).unwrap();
    let (o2, c2) = other.forward(random_batch(4, 8, 1).view(), Mode::Train, &mut rng).unwrap();
    assert!(fresh.backward(&c2, o2.view(), GradWrt::Output).is_err());
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let m = MlpModel::init(small_residual(8, 6, OutputActivation::GroupSoftmax3), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (out, cache) = m.forward(random_batch(5, 8, 4).view(), Mode::Train, &mut rng).unwrap();
    let (g, gx) = m.backward(&cache, Array2::zeros(out.raw_dim()).view(), GradWrt::Output).unwrap();
    assert!(g.is_zero());
    assert!(gx.iter().all(|&v| v == 0.0));
}

#[test]
fn linear_input_gradient_is_weight_row_sums() {
    let m = MlpModel::init(MlpSpec::linear(4, 3), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_batch(2, 4, 6);
    let (out, cache) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
    let ones = Array2::ones(out.raw_dim());
    let (_, gx) = m.backward(&cache, ones.view(), GradWrt::Output).unwrap();
    // d(sum y)/dx_i = sum_k W[i, k] = column sums of W^T.
    let expected = m.linears()[0].weight.t().sum_axis(ndarray::Axis(0));
    for row in gx.rows() {
        for (a, b) in row.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn grad_check_linear_quadratic() {
    let m = MlpModel::init(MlpSpec::linear(6, 4), 11).unwrap();
    let x = random_batch(5, 6, 12);
    let report = grad_check(&m, x.view(), squared_error_to(random_batch(5, 4, 13)), 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
    assert_eq!(report.param_entries_checked, 6 * 4 + 4);
}

#[test]
fn grad_check_residual_with_norm() {
    let m = MlpModel::init(small_residual(10, 7, OutputActivation::Linear), 21).unwrap();
    let x = random_batch(8, 10, 22);
    let report = grad_check(&m, x.view(), squared_error_to(random_batch(8, 7, 23)), 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.param_entries_checked > 300);
}

#[test]
fn grad_check_residual_without_norm() {
    let spec = MlpSpec {
        use_batch_stats_norm: false,
        ..small_residual(10, 7, OutputActivation::Linear)
    };
    let m = MlpModel::init(spec, 31).unwrap();
    let x = random_batch(8, 10, 32);
    let report = grad_check(&m, x.view(), squared_error_to(random_batch(8, 7, 33)), 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn grad_check_softmax_head() {
    let m = MlpModel::init(small_residual(10, 9, OutputActivation::GroupSoftmax3), 41).unwrap();
    let x = random_batch(8, 10, 42);
    // Cross-entropy against class 0 of each group, expressed on probabilities.
    let loss = |p: &Array2<f64>| {
        let mut g = Array2::zeros(p.raw_dim());
        let mut l = 0.0;
        for ((r, c), v) in p.indexed_iter() {
            if c % 3 == (r % 3) {
                l -= v.ln();
                g[[r, c]] = -1.0 / v;
            }
        }
        (l, g)
    };
    let report = grad_check(&m, x.view(), loss, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn grad_check_catches_corrupted_gradient() {
    let m = MlpModel::init(small_residual(10, 7, OutputActivation::Linear), 21).unwrap();
    let x = random_batch(8, 10, 22);
    let loss = squared_error_to(random_batch(8, 7, 23));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, cache) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
    let (_, up) = loss(&out);
    let (mut grads, gx) = m.backward(&cache, up.view(), GradWrt::Output).unwrap();
    grads.linears[0].weight[[0, 0]] *= 2.0;
    let report = grad_check_against(&m, x.view(), &loss, 1e-5, &grads, &gx).unwrap();
    assert!(report.max_rel_error > 0.1, "{report:?}");
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut m = MlpModel::init(small_residual(4, 3, OutputActivation::Linear), 1).unwrap();
    let before = m.clone();
    let mut state = OptimState::new(&m, AdamConfig::default());
    let zero = m.zero_gradients();
    opt_step(&mut m, &zero, &mut state).unwrap();
    assert_eq!(m, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_constant_gradient_steps_approach_lr() {
    let mut m = MlpModel::init(MlpSpec::linear(1, 1), 1).unwrap();
    let cfg = AdamConfig::default();
    let mut state = OptimState::new(&m, cfg);
    let mut g = m.zero_gradients();
    g.linears[0].weight[[0, 0]] = -0.37;
    let mut last_step = 0.0;
    for _ in 0..200 {
        let w0 = m.linears()[0].weight[[0, 0]];
        opt_step(&mut m, &g, &mut state).unwrap();
        last_step = m.linears()[0].weight[[0, 0]] - w0;
    }
    // Gradient is negative, so the parameter moves up by ~lr per step.
    assert!((last_step - cfg.learning_rate).abs() < 1e-9, "{last_step}");
    assert_eq!(m.linears()[0].bias.as_ref().unwrap()[0], 0.0);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut m = MlpModel::init(small_residual(4, 3, OutputActivation::Linear), 1).unwrap();
    let before = m.clone();
    let mut state = OptimState::new(&m, AdamConfig::default());
    let state_before = state.clone();
    let mut g = m.zero_gradients();
    g.linears[1].weight[[2, 2]] = f64::NAN;
    assert!(matches!(opt_step(&mut m, &g, &mut state), Err(Error::NonFinite(_))));
    assert_eq!(m, before);
    assert_eq!(state, state_before);
}

#[test]
fn running_stats_follow_momentum() {
    let mut m = MlpModel::init(small_residual(3, 2, OutputActivation::Linear), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = array![[1.0, 2.0, 3.0], [2.0, 0.0, -1.0], [0.5, 0.5, 0.5]];
    let (_, cache) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
    let h = x.dot(&m.linears()[0].weight);
    let mean = h.mean_axis(ndarray::Axis(0)).unwrap();
    m.update_running_stats(&cache).unwrap();
    for (r, b) in m.norms()[0].running_mean.iter().zip(&mean) {
        assert!((r - 0.1 * b).abs() < 1e-12);
    }
}

fn train_a_few_steps(seed: u64) -> MlpModel {
    let mut m = MlpModel::init(small_residual(6, 4, OutputActivation::Linear), seed).unwrap();
    let mut state = OptimState::new(&m, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_batch(16, 6, 1);
    let loss = squared_error_to(random_batch(16, 4, 2));
    for _ in 0..20 {
        let (out, cache) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
        let (_, up) = loss(&out);
        let (g, _) = m.backward(&cache, up.view(), GradWrt::Output).unwrap();
        m.update_running_stats(&cache).unwrap();
        opt_step(&mut m, &g, &mut state).unwrap();
    }
    m
}

#[test]
fn training_is_bitwise_reproducible() {
    let a = train_a_few_steps(5);
    let b = train_a_few_steps(5);
    assert_eq!(a, b);
    let pa: Vec<u64> = a.param_slices().concat().iter().map(|v| v.to_bits()).collect();
    let pb: Vec<u64> = b.param_slices().concat().iter().map(|v| v.to_bits()).collect();
    assert_eq!(pa, pb);
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let m = train_a_few_steps(3);
    let state = OptimState::new(&m, AdamConfig::default());
    let rec = ModelRecord::new("net", &m, Some(&state));
    let ckpt = Checkpoint::new("refiner", "cfg", vec![rec], serde_json::json!({"k": 1})).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path, "refiner").unwrap();
    assert_eq!(back, ckpt);
    let restored = back.model("net", m.spec()).unwrap();
    assert_eq!(restored, m);
    let x = random_batch(3, 6, 9);
    assert_eq!(restored.predict(x.view()).unwrap(), m.predict(x.view()).unwrap());

    let other_spec = MlpSpec { hidden_dim: 25, ..m.spec().clone() };
    assert!(matches!(back.model("net", &other_spec), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::load(&path, "generator"), Err(Error::Checkpoint(_))));

    let mut tampered = ckpt.clone();
    tampered.models[0].layers[0].weight[0] += 1.0;
    assert!(tampered.verify("refiner").is_err());
}
