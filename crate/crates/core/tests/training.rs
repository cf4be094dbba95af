use lifthead::synthetic::SyntheticGen;
use lifthead::training::{
    adam_step, average_checkpoints, loss_value, lr_at, retention_marginal, sample_patch_subset, train, AdamState,
    LossWeights, TrainConfig,
};
use lifthead::{HeadConfig, LiftError, LiftingHead, ParamStore, PoseOutput, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar_store(x: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::scalar(x)).unwrap();
    s
}

fn set_grad(store: &mut ParamStore<f64>, name: &str, g: Vec<f64>) {
    let id = store.id_of(name).unwrap();
    store.get_mut(id).set_grad(Some(g));
}

// ---- schedule ----

#[test]
fn schedule_hits_peak_and_closed_form_values() {
    assert_eq!(lr_at(4000, 5e-4, 4000).unwrap(), 0.0005);
    assert!((lr_at(1000, 5e-4, 4000).unwrap() - 0.0005 * 1000.0 / 4000.0).abs() < 1e-18);
    assert!((lr_at(16000, 5e-4, 4000).unwrap() - 0.0005 * (4000.0f64 / 16000.0).sqrt()).abs() < 1e-18);
}

#[test]
fn schedule_rises_then_decays() {
    let lrs: Vec<f64> = (1..=12000).map(|s| lr_at(s, 5e-4, 4000).unwrap()).collect();
    assert!(lrs[..4000].windows(2).all(|w| w[0] < w[1]));
    assert!(lrs[3999..].windows(2).all(|w| w[0] > w[1]));
    // both branches meet at the peak; neighbours differ by at most one warmup increment
    let peak = lrs[3999];
    assert!((peak - 5e-4 * 4000.0 / 4000.0).abs() < 1e-12);
    assert!((peak - 5e-4 * (4000.0f64 / 4000.0).sqrt()).abs() < 1e-12);
    assert!((peak - lrs[3998]).abs() <= 5e-4 / 4000.0 + 1e-18);
    assert!((peak - lrs[4000]).abs() <= 5e-4 / 4000.0);
}

#[test]
fn schedule_rejects_step_zero() {
    assert!(matches!(lr_at(0, 5e-4, 4000), Err(LiftError::ZeroStep)));
}

// ---- Adam ----

/// Independent scalar Adam recurrence.
fn adam_reference(x0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(x);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient() {
    for g in [3.0, -0.02, 150.0] {
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&store);
        set_grad(&mut store, "x", vec![g]);
        adam_step(&mut store, &mut state, 1e-3).unwrap();
        let x = store.get(store.id_of("x").unwrap()).data()[0];
        assert!((x - (1.0 - 1e-3 * g.signum())).abs() < 1e-6);
    }
}

#[test]
fn adam_descends_quadratic_bowl() {
    let mut store = scalar_store(1.0);
    let mut state = AdamState::new(&store);
    let reference = adam_reference(1.0, |x| 2.0 * x, 1e-2, 500);
    for want in &reference {
        let x = store.get(store.id_of("x").unwrap()).data()[0];
        set_grad(&mut store, "x", vec![2.0 * x]);
        adam_step(&mut store, &mut state, 1e-2).unwrap();
        let got = store.get(store.id_of("x").unwrap()).data()[0];
        assert!((got - want).abs() < 1e-12);
    }
    assert!(reference.last().unwrap().abs() < 1e-2);
    assert_eq!(state.step, 500);
}

#[test]
fn adam_zero_gradient_is_a_no_op_but_counts() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap()).unwrap();
    store.insert("b", Tensor::from_vec(&[1], vec![2.0]).unwrap()).unwrap();
    let before = store.snapshot();
    let mut state = AdamState::new(&store);
    set_grad(&mut store, "a", vec![0.0, 0.7]);
    set_grad(&mut store, "b", vec![0.0]);
    adam_step(&mut store, &mut state, 0.1).unwrap();
    let a = store.get(store.id_of("a").unwrap()).data();
    assert_eq!(a[0], 0.5);
    assert_ne!(a[1], -1.5);
    assert_eq!(store.get(store.id_of("b").unwrap()), before.get(before.id_of("b").unwrap()));
    assert_eq!(state.step, 1);
    // gradients are cleared after the step
    assert!(store.iter().all(|(_, t)| t.grad().is_none()));
}

#[test]
fn adam_names_missing_gradient() {
    let mut store = ParamStore::new();
    store.insert("has", Tensor::scalar(1.0)).unwrap();
    store.insert("lacks", Tensor::scalar(1.0)).unwrap();
    let mut state = AdamState::new(&store);
    set_grad(&mut store, "has", vec![1.0]);
    match adam_step(&mut store, &mut state, 0.1) {
        Err(LiftError::MissingGradient(name)) => assert_eq!(name, "lacks"),
        other => panic!("expected missing gradient, got {other:?}"),
    }
}

// ---- augmentation ----

#[test]
fn full_floor_keeps_every_patch() {
    let mut r = rng(1);
    for _ in 0..100 {
        assert_eq!(sample_patch_subset(16, 16, &mut r), (0..16).collect::<Vec<_>>());
    }
}

#[test]
fn subsets_are_sorted_unique_and_in_range() {
    let mut r = rng(2);
    for _ in 0..10_000 {
        let s = sample_patch_subset(64, 16, &mut r);
        assert!(s.len() >= 16 && s.len() <= 64);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&i| i < 64));
    }
}

#[test]
fn retention_marginal_matches_explicit_sum() {
    for (n, min) in [(64, 16), (10, 1), (7, 7), (33, 5)] {
        let count = (n - min + 1) as f64;
        let direct: f64 = (min..=n).map(|k| k as f64 / n as f64 / count).sum();
        assert!((retention_marginal(n, min) - direct).abs() < 1e-15);
    }
}

#[test]
fn subset_size_is_uniform_over_range() {
    let (n, min, trials) = (20, 5, 64_000);
    let mut counts = vec![0usize; n + 1];
    let mut r = rng(3);
    for _ in 0..trials {
        counts[sample_patch_subset(n, min, &mut r).len()] += 1;
    }
    let p = 1.0 / (n - min + 1) as f64;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        if k < min {
            assert_eq!(c, 0);
        } else {
            assert!((c as f64 - trials as f64 * p).abs() < 4.0 * sigma, "k={k}: {c}");
        }
    }
}

// ---- loss ----

fn random_pose(seed: u64) -> PoseOutput<f64> {
    let mut r = rng(seed);
    let flat: Vec<f64> = (0..128).map(|_| r.gen_range(-1.0..1.0)).collect();
    PoseOutput::from_flat(&flat, 24, 23, 10).unwrap()
}

#[test]
fn loss_of_identical_poses_is_zero() {
    let p = random_pose(4);
    assert_eq!(loss_value(&p, &p, &LossWeights::default()).unwrap(), 0.0);
}

#[test]
fn keypoint_perturbation_costs_delta_over_72() {
    let target = random_pose(5);
    for (delta, w) in [(0.3, 1.0), (-1.7, 2.5)] {
        let mut pred = target.clone();
        pred.keypoints.data_mut()[17] += delta;
        let weights = LossWeights {
            keypoint: w,
            ..LossWeights::default()
        };
        let l = loss_value(&pred, &target, &weights).unwrap();
        assert!((l - w * f64::abs(delta) / 72.0).abs() < 1e-15);
    }
}

#[test]
fn loss_matches_group_formula() {
    let (a, b) = (random_pose(6), random_pose(7));
    let w = LossWeights {
        keypoint: 0.7,
        twist: 1.3,
        beta: 0.4,
    };
    let mean_abs = |x: &Tensor<f64>, y: &Tensor<f64>| {
        x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.numel() as f64
    };
    let mean_sq = |x: &Tensor<f64>, y: &Tensor<f64>| {
        x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.numel() as f64
    };
    let want = 0.7 * mean_abs(&a.keypoints, &b.keypoints)
        + 1.3 * mean_abs(&a.twists, &b.twists)
        + 0.4 * mean_sq(&a.beta, &b.beta);
    assert!((loss_value(&a, &b, &w).unwrap() - want).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_never_negative(a in 0u64..10_000, b in 0u64..10_000) {
        let l = loss_value(&random_pose(a), &random_pose(b), &LossWeights::default()).unwrap();
        prop_assert!(l >= 0.0);
    }
}

// ---- averaging ----

fn random_store(seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_fn(&[4, 5], |_| r.gen_range(-2.0..2.0))).unwrap();
    s.insert("b", Tensor::from_fn(&[5], |_| r.gen_range(-2.0..2.0))).unwrap();
    s
}

#[test]
fn averaging_identical_sets_is_exact() {
    let s = random_store(8);
    let avg = average_checkpoints(&vec![s.clone(); 7]).unwrap();
    assert_eq!(avg, s);
}

#[test]
fn averaging_two_scalars() {
    let avg = average_checkpoints(&[scalar_store(0.0), scalar_store(2.0)]).unwrap();
    assert_eq!(avg.get(avg.id_of("x").unwrap()).data(), &[1.0]);
}

#[test]
fn averaging_matches_direct_summation() {
    let sets: Vec<_> = (0..10).map(random_store).collect();
    let avg = average_checkpoints(&sets).unwrap();
    for (name, t) in avg.iter() {
        for (j, &v) in t.data().iter().enumerate() {
            let sum: f64 = sets.iter().map(|s| s.get(s.id_of(name).unwrap()).data()[j]).sum();
            assert!((v - sum / 10.0).abs() < 1e-7);
        }
    }
}

#[test]
fn averaging_ignores_order() {
    let mut sets: Vec<_> = (20..30).map(random_store).collect();
    let a = average_checkpoints(&sets).unwrap();
    sets.reverse();
    sets.swap(1, 6);
    let b = average_checkpoints(&sets).unwrap();
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn averaging_rejects_mismatched_structure() {
    let mut other = random_store(1);
    other.insert("extra", Tensor::scalar(0.0)).unwrap();
    assert!(matches!(
        average_checkpoints(&[random_store(0), other]),
        Err(LiftError::StructureMismatch(_))
    ));
    assert!(average_checkpoints::<f64>(&[]).is_err());
}

// ---- training loop ----

fn micro_setup() -> (LiftingHead, ParamStore<f32>, Vec<lifthead::training::Sample<f32>>) {
    let cfg = HeadConfig {
        layers: 1,
        heads: 2,
        width: 8,
        n_patches: 4,
        c_in: 32,
        ..HeadConfig::paper()
    };
    let gen = SyntheticGen::new(&cfg, 3, 0.01).unwrap();
    let (head, store) = LiftingHead::init::<f32, _>(&cfg, &mut rng(4)).unwrap();
    (head, store, gen.generate(6))
}

fn micro_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_lr: 1e-3,
        warmup_steps: 5,
        epochs,
        batch_size: 4,
        avg_last_epochs: 2,
        seed: 9,
        min_keep_patches: None,
        weights: LossWeights::default(),
    }
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let (head, mut store, data) = micro_setup();
    let before = store.clone();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ckpt");
    let report = train(&head, &mut store, &data, &micro_train_config(0), Some(&out)).unwrap();
    assert_eq!(store, before);
    assert!(report.log.is_empty());
    assert!(report.averaged.is_none());
    assert!(!out.exists());
}

#[test]
fn replay_with_same_seed_is_identical() {
    let run = || {
        let (head, mut store, data) = micro_setup();
        let report = train(&head, &mut store, &data, &micro_train_config(3), None).unwrap();
        let log: Vec<_> = report.log.iter().map(|r| (r.step, r.epoch, r.lr, r.loss)).collect();
        (log, store)
    };
    let (log_a, store_a) = run();
    let (log_b, store_b) = run();
    assert_eq!(log_a.len(), 6);
    assert_eq!(log_a, log_b);
    assert_eq!(store_a, store_b);
}

#[test]
fn training_writes_epochs_and_average() {
    let (head, mut store, data) = micro_setup();
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_train_config(3);
    let report = train(&head, &mut store, &data, &cfg, Some(dir.path())).unwrap();
    let names: Vec<String> = report
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["epoch_0001.ckpt", "epoch_0002.ckpt", "epoch_0003.ckpt", "averaged.ckpt"]);

    // the averaged model is the mean of the last two epoch files
    let load = |i: usize| lifthead::training::load_checkpoint::<f32>(&report.checkpoints[i]).unwrap();
    let (e2, opt2) = load(1);
    let (e3, _) = load(2);
    let (avg, avg_opt) = load(3);
    assert!(avg_opt.is_none());
    assert_eq!(opt2.unwrap().step, 4);
    assert_eq!(e3, store.snapshot());
    for (name, t) in avg.iter() {
        let a = e2.get(e2.id_of(name).unwrap()).data();
        let b = e3.get(e3.id_of(name).unwrap()).data();
        for ((&m, &x), &y) in t.data().iter().zip(a).zip(b) {
            assert!((m as f64 - (x as f64 + y as f64) / 2.0).abs() < 1e-7);
        }
    }
    assert_eq!(report.averaged.unwrap(), avg);
    assert_eq!(report.epoch_losses.len(), 3);
    assert!(report.log.iter().all(|r| r.loss.is_finite() && r.lr > 0.0));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (head, mut store, data) = micro_setup();
    let id = store.id_of("proj_beta.bias").unwrap();
    store.get_mut(id).data_mut()[0] = f32::NAN;
    match train(&head, &mut store, &data, &micro_train_config(1), None) {
        Err(LiftError::NonFiniteLoss { step, lr, loss }) => {
            assert_eq!(step, 1);
            assert!((lr - 2e-4).abs() < 1e-12);
            assert!(loss.is_nan());
        }
        other => panic!("expected non-finite loss, got {:?}", other.map(|r| r.log.len())),
    }
}

#[test]
fn empty_dataset_and_bad_config_are_rejected() {
    let (head, mut store, data) = micro_setup();
    assert!(matches!(
        train(&head, &mut store, &[], &micro_train_config(1), None),
        Err(LiftError::EmptyDataset)
    ));
    for cfg in [
        TrainConfig {
            warmup_steps: 0,
            ..micro_train_config(1)
        },
        TrainConfig {
            max_lr: 0.0,
            ..micro_train_config(1)
        },
        TrainConfig {
            min_keep_patches: Some(5),
            ..micro_train_config(1)
        },
    ] {
        assert!(matches!(
            train(&head, &mut store, &data, &cfg, None),
            Err(LiftError::InvalidConfig { .. })
        ));
    }
}

#[test]
fn one_step_moves_exactly_the_parameters_with_gradient() {
    let (head, mut store, data) = micro_setup();
    let before = store.clone();
    let cfg = TrainConfig {
        batch_size: data.len(),
        min_keep_patches: Some(4),
        ..micro_train_config(1)
    };
    train(&head, &mut store, &data, &cfg, None).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(store.iter()) {
        let changed = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        if name.contains(".k.bias") {
            // shift-invariant softmax: gradient is rounding noise at most
            continue;
        }
        assert!(changed > 0, "{name} did not move");
    }
}
