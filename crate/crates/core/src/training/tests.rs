use super::*;
use crate::model::{Activation, Task, TestPoint};

fn scalar_spec() -> ModelSpec {
    ModelSpec::new(vec![1, 1], Activation::Identity, Task::Regression)
        .unwrap()
        .without_bias()
}

fn small_mlp() -> (ModelSpec, Dataset) {
    let spec = ModelSpec::new(vec![3, 4, 2], Activation::Tanh, Task::Classification).unwrap();
    let data = (0..12)
        .map(|i| {
            let f = i as f64;
            TestPoint::class(vec![(f * 0.7).sin(), (f * 1.3).cos(), f / 12.0 - 0.5], i % 2)
        })
        .collect::<Vec<_>>();
    (spec, Dataset::new(data))
}

fn small_run() -> (ModelSpec, Dataset, TrajectoryLog) {
    let (spec, data) = small_mlp();
    let schedule = HyperSchedule::step_decay(9, 0.3, 0.5, 4, 0.9, 0.01).unwrap();
    let plan = BatchPlan::shuffled(data.len(), 4, 9, 3).unwrap();
    let log = train(&spec, &data, &schedule, &plan, 5).unwrap();
    (spec, data, log)
}

fn state(theta: f64, v: f64) -> State {
    State {
        theta: vec![theta].into(),
        velocity: vec![v].into(),
    }
}

#[test]
fn sgd_step_substitutions() {
    let s = state(1.0, 0.0);
    let a = sgd_step(&s, &[2.0], 0.1, 0.9, 0.0).unwrap();
    assert_eq!(a.velocity[0], 2.0);
    assert!((a.theta[0] - 0.8).abs() < 1e-15);

    let b = sgd_step(&s, &[2.0], 0.1, 0.0, 0.5).unwrap();
    assert_eq!(b.velocity[0], 2.5);
    assert!((b.theta[0] - 0.75).abs() < 1e-15);

    let c = sgd_step(&state(1.0, 3.0), &[2.0], 0.0, 0.5, 0.0).unwrap();
    assert_eq!(c.theta[0], 1.0);
    assert_eq!(c.velocity[0], 3.5);
    assert_eq!(s, state(1.0, 0.0));
}

#[test]
fn sgd_step_rejects_non_finite_gradient() {
    let err = sgd_step(&state(1.0, 0.0), &[f64::NAN], 0.1, 0.0, 0.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(sgd_step(&state(1.0, 0.0), &[1.0, 2.0], 0.1, 0.0, 0.0).is_err());
}

#[test]
fn zero_horizon_keeps_only_initial_state() {
    let (spec, data) = small_mlp();
    let schedule = HyperSchedule::constant(0, 0.1, 0.0, 0.0).unwrap();
    let log = train(&spec, &data, &schedule, &BatchPlan::default(), 1).unwrap();
    assert_eq!(log.states.len(), 1);
    assert!(log.steps.is_empty());
    assert!(log.velocity(0).iter().all(|&v| v == 0.0));
}

#[test]
fn one_step_on_half_square() {
    let spec = scalar_spec();
    let data = Dataset::new(vec![TestPoint::regression(vec![1.0], vec![0.0])]);
    let schedule = HyperSchedule::constant(1, 0.1, 0.0, 0.0).unwrap();
    let plan = BatchPlan(vec![vec![0]]);
    let log = train_from(&spec, &data, &schedule, &plan, vec![1.0].into(), 0).unwrap();
    assert!((log.theta(1)[0] - 0.9).abs() < 1e-15);
    assert_eq!(log.steps[0].loss, 0.5);
}

#[test]
fn training_is_deterministic_and_replayable() {
    let (spec, data, log) = small_run();
    let again = train(&spec, &data, &log.schedule, &log.batches, 5).unwrap();
    assert!(log.bitwise_eq(&again));
    assert_eq!(log.fingerprint(), again.fingerprint());
    verify_replay(&log, &data).unwrap();
}

#[test]
fn replay_detects_tampering() {
    let (_, data, mut log) = small_run();
    log.states[4].theta[0] += 1e-12;
    assert!(matches!(verify_replay(&log, &data), Err(Error::FingerprintMismatch(_))));
}

#[test]
fn plain_gradient_descent_without_momentum_or_decay() {
    let (spec, data) = small_mlp();
    let schedule = HyperSchedule::constant(6, 0.2, 0.0, 0.0).unwrap();
    let plan = BatchPlan::sequential(data.len(), 5, 6).unwrap();
    let log = train(&spec, &data, &schedule, &plan, 2).unwrap();
    for k in 0..6 {
        let (_, g) = loss_grad(&spec, log.theta(k), data.select(plan.batch(k)).unwrap()).unwrap();
        for i in 0..g.len() {
            assert_eq!(log.theta(k + 1)[i], log.theta(k)[i] - 0.2 * g[i]);
        }
    }
}

#[test]
fn velocity_recurrence_holds_on_logged_steps() {
    let (spec, data, log) = small_run();
    for k in 0..log.num_steps() {
        let (_, g) = loss_grad(&spec, log.theta(k), data.select(log.batches.batch(k)).unwrap()).unwrap();
        let (mu, lam) = (log.schedule.momentum[k], log.schedule.weight_decay[k]);
        for i in 0..g.len() {
            let expect = mu * log.velocity(k)[i] + g[i] + lam * log.theta(k)[i];
            assert!((log.velocity(k + 1)[i] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn loss_is_monotone_on_convex_quadratic() {
    let spec = ModelSpec::new(vec![2, 1], Activation::Identity, Task::Regression)
        .unwrap()
        .without_bias();
    let data = Dataset::new(vec![
        TestPoint::regression(vec![2.0, 0.5], vec![1.0]),
        TestPoint::regression(vec![-0.3, 1.0], vec![-2.0]),
    ]);
    // λ_max of the mean Hessian is below 2.5 here, so η = 0.5 is stable.
    let schedule = HyperSchedule::constant(40, 0.5, 0.0, 0.0).unwrap();
    let plan = BatchPlan(vec![vec![0, 1]; 40]);
    let log = train_from(&spec, &data, &schedule, &plan, vec![3.0, -4.0].into(), 0).unwrap();
    for w in log.steps.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{} > {}", w[1].loss, w[0].loss);
    }
}

#[test]
fn schedule_and_plan_validation() {
    assert!(HyperSchedule::constant(3, -0.1, 0.0, 0.0).is_err());
    assert!(HyperSchedule::constant(3, 0.1, 1.0, 0.0).is_err());
    assert!(HyperSchedule::constant(3, 0.1, 0.0, -1.0).is_err());
    assert!(HyperSchedule::new(vec![0.1; 3], vec![0.0; 2], vec![0.0; 3]).is_err());
    let s = HyperSchedule::step_decay(5, 1.0, 0.1, 2, 0.0, 0.0).unwrap();
    assert_eq!(s.lr[..4], [1.0, 1.0, 0.1, 0.1]);

    assert!(BatchPlan(vec![vec![]]).validate(3).is_err());
    assert!(BatchPlan(vec![vec![3]]).validate(3).is_err());
    let (spec, data) = small_mlp();
    let schedule = HyperSchedule::constant(2, 0.1, 0.0, 0.0).unwrap();
    assert!(train(&spec, &data, &schedule, &BatchPlan(vec![vec![0]]), 0).is_err());
}

#[test]
fn shuffled_plans_cover_each_epoch_once() {
    let plan = BatchPlan::shuffled(10, 5, 4, 9).unwrap();
    assert_eq!(plan, BatchPlan::shuffled(10, 5, 4, 9).unwrap());
    let mut first: Vec<usize> = plan.0[..2].concat();
    first.sort_unstable();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
}

mod storage_tests {
    use super::*;
    use std::fs;

    #[test]
    fn roundtrip_is_bit_exact() {
        let (_, _, log) = small_run();
        let dir = tempfile::tempdir().unwrap();
        save_log(&log, dir.path()).unwrap();
        let back = load_log(dir.path()).unwrap();
        assert!(log.bitwise_eq(&back));
    }

    #[test]
    fn corrupted_state_byte_fails_checksum() {
        let (_, _, log) = small_run();
        let dir = tempfile::tempdir().unwrap();
        save_log(&log, dir.path()).unwrap();
        let path = dir.path().join("states.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_log(dir.path()), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn truncated_state_file_is_reported() {
        let (_, _, log) = small_run();
        let dir = tempfile::tempdir().unwrap();
        save_log(&log, dir.path()).unwrap();
        let path = dir.path().join("states.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_log(dir.path()), Err(Error::Truncated { .. })));
    }

    #[test]
    fn future_version_is_rejected() {
        let (_, _, log) = small_run();
        let dir = tempfile::tempdir().unwrap();
        save_log(&log, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        fs::write(&path, m.to_string()).unwrap();
        assert!(matches!(
            load_log(dir.path()),
            Err(Error::UnsupportedVersion { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn manifest_records_sizes() {
        let (_, _, log) = small_run();
        let dir = tempfile::tempdir().unwrap();
        save_log(&log, dir.path()).unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["K"], 9);
        assert_eq!(m["p"], log.param_count());
        assert_eq!(m["states_sha256"].as_str().unwrap().len(), 64);
    }
}
