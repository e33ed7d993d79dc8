//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the
//! measured value and its pinned tolerance, then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use aatrace::attribution::{aa_score, error_bound, estimate_bound_constants, relative_gap, Attributor, Direction, ErrorBoundInputs, PropagationMode, StageSpec};
use aatrace::counterfactual::{epsilon_fd_check, retrain_skip_steps};
use aatrace::model::{Activation, Dataset, ModelSpec, PerformanceKind, Target, Task, TestPoint};
use aatrace::scenarios::{run_scenario, EvaluationReport, ScenarioConfig};
use aatrace::training::{load_log, save_log, train, BatchPlan, HyperSchedule, TrajectoryLog};
use aatrace::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("{} criterion {id} ({name}): {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

struct Quadratic {
    data: Dataset,
    log: TrajectoryLog,
    probe: TestPoint,
    d_in: usize,
    d_out: usize,
}

/// Linear regression without bias: the loss is quadratic in θ and the first
/// output is linear in θ.
fn quadratic(seed: u64) -> Quadratic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(2..=5);
    let d_out = rng.random_range(1..=4);
    let k = rng.random_range(5..=50);
    let momentum = if rng.random_bool(0.5) { 0.0 } else { 0.9 };
    let decay = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    let spec = ModelSpec::new(vec![d_in, d_out], Activation::Identity, Task::Regression).unwrap().without_bias();
    assert!(spec.param_count() <= 20);
    let n = 12;
    let data = Dataset::new(
        (0..n)
            .map(|_| {
                TestPoint::regression(
                    (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect(),
    );
    let schedule = HyperSchedule::constant(k, rng.random_range(0.05..0.3), momentum, decay).unwrap();
    let plan = BatchPlan::shuffled(n, 3, k, seed).unwrap();
    let log = train(&spec, &data, &schedule, &plan, seed).unwrap();
    let probe = TestPoint::regression((0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![0.0; d_out]);
    Quadratic { data, log, probe, d_in, d_out }
}

impl Quadratic {
    /// Gradient of the first model output, which is `γ` itself.
    fn perf_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.d_in * self.d_out];
        g[..self.d_in].copy_from_slice(&self.probe.x);
        g
    }

    /// Independent replay of the optimizer with the steps in `skip` omitted.
    fn final_theta_without(&self, skip: &[usize]) -> Vec<f64> {
        let log = &self.log;
        let (di, dout) = (self.d_in, self.d_out);
        let mut theta = log.theta(0).to_vec();
        let mut v = vec![0.0; theta.len()];
        for k in 0..log.num_steps() {
            if skip.contains(&k) {
                continue;
            }
            let batch = log.batches.batch(k);
            let mut g = vec![0.0; theta.len()];
            for &i in batch {
                let pt = &self.data.points()[i];
                let Target::Values(y) = &pt.y else { unreachable!() };
                for o in 0..dout {
                    let r: f64 = (0..di).map(|j| theta[o * di + j] * pt.x[j]).sum::<f64>() - y[o];
                    for j in 0..di {
                        g[o * di + j] += r * pt.x[j] / batch.len() as f64;
                    }
                }
            }
            let (eta, mu, lam) = (log.schedule.lr[k], log.schedule.momentum[k], log.schedule.weight_decay[k]);
            for i in 0..theta.len() {
                v[i] = mu * v[i] + g[i] + lam * theta[i];
                theta[i] -= eta * v[i];
            }
        }
        theta
    }

    fn true_effect(&self, skip: &[usize]) -> f64 {
        let g = self.perf_grad();
        let cf = self.final_theta_without(skip);
        self.log.final_theta().iter().zip(&cf).zip(&g).map(|((a, b), g)| g * (a - b)).sum()
    }

    fn random_stages(&self, rng: &mut ChaCha8Rng) -> Vec<StageSpec> {
        let k = self.log.num_steps();
        let mut all: Vec<usize> = (0..k).collect();
        all.shuffle(rng);
        let size = rng.random_range(2..=k.min(10));
        let a = rng.random_range(0..k - 1);
        let b = rng.random_range(a + 1..=k);
        vec![
            StageSpec::new(all[..size].to_vec()).unwrap(),
            StageSpec::range(a, b).unwrap(),
            StageSpec::range(0, k).unwrap(),
        ]
    }
}

fn quadratics() -> &'static Vec<Quadratic> {
    static CELL: OnceLock<Vec<Quadratic>> = OnceLock::new();
    CELL.get_or_init(|| (0..20).map(|s| quadratic(1000 + s)).collect())
}

struct Mlp {
    data: Dataset,
    log: TrajectoryLog,
    tests: Vec<TestPoint>,
}

fn mlp(seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(2..=5);
    let classes = rng.random_range(2..=4);
    let mut sizes = vec![d_in];
    for _ in 0..rng.random_range(1..=2) {
        sizes.push(rng.random_range(3..=10));
    }
    sizes.push(classes);
    let act = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Softplus };
    let spec = ModelSpec::new(sizes, act, Task::Classification).unwrap();
    assert!(spec.param_count() <= 200);
    let point = |rng: &mut ChaCha8Rng| TestPoint::class((0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect(), rng.random_range(0..classes));
    let data = Dataset::new((0..24).map(|_| point(&mut rng)).collect());
    let tests = (0..5).map(|_| point(&mut rng)).collect();
    let k = rng.random_range(5..=30);
    let momentum = if rng.random_bool(0.5) { 0.0 } else { 0.9 };
    let decay = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
    let schedule = HyperSchedule::constant(k, rng.random_range(0.05..0.2), momentum, decay).unwrap();
    let plan = BatchPlan::shuffled(24, 6, k, seed).unwrap();
    let log = train(&spec, &data, &schedule, &plan, seed).unwrap();
    Mlp { data, log, tests }
}

fn mlps() -> &'static Vec<Mlp> {
    static CELL: OnceLock<Vec<Mlp>> = OnceLock::new();
    CELL.get_or_init(|| (0..10).map(|s| mlp(2000 + s)).collect())
}

#[test]
fn criterion_1_quadratic_exactness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for q in quadratics() {
        let a = Attributor::new(&q.log, &q.data, PropagationMode::HvpVector).unwrap();
        let g = q.perf_grad();
        let scores = a.adjoint_step_scores(&g).unwrap();
        let mut rel = |est: f64, truth: f64| {
            worst = worst.max((est - truth).abs() / truth.abs().max(1e-12));
            checked += 1;
        };
        for (t, &s) in scores.iter().enumerate() {
            rel(s, q.true_effect(&[t]));
        }
        for stage in q.random_stages(&mut rng) {
            let e = a.stage_state_effect(&stage).unwrap();
            rel(aa_score(&e.theta, &g).unwrap(), q.true_effect(stage.steps()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-8 && secs < 30.0;
    verdict(1, "quadratic exactness", pass, format!("max relative error {worst:.3e} over {checked} steps and stages (tol 1e-8), {secs:.2}s (limit 30s)"));
    assert!(pass);
}

#[test]
fn criterion_2_base_case_exactness() {
    let mut worst: f64 = 0.0;
    let mut check = |data: &Dataset, log: &TrajectoryLog| {
        let k = log.num_steps();
        let a = Attributor::new(log, data, PropagationMode::HvpVector).unwrap();
        let w = a.final_state_effect(k - 1).unwrap();
        let skipped = retrain_skip_steps(&log.model_spec, data, &log.schedule, &log.batches, log.seed, &[k - 1]).unwrap();
        for (i, &wi) in w.theta.iter().enumerate() {
            worst = worst.max((wi - (log.theta(k)[i] - skipped.theta(k)[i])).abs());
            worst = worst.max((wi - (log.theta(k)[i] - log.theta(k - 1)[i])).abs());
        }
        for (i, &wi) in w.velocity.iter().enumerate() {
            worst = worst.max((wi - (log.velocity(k)[i] - skipped.velocity(k)[i])).abs());
        }
    };
    for q in quadratics() {
        check(&q.data, &q.log);
    }
    for m in mlps() {
        check(&m.data, &m.log);
    }
    let pass = worst <= 1e-12;
    verdict(2, "base-case exactness", pass, format!("max abs deviation {worst:.3e} at t = K-1 on 30 instances (tol 1e-12)"));
    assert!(pass);
}

#[test]
fn criterion_3_dense_oracle_equivalence() {
    let mut worst: f64 = 0.0;
    let mut max_p = 0;
    for m in mlps() {
        max_p = max_p.max(m.log.param_count());
        let hvp = Attributor::new(&m.log, &m.data, PropagationMode::HvpVector).unwrap();
        let dense = Attributor::new(&m.log, &m.data, PropagationMode::ExplicitMatrix).unwrap();
        for t in 0..m.log.num_steps() {
            let a = hvp.final_state_effect(t).unwrap();
            let b = dense.final_state_effect(t).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    let pass = worst <= 1e-10;
    verdict(3, "dense-oracle equivalence", pass, format!("max abs difference {worst:.3e} over all steps of 10 MLPs, p <= {max_p} (tol 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_4_forward_adjoint_duality() {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    let mut compare = |data: &Dataset, log: &TrajectoryLog, points: &[TestPoint], perf: PerformanceKind, mode: PropagationMode| {
        let a = Attributor::new(log, data, mode).unwrap();
        let f = a.attribute(points, perf, &[], Direction::Forward).unwrap();
        let b = a.attribute(points, perf, &[], Direction::Adjoint).unwrap();
        for i in 0..points.len() {
            worst = worst.max(relative_gap(&f.point_scores(i), &b.point_scores(i)));
        }
        runs += 1;
    };
    for q in quadratics() {
        compare(&q.data, &q.log, std::slice::from_ref(&q.probe), PerformanceKind::Output, PropagationMode::HvpVector);
    }
    for m in mlps() {
        for mode in [PropagationMode::HvpVector, PropagationMode::ExplicitMatrix, PropagationMode::LayerwiseBlock] {
            compare(&m.data, &m.log, &m.tests, PerformanceKind::LogLikelihood, mode);
        }
    }
    let pass = worst <= 1e-10;
    verdict(4, "forward/adjoint duality", pass, format!("max relative gap {worst:.3e} over {runs} instance/mode runs (tol 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_5_epsilon_finite_difference() {
    let mut worst_rel: f64 = 0.0;
    let (mut min_ratio, mut max_ratio) = (f64::INFINITY, 0.0f64);
    for m in mlps().iter().take(5) {
        let a = Attributor::new(&m.log, &m.data, PropagationMode::HvpVector).unwrap();
        let k = m.log.num_steps();
        for t in [0, k / 2, k - 2] {
            let w = a.final_state_effect(t).unwrap();
            let scale = w.theta.iter().chain(&w.velocity).fold(0.0f64, |s, x| s.max(x.abs()));
            let fd = epsilon_fd_check(&m.log, &m.data, t, 1e-5).unwrap();
            worst_rel = worst_rel.max(fd.max_abs_diff(&w) / scale);
            let e1 = epsilon_fd_check(&m.log, &m.data, t, 1e-3).unwrap().max_abs_diff(&w);
            let e2 = epsilon_fd_check(&m.log, &m.data, t, 5e-4).unwrap().max_abs_diff(&w);
            if e1 > 1e3 * f64::EPSILON * scale {
                let r = e1 / e2;
                min_ratio = min_ratio.min(r);
                max_ratio = max_ratio.max(r);
            }
        }
    }
    let pass = worst_rel <= 1e-4 && (3.5..=4.5).contains(&min_ratio) && (3.5..=4.5).contains(&max_ratio);
    verdict(
        5,
        "epsilon finite-difference",
        pass,
        format!("max relative error {worst_rel:.3e} at h=1e-5 (tol 1e-4); error ratio h=1e-3 vs 5e-4 in [{min_ratio:.3}, {max_ratio:.3}] (want [3.5, 4.5])"),
    );
    assert!(pass);
}

fn bundled(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(format!("{}/configs/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn reports() -> &'static Vec<(String, EvaluationReport)> {
    static CELL: OnceLock<Vec<(String, EvaluationReport)>> = OnceLock::new();
    CELL.get_or_init(|| {
        ["insert_point", "mislabel_stage", "distribution_shift", "optimizer_lr", "optimizer_momentum"]
            .iter()
            .map(|n| (n.to_string(), run_scenario(&bundled(n)).unwrap()))
            .collect()
    })
}

fn report(name: &str) -> &'static EvaluationReport {
    &reports().iter().find(|(n, _)| n == name).expect("bundled scenario").1
}

#[test]
fn criterion_6_scenario_correlations() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["insert_point", "mislabel_stage", "distribution_shift"] {
        let r = report(name);
        let size = r.units[0].oracle.len();
        pass &= r.min_pearson >= 0.85 && size == 200;
        parts.push(format!("{name} {:.4}", r.min_pearson));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 600.0;
    verdict(6, "scenario correlations", pass, format!("min per-unit pearson: {} (tol >= 0.85, 200 test points), {secs:.1}s (limit 600s)", parts.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_7_qualitative_reproductions() {
    let check = |name: &str, key: &str| report(name).checks.get(key).copied().unwrap_or(false);
    let a = check("insert_point", "inserted_step_is_max");
    let b = check("mislabel_stage", "mislabeled_mean_negative");
    let c = (1..=3).all(|i| check("distribution_shift", &format!("stage_{i}_max_on_dist_{i}")));
    let d_lr = check("optimizer_lr", "stage2_mean_abs_below_baseline");
    let d_mom = check("optimizer_momentum", "stage2_mean_abs_below_baseline");
    let lr = bundled("optimizer_lr");
    let tenfold = matches!(lr.scenario, aatrace::scenarios::ScenarioSpec::OptimizerStage { stage2_lr: Some(s), .. } if (lr.training.lr / s - 10.0).abs() < 1e-9);
    let pass = a && b && c && d_lr && d_mom && tenfold;
    verdict(
        7,
        "qualitative reproductions",
        pass,
        format!("(a) insert max {a}, (b) mislabel negative {b}, (c) shift in-distribution max {c}, (d) 10x lr {}, momentum {d_mom}", d_lr && tenfold),
    );
    assert!(pass);
}

#[test]
fn criterion_8_error_bound_sanity() {
    let base = ErrorBoundInputs {
        hessian_lipschitz: 1.0,
        stability: 1.0,
        eta_max: 0.1,
        grad_bound: 1.0,
        hess_bound: 0.5,
        d_s: 0.1,
        k: 10,
        min_s: 4,
    };
    let zero = error_bound(&ErrorBoundInputs {
        hessian_lipschitz: 0.0,
        hess_bound: 0.0,
        ..base.clone()
    })
    .unwrap();

    let b0 = error_bound(&base).unwrap();
    let bumps: Vec<ErrorBoundInputs> = vec![
        ErrorBoundInputs { hessian_lipschitz: 2.0, ..base.clone() },
        ErrorBoundInputs { stability: 2.0, ..base.clone() },
        ErrorBoundInputs { eta_max: 0.2, ..base.clone() },
        ErrorBoundInputs { grad_bound: 2.0, ..base.clone() },
        ErrorBoundInputs { hess_bound: 1.0, ..base.clone() },
        ErrorBoundInputs { d_s: 0.2, ..base.clone() },
        ErrorBoundInputs { k: 12, ..base.clone() },
        ErrorBoundInputs { min_s: 2, ..base.clone() },
    ];
    let monotone = bumps.iter().all(|b| error_bound(b).unwrap() >= b0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut max_err: f64 = 0.0;
    let mut max_bound: f64 = 0.0;
    for q in quadratics() {
        let a = Attributor::new(&q.log, &q.data, PropagationMode::HvpVector).unwrap();
        let g = q.perf_grad();
        let scores = a.adjoint_step_scores(&g).unwrap();
        let k = q.log.num_steps();
        let mut stages: Vec<(StageSpec, f64)> = [0, k / 2, k - 1].iter().map(|&t| (StageSpec::single(t), scores[t])).collect();
        for s in q.random_stages(&mut rng) {
            let est = aa_score(&a.stage_state_effect(&s).unwrap().theta, &g).unwrap();
            stages.push((s, est));
        }
        for (stage, est) in stages {
            let consts = estimate_bound_constants(&q.log, &q.data, std::slice::from_ref(&q.probe), PerformanceKind::Output, &stage, 8, 3).unwrap();
            let bound = error_bound(&consts).unwrap();
            let truth = q.true_effect(stage.steps());
            let err = (truth - est).abs();
            max_err = max_err.max(err);
            max_bound = max_bound.max(bound);
            worst_excess = worst_excess.max(err - bound - 1e-12 * truth.abs().max(1.0));
        }
    }
    let pass = zero == 0.0 && monotone && worst_excess <= 0.0;
    verdict(
        8,
        "error-bound sanity",
        pass,
        format!(
            "bound(L=0,G2=0) = {zero}, monotone {monotone}; quadratic runs: max |tau - est| {max_err:.3e}, max bound {max_bound:.3e}, roundoff allowance 1e-12*max(|tau|,1)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism_and_integrity() {
    let q = &quadratics()[3];
    let m = &mlps()[0];
    let dir = tempfile::tempdir().unwrap();
    let again = train(&m.log.model_spec, &m.data, &m.log.schedule, &m.log.batches, m.log.seed).unwrap();
    save_log(&m.log, dir.path().join("a")).unwrap();
    save_log(&again, dir.path().join("b")).unwrap();
    let read = |p: &str| std::fs::read(dir.path().join(p).join("states.bin")).unwrap();
    let identical = read("a") == read("b");

    let back = load_log(dir.path().join("a")).unwrap();
    let roundtrip = back.bitwise_eq(&m.log);
    save_log(&q.log, dir.path().join("q")).unwrap();
    let roundtrip = roundtrip && load_log(dir.path().join("q")).unwrap().bitwise_eq(&q.log);

    let states = dir.path().join("b").join("states.bin");
    let mut bytes = std::fs::read(&states).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&states, &bytes).unwrap();
    let flipped = matches!(load_log(dir.path().join("b")), Err(Error::ChecksumMismatch { .. }));
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&states, &bytes).unwrap();
    let truncated = matches!(load_log(dir.path().join("b")), Err(Error::Truncated { .. }));

    let pass = identical && roundtrip && flipped && truncated;
    verdict(
        9,
        "determinism and integrity",
        pass,
        format!("identical states.bin {identical}, bit-exact roundtrip {roundtrip}, bit flip detected {flipped}, truncation detected {truncated}"),
    );
    assert!(pass);
}
