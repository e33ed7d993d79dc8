use aatrace::attribution::{final_perf_grads, Attributor, PropagationMode};
use aatrace::counterfactual::{skip_steps_from_log, true_effect};
use aatrace::model::{Activation, Dataset, ModelSpec, PerformanceKind, Task, TestPoint};
use aatrace::scenarios::gen_gaussian_classes;
use aatrace::training::{train, BatchPlan, HyperSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn estimated_step_scores_share_the_sign_of_true_effects() {
    let data = Dataset::new(gen_gaussian_classes(5, 80, 3, 3, 2.5).unwrap());
    let spec = ModelSpec::new(vec![3, 10, 3], Activation::Tanh, Task::Classification).unwrap();
    let k = 60;
    let schedule = HyperSchedule::constant(k, 0.05, 0.5, 1e-3).unwrap();
    let plan = BatchPlan::shuffled(80, 10, k, 5).unwrap();
    let log = train(&spec, &data, &schedule, &plan, 5).unwrap();
    let probe = [TestPoint::class(vec![0.3, -0.8, 0.5], 1)];

    let attributor = Attributor::new(&log, &data, PropagationMode::HvpVector).unwrap();
    let (_, g) = &final_perf_grads(&log, &probe, PerformanceKind::LogLikelihood).unwrap()[0];
    let scores = attributor.adjoint_step_scores(g).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sampled: Vec<usize> = (0..40).map(|_| rng.random_range(0..k)).collect();
    let agree = sampled
        .iter()
        .filter(|&&t| {
            let cf = skip_steps_from_log(&log, &data, &[t]).unwrap();
            let tau = true_effect(&log, &cf, &probe, PerformanceKind::LogLikelihood).unwrap()[0];
            tau.signum() == scores[t].signum()
        })
        .count();
    assert!(agree as f64 >= 0.9 * sampled.len() as f64, "{agree}/{}", sampled.len());
}
