//! Leave-steps-out retraining: skip a block of updates, measure the true
//! change in test log-likelihood, and set it against the estimate.

use aatrace::attribution::{Attributor, Direction, PropagationMode, StageSpec};
use aatrace::counterfactual::{retrain_skip_steps, skip_steps_from_log, true_effect};
use aatrace::model::{Activation, Dataset, ModelSpec, PerformanceKind, Task};
use aatrace::scenarios::{correlation, gen_gaussian_classes, CorrelationKind};
use aatrace::training::{train, BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![2, 8, 3], Activation::Tanh, Task::Classification)?;
    let data = Dataset::new(gen_gaussian_classes(1, 300, 2, 3, 4.0)?);
    let schedule = HyperSchedule::constant(60, 0.02, 0.5, 5e-4)?;
    let plan = BatchPlan::shuffled(300, 16, 60, 5)?;
    let log = train(&spec, &data, &schedule, &plan, 3)?;
    let test = gen_gaussian_classes(2, 200, 2, 3, 4.0)?;
    let perf = PerformanceKind::LogLikelihood;

    let block: Vec<usize> = (20..26).collect();
    let fresh = retrain_skip_steps(&spec, &data, &schedule, &plan, 3, &block)?;
    let reused = skip_steps_from_log(&log, &data, &block)?;
    assert!(fresh.bitwise_eq(&reused));

    let oracle = true_effect(&log, &reused, &test, perf)?;
    let attributor = Attributor::new(&log, &data, PropagationMode::HvpVector)?;
    let res = attributor.attribute(&test, perf, &[("block".into(), StageSpec::new(block)?)], Direction::Adjoint)?;
    let est = &res.stage("block").expect("stage").scores;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean true effect {:+.4e}, mean estimate {:+.4e}", mean(&oracle), mean(est));
    println!("pearson {:.4}, spearman {:.4}", correlation(est, &oracle, CorrelationKind::Pearson)?, correlation(est, &oracle, CorrelationKind::Spearman)?);
    Ok(())
}
