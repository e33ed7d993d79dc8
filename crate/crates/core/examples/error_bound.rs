//! Estimate the error-bound constants for late single steps and compare the
//! bound with the measured estimation error.

use aatrace::attribution::{error_bound, estimate_bound_constants, Attributor, PropagationMode, StageSpec};
use aatrace::counterfactual::{skip_steps_from_log, true_effect};
use aatrace::model::{perf_value_grad, Activation, Dataset, ModelSpec, PerformanceKind, Task};
use aatrace::scenarios::gen_gaussian_classes;
use aatrace::training::{train, BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![2, 6, 2], Activation::Tanh, Task::Classification)?;
    let data = Dataset::new(gen_gaussian_classes(2, 120, 2, 2, 3.0)?);
    let log = train(&spec, &data, &HyperSchedule::constant(40, 0.02, 0.5, 0.0)?, &BatchPlan::shuffled(120, 12, 40, 3)?, 1)?;
    let test = gen_gaussian_classes(3, 1, 2, 2, 3.0)?;
    let perf = PerformanceKind::LogLikelihood;
    let attributor = Attributor::new(&log, &data, PropagationMode::HvpVector)?;
    let (_, grad) = perf_value_grad(&spec, log.final_theta(), &test[0], perf)?;
    let scores = attributor.adjoint_step_scores(&grad)?;

    println!("{:>4} {:>12} {:>12} {:>12}", "t", "|error|", "bound", "Lambda");
    for t in [39, 36, 30, 20] {
        let stage = StageSpec::single(t);
        let consts = estimate_bound_constants(&log, &data, &test, perf, &stage, 32, 7)?;
        let bound = error_bound(&consts)?;
        let cf = skip_steps_from_log(&log, &data, &[t])?;
        let truth = true_effect(&log, &cf, &test, perf)?[0];
        println!("{t:>4} {:>12.3e} {bound:>12.3e} {:>12.4}", (truth - scores[t]).abs(), consts.stability);
    }
    Ok(())
}
