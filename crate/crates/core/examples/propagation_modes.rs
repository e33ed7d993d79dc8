//! The three propagation modes on one run: matrix-free HVPs, dense
//! propagators, and the layer-wise block approximation.

use std::time::Instant;

use aatrace::attribution::{relative_gap, Attributor, Direction, PropagationMode};
use aatrace::model::{Activation, Dataset, ModelSpec, PerformanceKind, Task};
use aatrace::scenarios::{correlation, gen_gaussian_classes, CorrelationKind};
use aatrace::training::{train, BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![3, 10, 6, 3], Activation::Tanh, Task::Classification)?;
    let data = Dataset::new(gen_gaussian_classes(4, 200, 3, 3, 3.0)?);
    let log = train(&spec, &data, &HyperSchedule::constant(30, 0.05, 0.9, 0.0)?, &BatchPlan::shuffled(200, 20, 30, 1)?, 8)?;
    let test = gen_gaussian_classes(5, 40, 3, 3, 3.0)?;
    println!("p = {}, K = {}", log.param_count(), log.num_steps());

    let mut reference: Option<Vec<f64>> = None;
    for mode in [PropagationMode::ExplicitMatrix, PropagationMode::HvpVector, PropagationMode::LayerwiseBlock] {
        let attributor = Attributor::new(&log, &data, mode)?;
        let t0 = Instant::now();
        let res = attributor.attribute(&test, PerformanceKind::LogLikelihood, &[], Direction::Adjoint)?;
        let flat: Vec<f64> = res.per_step_scores.concat();
        let (gap, corr) = match &reference {
            Some(r) => (relative_gap(r, &flat), correlation(r, &flat, CorrelationKind::Pearson)?),
            None => (0.0, 1.0),
        };
        println!(
            "{mode:<16} {:>7.1} ms  hvps {:>6}  vs dense: gap {gap:.2e}, pearson {corr:.4}",
            t0.elapsed().as_secs_f64() * 1e3,
            res.hvp_count
        );
        reference.get_or_insert(flat);
    }
    Ok(())
}
