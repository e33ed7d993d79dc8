//! Score every training step on held-out points, forward and adjoint, and
//! reuse the cached per-step effect vectors for a new test set.

use aatrace::attribution::{final_perf_grads, forward_scores, load_effects, relative_gap, save_effects, Attributor, Direction, EffectTable, PropagationMode};
use aatrace::model::{Activation, Dataset, ModelSpec, PerformanceKind, Task};
use aatrace::scenarios::gen_gaussian_classes;
use aatrace::training::{train, BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![2, 8, 3], Activation::Tanh, Task::Classification)?;
    let data = Dataset::new(gen_gaussian_classes(1, 240, 2, 3, 4.0)?);
    let schedule = HyperSchedule::constant(50, 0.05, 0.9, 5e-4)?;
    let plan = BatchPlan::shuffled(data.len(), 16, 50, 2)?;
    let log = train(&spec, &data, &schedule, &plan, 0)?;
    let test = gen_gaussian_classes(9, 100, 2, 3, 4.0)?;
    let perf = PerformanceKind::LogLikelihood;

    let attributor = Attributor::new(&log, &data, PropagationMode::HvpVector)?;
    let fwd = attributor.attribute(&test, perf, &[], Direction::Forward)?;
    let after_forward = attributor.hvp_count();
    let adj = attributor.attribute(&test, perf, &[], Direction::Adjoint)?;
    println!("HVPs: forward {after_forward}, adjoint {}", attributor.hvp_count() - after_forward);

    let worst = (0..test.len())
        .map(|i| relative_gap(&fwd.point_scores(i), &adj.point_scores(i)))
        .fold(0.0, f64::max);
    println!("forward/adjoint max relative gap {worst:.2e}");

    let mean: Vec<f64> = fwd.per_step_scores.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]));
    println!("most helpful steps:  {:?}", &order[..5]);
    println!("most harmful steps:  {:?}", &order[order.len() - 5..]);

    let path = std::env::temp_dir().join("aatrace-step-example").join("effects.bin");
    save_effects(
        &EffectTable {
            log_fingerprint: log.fingerprint(),
            mode: PropagationMode::HvpVector,
            effects: attributor.all_step_effects()?,
        },
        &path,
    )?;
    let table = load_effects(&path)?;
    let fresh = gen_gaussian_classes(10, 50, 2, 3, 4.0)?;
    let scores = forward_scores(&table.effects, &final_perf_grads(&log, &fresh, perf)?)?;
    println!("scored {} new points from the cache, step 0 of point 0: {:+.3e}", scores.len(), scores[0][0]);
    Ok(())
}
