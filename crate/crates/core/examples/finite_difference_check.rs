//! Check a propagated effect against central differences of the scaled
//! update, and watch the difference shrink quadratically in h.

use aatrace::attribution::{Attributor, PropagationMode};
use aatrace::counterfactual::epsilon_fd_check;
use aatrace::model::{Activation, Dataset, ModelSpec, Task};
use aatrace::scenarios::gen_gaussian_classes;
use aatrace::training::{train, BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![2, 5, 3], Activation::Softplus, Task::Classification)?;
    let data = Dataset::new(gen_gaussian_classes(6, 90, 2, 3, 3.0)?);
    let log = train(&spec, &data, &HyperSchedule::constant(25, 0.1, 0.9, 1e-3)?, &BatchPlan::shuffled(90, 10, 25, 4)?, 2)?;
    let attributor = Attributor::new(&log, &data, PropagationMode::HvpVector)?;

    let t = 5;
    let w = attributor.final_state_effect(t)?;
    println!("step {t}, |w| = {:.4e}", w.norm());
    let mut prev = None;
    for h in [1e-3, 5e-4, 2.5e-4, 1.25e-4] {
        let fd = epsilon_fd_check(&log, &data, t, h)?;
        let err = fd.max_abs_diff(&w);
        let ratio = prev.map_or(String::new(), |p: f64| format!("  ratio {:.2}", p / err));
        println!("h = {h:.3e}  max |fd - w| = {err:.3e}{ratio}");
        prev = Some(err);
    }
    Ok(())
}
