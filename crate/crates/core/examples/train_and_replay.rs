//! Train a small classifier, write the trajectory log, read it back and
//! replay it bit for bit.

use aatrace::model::{accuracy, Activation, Dataset, ModelSpec, Task};
use aatrace::scenarios::gen_gaussian_classes;
use aatrace::training::{load_log, save_log, train, verify_replay, BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![2, 8, 3], Activation::Tanh, Task::Classification)?;
    let data = Dataset::new(gen_gaussian_classes(1, 300, 2, 3, 4.0)?);
    let schedule = HyperSchedule::step_decay(80, 0.1, 0.5, 40, 0.9, 5e-4)?;
    let plan = BatchPlan::shuffled(data.len(), 16, 80, 7)?;

    let log = train(&spec, &data, &schedule, &plan, 42)?;
    for s in log.steps.iter().step_by(20) {
        println!("step {:>3}  lr {:.3}  loss {:.4}  |g| {:.4}", s.k, s.lr, s.loss, s.grad_norm);
    }
    println!("train accuracy {:.3}", accuracy(&spec, log.final_theta(), data.points())?);

    let dir = std::env::temp_dir().join("aatrace-train-example");
    save_log(&log, &dir)?;
    let back = load_log(&dir)?;
    assert!(back.bitwise_eq(&log));
    verify_replay(&back, &data)?;
    println!("log {} ({} steps, p = {}) reloads and replays exactly", back.fingerprint(), back.num_steps(), back.param_count());
    Ok(())
}
