//! A three-stage pipeline: attribute each stage, then skip it for real and
//! compare.

use aatrace::attribution::{aa_score, final_perf_grads, Attributor, PropagationMode, StageSpec};
use aatrace::counterfactual::{skip_stage_from_log, true_effect, PipelineSpec, PipelineStage};
use aatrace::model::{Activation, Dataset, ModelSpec, PerformanceKind, Task};
use aatrace::scenarios::{apply_feature_transform, correlation, gen_gaussian_classes, CorrelationKind, FeatureTransform};
use aatrace::training::{BatchPlan, HyperSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![2, 8, 3], Activation::Tanh, Task::Classification)?;
    let mut stages = Vec::new();
    for (i, (deg, steps)) in [(0.0, 40), (45.0, 40), (90.0, 40)].into_iter().enumerate() {
        let pts = apply_feature_transform(&gen_gaussian_classes(i as u64, 200, 2, 3, 4.0)?, &FeatureTransform::RotationDeg(deg))?;
        stages.push(PipelineStage {
            name: format!("rot{deg}"),
            plan: BatchPlan::shuffled(pts.len(), 16, steps, 100 + i as u64)?,
            dataset: Dataset::new(pts),
            schedule: HyperSchedule::constant(steps, 0.01, 0.5, 5e-4)?,
        });
    }
    let pipeline = PipelineSpec { model: spec, stages };
    let log = pipeline.train(0)?;
    let (data, _, _) = pipeline.flatten();
    let attributor = Attributor::new(&log, &data, PropagationMode::HvpVector)?;

    let test = apply_feature_transform(&gen_gaussian_classes(50, 200, 2, 3, 4.0)?, &FeatureTransform::RotationDeg(45.0))?;
    let perf = PerformanceKind::LogLikelihood;
    let grads = final_perf_grads(&log, &test, perf)?;
    let step_scores: Vec<Vec<f64>> = grads.iter().map(|(_, g)| attributor.adjoint_step_scores(g)).collect::<Result<_, _>>()?;

    println!("{:<8} {:>10} {:>10} {:>10} {:>8}", "stage", "additive", "joint", "oracle", "pearson");
    for (i, r) in pipeline.stage_ranges().into_iter().enumerate() {
        let stage = StageSpec::range(r.start, r.end)?;
        let additive: Vec<f64> = step_scores.iter().map(|s| s[r.clone()].iter().sum()).collect();
        let joint_e = attributor.stage_state_effect(&stage)?;
        let joint: Vec<f64> = grads.iter().map(|(_, g)| aa_score(&joint_e.theta, g)).collect::<Result<_, _>>()?;
        let cf = skip_stage_from_log(&pipeline, &log, i)?;
        let oracle = true_effect(&log, &cf, &test, perf)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:<8} {:>+10.4} {:>+10.4} {:>+10.4} {:>8.4}",
            pipeline.stages[i].name,
            mean(&additive),
            mean(&joint),
            mean(&oracle),
            correlation(&additive, &oracle, CorrelationKind::Pearson)?
        );
    }
    Ok(())
}
