//! Retraining oracles: rerun training with updates removed and measure the
//! true change in performance.
//!
//! Two protocols are supported. Step skipping keeps the step alignment of
//! batches and learning rates and freezes the whole state at skipped steps.
//! Stage skipping drops a pipeline stage entirely; the following stage starts
//! from the checkpoint before the skipped stage with a fresh velocity buffer
//! and its own schedule from its first step.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attribution::EffectVector;
use crate::error::{Error, Result};
use crate::model::{init_params, perf_value_grad, Dataset, ModelSpec, PerformanceKind, TestPoint};
use crate::training::{check_inputs, run_steps, train, BatchPlan, HyperSchedule, State, StepRecord, TrajectoryLog, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipProtocol {
    StepSkip,
    StageSkip,
}

fn normalize_skips(skip: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut s = skip.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&last) = s.last() {
        if last >= k {
            return Err(Error::OutOfRange {
                what: "skipped step",
                index: last,
                bound: k,
            });
        }
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn rerun(
    spec: &ModelSpec,
    dataset: &Dataset,
    schedule: &HyperSchedule,
    plan: &BatchPlan,
    seed: u64,
    mut states: Vec<State>,
    mut steps: Vec<StepRecord>,
    skip: Vec<usize>,
) -> Result<TrajectoryLog> {
    let start = steps.len();
    let from = states.pop().expect("at least the starting state");
    let (tail_states, tail_steps) = run_steps(spec, dataset, schedule, plan, from, start..plan.len(), |k| {
        skip.binary_search(&k).is_ok()
    })?;
    states.extend(tail_states);
    steps.extend(tail_steps);
    Ok(TrajectoryLog {
        format_version: FORMAT_VERSION,
        model_spec: spec.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        schedule: schedule.clone(),
        batches: plan.clone(),
        states,
        steps,
        seed,
        skipped_steps: (!skip.is_empty()).then_some(skip),
        skipped_stage: None,
    })
}

/// Trains from `init_params(spec, seed)` with the updates at `skip` omitted.
/// An empty `skip` reproduces [`train`] bit for bit.
pub fn retrain_skip_steps(
    spec: &ModelSpec,
    dataset: &Dataset,
    schedule: &HyperSchedule,
    plan: &BatchPlan,
    seed: u64,
    skip: &[usize],
) -> Result<TrajectoryLog> {
    check_inputs(spec, dataset, schedule, plan)?;
    let skip = normalize_skips(skip, plan.len())?;
    let theta0 = init_params(spec, seed)?;
    rerun(spec, dataset, schedule, plan, seed, vec![State::initial(theta0)], vec![], skip)
}

/// Step skipping against an observed log. The states before the first
/// skipped step are taken from the log instead of being recomputed.
pub fn skip_steps_from_log(observed: &TrajectoryLog, dataset: &Dataset, skip: &[usize]) -> Result<TrajectoryLog> {
    observed.check_dataset(dataset)?;
    let skip = normalize_skips(skip, observed.num_steps())?;
    let first = skip.first().copied().unwrap_or(observed.num_steps());
    rerun(
        &observed.model_spec,
        dataset,
        &observed.schedule,
        &observed.batches,
        observed.seed,
        observed.states[..=first].to_vec(),
        observed.steps[..first].to_vec(),
        skip,
    )
}

/// One development stage: its own data, schedule and batches. Batch indices
/// refer to the stage's dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStage {
    pub name: String,
    pub dataset: Dataset,
    pub schedule: HyperSchedule,
    pub plan: BatchPlan,
}

/// Ordered multi-stage development. Every stage starts with a fresh velocity
/// buffer, encoded as zero momentum on its first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub model: ModelSpec,
    pub stages: Vec<PipelineStage>,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        for s in &self.stages {
            check_inputs(&self.model, &s.dataset, &s.schedule, &s.plan)?;
        }
        Ok(())
    }

    /// Global step ranges of each stage.
    pub fn stage_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.stages
            .iter()
            .map(|s| {
                let r = start..start + s.plan.len();
                start = r.end;
                r
            })
            .collect()
    }

    /// Concatenated dataset, schedule (with velocity resets) and plan.
    pub fn flatten(&self) -> (Dataset, HyperSchedule, BatchPlan) {
        let data: Vec<TestPoint> = self.stages.iter().flat_map(|s| s.dataset.points().iter().cloned()).collect();
        let mut schedule = HyperSchedule::concat(self.stages.iter().map(|s| &s.schedule));
        for r in self.stage_ranges() {
            if !r.is_empty() {
                schedule.reset_velocity_at(r.start);
            }
        }
        let parts: Vec<(BatchPlan, usize)> = self.stages.iter().map(|s| (s.plan.clone(), s.dataset.len())).collect();
        (Dataset::new(data), schedule, BatchPlan::concat_offset(&parts))
    }

    pub fn without_stage(&self, index: usize) -> Result<PipelineSpec> {
        if index >= self.stages.len() {
            return Err(Error::OutOfRange {
                what: "stage",
                index,
                bound: self.stages.len(),
            });
        }
        let mut out = self.clone();
        out.stages.remove(index);
        Ok(out)
    }

    /// The observed run of the whole pipeline.
    pub fn train(&self, seed: u64) -> Result<TrajectoryLog> {
        self.validate()?;
        let (data, schedule, plan) = self.flatten();
        train(&self.model, &data, &schedule, &plan, seed)
    }
}

/// Runs the pipeline with stage `index` removed.
pub fn retrain_skip_stage(pipeline: &PipelineSpec, index: usize, seed: u64) -> Result<TrajectoryLog> {
    let reduced = pipeline.without_stage(index)?;
    let mut log = reduced.train(seed)?;
    log.skipped_stage = Some(index);
    Ok(log)
}

/// Stage skipping that reuses the observed checkpoints before the stage.
/// Equal bit for bit to [`retrain_skip_stage`] when `observed` is the
/// pipeline's own run.
pub fn skip_stage_from_log(pipeline: &PipelineSpec, observed: &TrajectoryLog, index: usize) -> Result<TrajectoryLog> {
    let reduced = pipeline.without_stage(index)?;
    reduced.validate()?;
    let start = pipeline.stage_ranges()[index].start;
    if observed.num_steps() < start {
        return Err(Error::InvalidInput("observed log is shorter than the pipeline prefix".into()));
    }
    let (data, schedule, plan) = reduced.flatten();
    let mut log = rerun(
        &reduced.model,
        &data,
        &schedule,
        &plan,
        observed.seed,
        observed.states[..=start].to_vec(),
        observed.steps[..start].to_vec(),
        vec![],
    )?;
    log.skipped_stage = Some(index);
    Ok(log)
}

/// `γ(x, θ_K) − γ(x, θ_K(0_S))` per test point.
pub fn true_effect(observed: &TrajectoryLog, counterfactual: &TrajectoryLog, points: &[TestPoint], perf: PerformanceKind) -> Result<Vec<f64>> {
    if observed.model_spec != counterfactual.model_spec {
        return Err(Error::InvalidInput("observed and counterfactual logs use different model specs".into()));
    }
    let spec = &observed.model_spec;
    points
        .iter()
        .map(|pt| {
            let (a, _) = perf_value_grad(spec, observed.final_theta(), pt, perf)?;
            let (b, _) = perf_value_grad(spec, counterfactual.final_theta(), pt, perf)?;
            Ok(a - b)
        })
        .collect()
}

/// Final state when step `t`'s update is scaled by `eps`: the state right
/// after the step is interpolated between skipping (`eps = 0`) and executing
/// (`eps = 1`) it, then the logged dynamics continue unchanged.
pub fn interpolated_final_state(log: &TrajectoryLog, dataset: &Dataset, t: usize, eps: f64) -> Result<State> {
    log.check_dataset(dataset)?;
    let k = log.num_steps();
    if t >= k {
        return Err(Error::OutOfRange {
            what: "step",
            index: t,
            bound: k,
        });
    }
    let eta = log.schedule.lr[t];
    let (th, v0, v1) = (log.theta(t), log.velocity(t), log.velocity(t + 1));
    let start = State {
        theta: th.iter().zip(v1.iter()).map(|(a, v)| a - eps * eta * v).collect::<Vec<_>>().into(),
        velocity: v0.iter().zip(v1.iter()).map(|(a, b)| a + eps * (b - a)).collect::<Vec<_>>().into(),
    };
    let (states, _) = run_steps(&log.model_spec, dataset, &log.schedule, &log.batches, start, t + 1..k, |s| log.is_skipped(s))
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("interpolated trajectory (eps = {eps}): {m}")),
            other => other,
        })?;
    Ok(states.into_iter().last().expect("non-empty"))
}

/// Central difference `(ξ_K(1+h) − ξ_K(1−h)) / 2h`, a finite-difference
/// estimate of the propagated effect of step `t`.
pub fn epsilon_fd_check(log: &TrajectoryLog, dataset: &Dataset, t: usize, h: f64) -> Result<EffectVector> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidInput(format!("finite-difference step {h} must lie in (0, 1e-3]")));
    }
    let plus = interpolated_final_state(log, dataset, t, 1.0 + h)?;
    let minus = interpolated_final_state(log, dataset, t, 1.0 - h)?;
    let fd = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) / (2.0 * h)).collect();
    Ok(EffectVector {
        theta: fd(&plus.theta, &minus.theta),
        velocity: fd(&plus.velocity, &minus.velocity),
    })
}
