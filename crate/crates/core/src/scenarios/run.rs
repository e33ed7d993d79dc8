use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_scenario, confound_label_correlation, correlation, BuiltScenario, CorrelationKind, ScenarioConfig, ScenarioSpec, TreatedUnit};
use crate::attribution::{aa_score, final_perf_grads, Attributor};
use crate::counterfactual::{skip_stage_from_log, skip_steps_from_log, true_effect, PipelineSpec, SkipProtocol};
use crate::error::{Error, Result};
use crate::model::{PerformanceKind, TestPoint};
use crate::training::TrajectoryLog;

/// Estimates and oracle effects of one treated unit over the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub name: String,
    pub steps: Vec<usize>,
    pub protocol: SkipProtocol,
    /// Sum of member step scores per evaluation point.
    pub estimated: Vec<f64>,
    /// Joint-skip linearization per evaluation point.
    pub joint: Vec<f64>,
    pub oracle: Vec<f64>,
    pub pearson: f64,
    pub spearman: f64,
    pub joint_pearson: f64,
}

/// Mean scores over one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetReport {
    pub name: String,
    pub size: usize,
    /// Mean score of every step.
    pub mean_step_scores: Vec<f64>,
    /// Mean summed score of every treated unit.
    pub unit_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenario: String,
    pub seed: u64,
    pub num_steps: usize,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub eval_set: String,
    pub units: Vec<UnitReport>,
    pub test_sets: Vec<TestSetReport>,
    /// Mean over units of the per-unit correlations.
    pub pearson: f64,
    pub spearman: f64,
    pub min_pearson: f64,
    /// Scenario-specific qualitative outcomes.
    pub checks: BTreeMap<String, bool>,
    /// Scenario-specific scalar diagnostics.
    pub metrics: BTreeMap<String, f64>,
    pub runtime_seconds: f64,
}

impl EvaluationReport {
    pub fn unit(&self, name: &str) -> Option<&UnitReport> {
        self.units.iter().find(|u| u.name == name)
    }

    pub fn test_set(&self, name: &str) -> Option<&TestSetReport> {
        self.test_sets.iter().find(|t| t.name == name)
    }

    /// Writes `report.json`, `scores.csv` and `oracle.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("report serializes")).map_err(|e| Error::io(&path, e))?;
        for (file, pick) in [("scores.csv", 0), ("oracle.csv", 1)] {
            let path = dir.join(file);
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::malformed(&path, e))?;
            w.write_record(["unit", "test_point_id", if pick == 0 { "score" } else { "effect" }])
                .map_err(|e| Error::malformed(&path, e))?;
            for u in &self.units {
                let vals = if pick == 0 { &u.estimated } else { &u.oracle };
                for (i, v) in vals.iter().enumerate() {
                    w.serialize((&u.name, i, v)).map_err(|e| Error::malformed(&path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn argmax(v: &[f64]) -> Option<usize> {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i)
}

/// `[point][step]` adjoint scores for every point.
fn step_scores(attributor: &Attributor, log: &TrajectoryLog, points: &[TestPoint], perf: PerformanceKind) -> Result<Vec<Vec<f64>>> {
    let grads = final_perf_grads(log, points, perf)?;
    grads.par_iter().map(|(_, g)| attributor.adjoint_step_scores(g)).collect()
}

fn counterfactual(pipeline: &PipelineSpec, observed: &TrajectoryLog, unit: &TreatedUnit) -> Result<TrajectoryLog> {
    match (unit.protocol, unit.stage_index) {
        (SkipProtocol::StageSkip, Some(i)) => skip_stage_from_log(pipeline, observed, i),
        _ => {
            let (data, _, _) = pipeline.flatten();
            skip_steps_from_log(observed, &data, unit.steps.steps())
        }
    }
}

/// Trains the scenario, attributes every treated unit, runs the retraining
/// oracles and correlates estimates with oracle effects across the
/// evaluation set.
pub fn run_scenario(config: &ScenarioConfig) -> Result<EvaluationReport> {
    let started = Instant::now();
    let built = build_scenario(config)?;
    let perf = config.perf;
    let observed = built.pipeline.train(config.seed)?;
    let (data, _, _) = built.pipeline.flatten();
    let attributor = Attributor::new(&observed, &data, config.mode)?;

    let eval = built
        .test_set(&built.eval_set)
        .ok_or_else(|| Error::InvalidInput(format!("missing evaluation set {}", built.eval_set)))?;
    let eval_scores = step_scores(&attributor, &observed, &eval.points, perf)?;
    let eval_grads = final_perf_grads(&observed, &eval.points, perf)?;

    let units = built
        .units
        .par_iter()
        .map(|unit| -> Result<UnitReport> {
            let estimated: Vec<f64> = eval_scores
                .iter()
                .map(|s| unit.steps.steps().iter().fold(0.0, |acc, &t| acc + s[t]))
                .collect();
            let joint_effect = attributor.stage_state_effect(&unit.steps)?;
            let joint = eval_grads
                .iter()
                .map(|(_, g)| aa_score(&joint_effect.theta, g))
                .collect::<Result<Vec<_>>>()?;
            let cf = counterfactual(&built.pipeline, &observed, unit)?;
            let oracle = true_effect(&observed, &cf, &eval.points, perf)?;
            Ok(UnitReport {
                name: unit.name.clone(),
                steps: unit.steps.steps().to_vec(),
                protocol: unit.protocol,
                pearson: correlation(&estimated, &oracle, CorrelationKind::Pearson)?,
                spearman: correlation(&estimated, &oracle, CorrelationKind::Spearman)?,
                joint_pearson: correlation(&joint, &oracle, CorrelationKind::Pearson)?,
                estimated,
                joint,
                oracle,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut test_sets = Vec::new();
    for set in &built.test_sets {
        let scores = if set.name == built.eval_set {
            eval_scores.clone()
        } else {
            step_scores(&attributor, &observed, &set.points, perf)?
        };
        test_sets.push(summarize(&set.name, &scores, &built));
    }

    let mut checks = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    let find = |name: &str| test_sets.iter().find(|t: &&TestSetReport| t.name == name).expect("built test set");
    match &config.scenario {
        ScenarioSpec::InsertPoint { step, .. } => {
            let cls = find("inserted_class");
            checks.insert("inserted_step_is_max".into(), argmax(&cls.mean_step_scores) == Some(*step));
            metrics.insert("inserted_step_mean_score".into(), cls.mean_step_scores[*step]);
        }
        ScenarioSpec::MislabelStage { start, end, .. } => {
            let m = mean(find("test").mean_step_scores[*start..*end].iter().copied());
            checks.insert("mislabeled_mean_negative".into(), m < 0.0);
            metrics.insert("mislabeled_mean_score".into(), m);
        }
        ScenarioSpec::DistributionShift { angles_deg, .. } => {
            for i in 0..angles_deg.len() {
                let set = find(&format!("dist_{}", i + 1));
                let means: Vec<f64> = built.units.iter().map(|u| set.unit_means[&u.name]).collect();
                checks.insert(format!("stage_{}_max_on_dist_{}", i + 1, i + 1), argmax(&means) == Some(i));
            }
        }
        ScenarioSpec::OptimizerStage { .. } => {
            let range = built.pipeline.stage_ranges()[1].clone();
            let test = &built.test_set("test").expect("built test set").points;
            let stage2_abs = |scores: &[Vec<f64>]| mean(scores.iter().flat_map(|s| s[range.clone()].iter().map(|x| x.abs())));
            let modified = stage2_abs(&step_scores(&attributor, &observed, test, perf)?);
            let baseline = built.baseline.as_ref().expect("optimizer scenario has a baseline");
            let base_log = baseline.train(config.seed)?;
            let (base_data, _, _) = baseline.flatten();
            let base_attr = Attributor::new(&base_log, &base_data, config.mode)?;
            let reference = stage2_abs(&step_scores(&base_attr, &base_log, test, perf)?);
            checks.insert("stage2_mean_abs_below_baseline".into(), modified < reference);
            metrics.insert("stage2_mean_abs".into(), modified);
            metrics.insert("baseline_stage2_mean_abs".into(), reference);
        }
        ScenarioSpec::SpuriousConfound { rho } => {
            let probe = find("confound");
            let means: Vec<f64> = built.units.iter().map(|u| probe.unit_means[&u.name]).collect();
            let strongest = argmax(&rho.iter().map(|r| r.abs()).collect::<Vec<_>>());
            checks.insert("confounded_stage_max_on_probe".into(), argmax(&means) == strongest);
            let batches = &observed.batches.0;
            for (i, r) in built.pipeline.stage_ranges().into_iter().enumerate() {
                if let Ok(c) = confound_label_correlation(&data, &batches[r]) {
                    metrics.insert(format!("stage_{}_confound_correlation", i + 1), c);
                }
            }
        }
    }

    let pearsons: Vec<f64> = units.iter().map(|u| u.pearson).collect();
    Ok(EvaluationReport {
        scenario: config.scenario.variant_name().into(),
        seed: config.seed,
        num_steps: observed.num_steps(),
        param_count: observed.param_count(),
        final_train_loss: observed.steps.last().map_or(f64::NAN, |s| s.loss),
        eval_set: built.eval_set.clone(),
        pearson: mean(pearsons.iter().copied()),
        spearman: mean(units.iter().map(|u| u.spearman)),
        min_pearson: pearsons.iter().copied().fold(f64::INFINITY, f64::min),
        units,
        test_sets,
        checks,
        metrics,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

fn summarize(name: &str, scores: &[Vec<f64>], built: &BuiltScenario) -> TestSetReport {
    let k = scores.first().map_or(0, Vec::len);
    let mean_step_scores = (0..k).map(|t| mean(scores.iter().map(|s| s[t]))).collect();
    let unit_means = built
        .units
        .iter()
        .map(|u| {
            let m = mean(scores.iter().map(|s| u.steps.steps().iter().fold(0.0, |acc, &t| acc + s[t])));
            (u.name.clone(), m)
        })
        .collect();
    TestSetReport {
        name: name.into(),
        size: scores.len(),
        mean_step_scores,
        unit_means,
    }
}
