use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::{Direction, PropagationMode, StageSpec};
use crate::error::{Error, Result};
use crate::model::PerformanceKind;
use crate::training::TrajectoryLog;

/// Additive stage score per test point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageScores {
    pub name: String,
    pub steps: StageSpec,
    pub scores: Vec<f64>,
    /// Scores of the joint estimator, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint: Option<Vec<f64>>,
}

/// Step and stage scores for a set of test points, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    /// `per_step_scores[t][i]` is the score of step `t` for test point `i`.
    pub per_step_scores: Vec<Vec<f64>>,
    pub stages: Vec<StageScores>,
    pub perf: PerformanceKind,
    pub mode: PropagationMode,
    pub direction: Direction,
    pub log_fingerprint: String,
    pub hvp_count: usize,
}

impl AttributionResult {
    /// Builds the result from `[point][step]` scores; each stage score is the
    /// sum of its member step scores in increasing step order.
    pub fn from_point_scores(
        log: &TrajectoryLog,
        per_point: Vec<Vec<f64>>,
        stages: &[(String, StageSpec)],
        perf: PerformanceKind,
        mode: PropagationMode,
        direction: Direction,
        hvp_count: usize,
    ) -> Result<Self> {
        let k = log.num_steps();
        if let Some(bad) = per_point.iter().find(|s| s.len() != k) {
            return Err(Error::DimensionMismatch {
                what: "step scores",
                expected: k,
                got: bad.len(),
            });
        }
        let per_step: Vec<Vec<f64>> = (0..k).map(|t| per_point.iter().map(|s| s[t]).collect()).collect();
        let mut seen = std::collections::HashSet::new();
        let stages = stages
            .iter()
            .map(|(name, stage)| {
                if !seen.insert(name.as_str()) {
                    return Err(Error::InvalidInput(format!("stage name `{name}` used twice")));
                }
                stage.check(k)?;
                let scores = (0..per_point.len())
                    .map(|i| stage.steps().iter().fold(0.0, |acc, &t| acc + per_step[t][i]))
                    .collect();
                Ok(StageScores {
                    name: name.clone(),
                    steps: stage.clone(),
                    scores,
                    joint: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttributionResult {
            per_step_scores: per_step,
            stages,
            perf,
            mode,
            direction,
            log_fingerprint: log.fingerprint(),
            hvp_count,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.per_step_scores.len()
    }

    pub fn num_points(&self) -> usize {
        self.per_step_scores.first().map_or(0, Vec::len)
    }

    /// Scores of every step for test point `i`.
    pub fn point_scores(&self, i: usize) -> Vec<f64> {
        self.per_step_scores.iter().map(|s| s[i]).collect()
    }

    pub fn stage(&self, name: &str) -> Option<&StageScores> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// `step,test_point_id,score` rows.
    pub fn write_scores_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::malformed(path, e))?;
        w.write_record(["step", "test_point_id", "score"]).map_err(|e| Error::malformed(path, e))?;
        for (t, row) in self.per_step_scores.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                w.serialize((t, i, s)).map_err(|e| Error::malformed(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Stage definitions and scores, mode, direction, fingerprint and HVP count.
    pub fn summary(&self) -> Value {
        json!({
            "perf": self.perf,
            "mode": self.mode,
            "direction": self.direction,
            "log_fingerprint": self.log_fingerprint,
            "hvp_count": self.hvp_count,
            "num_steps": self.num_steps(),
            "num_points": self.num_points(),
            "stages": self.stages,
        })
    }

    /// Writes `scores.csv` and `summary.json` (the summary merged with `extra`)
    /// into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, extra: Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_scores_csv(dir.join("scores.csv"))?;
        let mut summary = self.summary();
        if let (Value::Object(s), Value::Object(e)) = (&mut summary, extra) {
            s.extend(e);
        }
        if self.stages.is_empty() {
            summary.as_object_mut().expect("object").remove("stages");
        }
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| Error::io(&path, e))
    }
}
