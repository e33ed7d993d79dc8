//! Synthetic development scenarios and the retraining-correlation harness.
//!
//! Each scenario turns a JSON config into a (possibly multi-stage) training
//! pipeline, a set of treated units (a step, a step range or a whole stage),
//! and named held-out test sets. [`run_scenario`] trains, attributes every
//! unit, runs the matching retraining oracle and correlates the two across
//! test points.

mod data;
mod run;
mod stats;

pub use data::{append_confound, apply_feature_transform, class_means, gen_class_points, gen_gaussian_classes, shift_labels, FeatureTransform};
pub use run::{run_scenario, EvaluationReport, TestSetReport, UnitReport};
pub use stats::{correlation, CorrelationKind};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{PropagationMode, StageSpec};
use crate::counterfactual::{PipelineSpec, PipelineStage, SkipProtocol};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, PerformanceKind, Target, Task, TestPoint};
use crate::training::{BatchPlan, HyperSchedule};

pub const SCENARIO_VARIANTS: [&str; 5] = ["insert_point", "mislabel_stage", "distribution_shift", "optimizer_stage", "spurious_confound"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Feature dimension before any confound feature is appended.
    pub d: usize,
    pub classes: usize,
    pub separation: f64,
    /// Training points per stage.
    pub n_train: usize,
    /// Points per held-out test set.
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Update steps per stage.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ScenarioSpec {
    /// Replace batch `step` with one extra point of class `class`. By default
    /// the class is absent from the rest of the training data, so the
    /// inserted step is its only source of signal.
    InsertPoint {
        step: usize,
        class: usize,
        #[serde(default = "yes")]
        exclude_class: bool,
        /// Explicit features; drawn from the class distribution if absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<Vec<f64>>,
    },
    /// Batches of steps `[start, end)` carry cyclically shifted labels.
    MislabelStage {
        start: usize,
        end: usize,
        #[serde(default = "one")]
        shift: usize,
    },
    /// One stage per angle, with features rotated by that angle.
    DistributionShift {
        angles_deg: Vec<f64>,
        #[serde(default)]
        rotation: RotationKind,
        /// Steps of each stage; `training.steps` for every stage if absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stage_steps: Option<Vec<usize>>,
    },
    /// Two stages on the same distribution; the second uses the given
    /// learning rate and/or momentum.
    OptimizerStage {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stage2_lr: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stage2_momentum: Option<f64>,
    },
    /// One stage per entry; each appends a binary feature whose correlation
    /// with the label is the given `ρ`.
    SpuriousConfound { rho: Vec<f64> },
}

/// Rotation used by the distribution-shift scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    /// [`FeatureTransform::RotationDeg`].
    #[default]
    Plane,
    /// [`FeatureTransform::SubspaceRotationDeg`].
    Subspace,
}

impl RotationKind {
    pub fn transform(self, deg: f64) -> FeatureTransform {
        match self {
            RotationKind::Plane => FeatureTransform::RotationDeg(deg),
            RotationKind::Subspace => FeatureTransform::SubspaceRotationDeg(deg),
        }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ScenarioSpec {
    pub fn variant_name(&self) -> &'static str {
        match self {
            ScenarioSpec::InsertPoint { .. } => "insert_point",
            ScenarioSpec::MislabelStage { .. } => "mislabel_stage",
            ScenarioSpec::DistributionShift { .. } => "distribution_shift",
            ScenarioSpec::OptimizerStage { .. } => "optimizer_stage",
            ScenarioSpec::SpuriousConfound { .. } => "spurious_confound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub perf: PerformanceKind,
    #[serde(default)]
    pub mode: PropagationMode,
    pub scenario: ScenarioSpec,
}

impl ScenarioConfig {
    /// Parses a JSON config, naming the known variants when the requested
    /// one does not exist.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("scenario config: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        if let Some(v) = value.pointer("/scenario/variant").and_then(|v| v.as_str()) {
            if !SCENARIO_VARIANTS.contains(&v) {
                return Err(Error::UnknownScenario {
                    found: v.to_string(),
                    known: SCENARIO_VARIANTS.to_vec(),
                });
            }
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidInput(format!("scenario config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// A set of update steps whose removal is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreatedUnit {
    pub name: String,
    pub steps: StageSpec,
    pub protocol: SkipProtocol,
    /// Pipeline stage removed by the stage-skip oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTestSet {
    pub name: String,
    pub points: Vec<TestPoint>,
}

/// Training inputs, treated units and test sets of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltScenario {
    pub pipeline: PipelineSpec,
    pub units: Vec<TreatedUnit>,
    pub test_sets: Vec<NamedTestSet>,
    /// Test set over which estimates and oracle effects are correlated.
    pub eval_set: String,
    /// Constant-hyperparameter reference pipeline of the optimizer scenario.
    pub baseline: Option<PipelineSpec>,
}

impl BuiltScenario {
    pub fn test_set(&self, name: &str) -> Option<&NamedTestSet> {
        self.test_sets.iter().find(|s| s.name == name)
    }
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const TRAIN_TAG: u64 = 1;
const TEST_TAG: u64 = 101;
const PLAN_TAG: u64 = 201;
const EXTRA_TAG: u64 = 301;

fn schedule(t: &TrainingConfig, lr: f64, momentum: f64) -> Result<HyperSchedule> {
    HyperSchedule::constant(t.steps, lr, momentum, t.weight_decay)
}

fn stage(name: String, points: Vec<TestPoint>, schedule: HyperSchedule, batch: usize, plan_seed: u64) -> Result<PipelineStage> {
    let plan = BatchPlan::shuffled(points.len(), batch, schedule.len(), plan_seed)?;
    Ok(PipelineStage {
        name,
        dataset: Dataset::new(points),
        schedule,
        plan,
    })
}

fn step_unit(name: &str, steps: StageSpec) -> TreatedUnit {
    TreatedUnit {
        name: name.into(),
        steps,
        protocol: SkipProtocol::StepSkip,
        stage_index: None,
    }
}

fn stage_units(pipeline: &PipelineSpec) -> Result<Vec<TreatedUnit>> {
    pipeline
        .stage_ranges()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(TreatedUnit {
                name: pipeline.stages[i].name.clone(),
                steps: StageSpec::range(r.start, r.end)?,
                protocol: SkipProtocol::StageSkip,
                stage_index: Some(i),
            })
        })
        .collect()
}

/// Builds the pipeline, treated units and test sets for `config`.
pub fn build_scenario(config: &ScenarioConfig) -> Result<BuiltScenario> {
    let (m, dc, tc, seed) = (&config.model, &config.data, &config.training, config.seed);
    m.validate()?;
    if m.task != Task::Classification || m.output_dim() != dc.classes {
        return Err(Error::InvalidInput(format!(
            "scenarios need a classifier with {} outputs",
            dc.classes
        )));
    }
    let confound = matches!(config.scenario, ScenarioSpec::SpuriousConfound { .. });
    let want_in = dc.d + usize::from(confound);
    if m.input_dim() != want_in {
        return Err(Error::InvalidInput(format!("model input dim {} but the scenario produces {want_in} features", m.input_dim())));
    }
    if tc.batch_size == 0 || tc.batch_size > dc.n_train {
        return Err(Error::InvalidInput("batch_size must lie in 1..=n_train".into()));
    }
    let gen = |tag: u64, n: usize| gen_gaussian_classes(sub_seed(seed, tag), n, dc.d, dc.classes, dc.separation);
    let base = schedule(tc, tc.lr, tc.momentum)?;

    match &config.scenario {
        ScenarioSpec::InsertPoint {
            step,
            class,
            exclude_class,
            point,
        } => {
            if *step >= tc.steps {
                return Err(Error::OutOfRange {
                    what: "insertion step",
                    index: *step,
                    bound: tc.steps,
                });
            }
            let inserted = match point {
                Some(x) => {
                    let p = TestPoint::class(x.clone(), *class);
                    m.check_point(&p)?;
                    p
                }
                None => gen_class_points(sub_seed(seed, EXTRA_TAG), 1, dc.d, dc.classes, dc.separation, *class)?.remove(0),
            };
            let mut points = gen(TRAIN_TAG, dc.n_train)?;
            if *exclude_class {
                points.retain(|p| p.y != Target::Class(*class));
            }
            if points.len() < tc.batch_size {
                return Err(Error::InvalidInput("too few training points left after excluding the inserted class".into()));
            }
            let n = points.len();
            let mut st = stage("train".into(), points.clone(), base, tc.batch_size, sub_seed(seed, PLAN_TAG))?;
            points.push(inserted);
            st.plan.0[*step] = vec![n];
            st.dataset = Dataset::new(points);
            let class_set = gen_class_points(sub_seed(seed, TEST_TAG + 1), dc.n_test, dc.d, dc.classes, dc.separation, *class)?;
            Ok(BuiltScenario {
                pipeline: PipelineSpec {
                    model: m.clone(),
                    stages: vec![st],
                },
                units: vec![step_unit("inserted_step", StageSpec::single(*step))],
                test_sets: vec![
                    NamedTestSet {
                        name: "test".into(),
                        points: gen(TEST_TAG, dc.n_test)?,
                    },
                    NamedTestSet {
                        name: "inserted_class".into(),
                        points: class_set,
                    },
                ],
                eval_set: "test".into(),
                baseline: None,
            })
        }
        ScenarioSpec::MislabelStage { start, end, shift } => {
            if start >= end || *end > tc.steps {
                return Err(Error::InvalidInput(format!("mislabel range {start}..{end} must be non-empty within 0..{}", tc.steps)));
            }
            if *shift % dc.classes == 0 {
                return Err(Error::InvalidInput("a label shift that is a multiple of the class count changes nothing".into()));
            }
            let mut points = gen(TRAIN_TAG, dc.n_train)?;
            let mut st = stage("train".into(), points.clone(), base, tc.batch_size, sub_seed(seed, PLAN_TAG))?;
            for k in *start..*end {
                let originals: Vec<TestPoint> = st.plan.0[k].iter().map(|&i| points[i].clone()).collect();
                let shifted = shift_labels(&originals, *shift, dc.classes)?;
                let first = points.len();
                points.extend(shifted);
                st.plan.0[k] = (first..points.len()).collect();
            }
            st.dataset = Dataset::new(points);
            Ok(BuiltScenario {
                pipeline: PipelineSpec {
                    model: m.clone(),
                    stages: vec![st],
                },
                units: vec![step_unit("mislabeled", StageSpec::range(*start, *end)?)],
                test_sets: vec![NamedTestSet {
                    name: "test".into(),
                    points: gen(TEST_TAG, dc.n_test)?,
                }],
                eval_set: "test".into(),
                baseline: None,
            })
        }
        ScenarioSpec::DistributionShift {
            angles_deg,
            rotation,
            stage_steps,
        } => {
            if angles_deg.is_empty() {
                return Err(Error::InvalidInput("distribution_shift needs at least one angle".into()));
            }
            if stage_steps.as_ref().is_some_and(|s| s.len() != angles_deg.len()) {
                return Err(Error::InvalidInput("stage_steps needs one entry per angle".into()));
            }
            let mut stages = Vec::new();
            let mut test_sets = Vec::new();
            for (i, &a) in angles_deg.iter().enumerate() {
                let rot = rotation.transform(a);
                let pts = apply_feature_transform(&gen(TRAIN_TAG + i as u64, dc.n_train)?, &rot)?;
                let steps = stage_steps.as_ref().map_or(tc.steps, |s| s[i]);
                let sched = HyperSchedule::constant(steps, tc.lr, tc.momentum, tc.weight_decay)?;
                stages.push(stage(format!("stage_{}", i + 1), pts, sched, tc.batch_size, sub_seed(seed, PLAN_TAG + i as u64))?);
                test_sets.push(NamedTestSet {
                    name: format!("dist_{}", i + 1),
                    points: apply_feature_transform(&gen(TEST_TAG + 1 + i as u64, dc.n_test)?, &rot)?,
                });
            }
            let mixture = gen(TEST_TAG, dc.n_test)?
                .into_iter()
                .enumerate()
                .map(|(j, p)| {
                    let rot = rotation.transform(angles_deg[j % angles_deg.len()]);
                    Ok(apply_feature_transform(&[p], &rot)?.remove(0))
                })
                .collect::<Result<Vec<_>>>()?;
            test_sets.insert(
                0,
                NamedTestSet {
                    name: "mixture".into(),
                    points: mixture,
                },
            );
            let pipeline = PipelineSpec {
                model: m.clone(),
                stages,
            };
            Ok(BuiltScenario {
                units: stage_units(&pipeline)?,
                pipeline,
                test_sets,
                eval_set: "mixture".into(),
                baseline: None,
            })
        }
        ScenarioSpec::OptimizerStage { stage2_lr, stage2_momentum } => {
            if stage2_lr.is_none() && stage2_momentum.is_none() {
                return Err(Error::InvalidInput("optimizer_stage needs stage2_lr or stage2_momentum".into()));
            }
            let p1 = gen(TRAIN_TAG, dc.n_train)?;
            let p2 = gen(TRAIN_TAG + 1, dc.n_train)?;
            let s2 = schedule(tc, stage2_lr.unwrap_or(tc.lr), stage2_momentum.unwrap_or(tc.momentum))?;
            let mk = |s2: HyperSchedule| -> Result<PipelineSpec> {
                Ok(PipelineSpec {
                    model: m.clone(),
                    stages: vec![
                        stage("stage_1".into(), p1.clone(), base.clone(), tc.batch_size, sub_seed(seed, PLAN_TAG))?,
                        stage("stage_2".into(), p2.clone(), s2, tc.batch_size, sub_seed(seed, PLAN_TAG + 1))?,
                    ],
                })
            };
            let pipeline = mk(s2)?;
            let baseline = mk(base.clone())?;
            Ok(BuiltScenario {
                units: stage_units(&pipeline)?,
                pipeline,
                test_sets: vec![NamedTestSet {
                    name: "test".into(),
                    points: gen(TEST_TAG, dc.n_test)?,
                }],
                eval_set: "test".into(),
                baseline: Some(baseline),
            })
        }
        ScenarioSpec::SpuriousConfound { rho } => {
            if rho.is_empty() || dc.classes != 2 {
                return Err(Error::InvalidInput("spurious_confound needs at least one stage and two classes".into()));
            }
            let mut stages = Vec::new();
            for (i, &r) in rho.iter().enumerate() {
                let pts = append_confound(&gen(TRAIN_TAG + i as u64, dc.n_train)?, r, sub_seed(seed, EXTRA_TAG + i as u64))?;
                stages.push(stage(format!("stage_{}", i + 1), pts, base.clone(), tc.batch_size, sub_seed(seed, PLAN_TAG + i as u64))?);
            }
            let test = append_confound(&gen(TEST_TAG, dc.n_test)?, 0.0, sub_seed(seed, EXTRA_TAG + 100))?;
            let probe = gen(TEST_TAG + 1, dc.n_test)?
                .into_iter()
                .map(|p| {
                    let mut x = vec![0.0; dc.d];
                    x.push(data::label_code(&p)?);
                    Ok(TestPoint { x, y: p.y })
                })
                .collect::<Result<Vec<_>>>()?;
            let pipeline = PipelineSpec {
                model: m.clone(),
                stages,
            };
            Ok(BuiltScenario {
                units: stage_units(&pipeline)?,
                pipeline,
                test_sets: vec![
                    NamedTestSet {
                        name: "test".into(),
                        points: test,
                    },
                    NamedTestSet {
                        name: "confound".into(),
                        points: probe,
                    },
                ],
                eval_set: "test".into(),
                baseline: None,
            })
        }
    }
}

/// Empirical Pearson correlation between the confound feature (last
/// coordinate) and the label code over the points of the given batches.
pub fn confound_label_correlation(dataset: &Dataset, batches: &[Vec<usize>]) -> Result<f64> {
    let mut feat = Vec::new();
    let mut code = Vec::new();
    for b in batches {
        for &i in b {
            let p = dataset.get(i)?;
            feat.push(*p.x.last().ok_or_else(|| Error::InvalidInput("empty feature vector".into()))?);
            code.push(data::label_code(p)?);
        }
    }
    correlation(&feat, &code, CorrelationKind::Pearson)
}

#[cfg(test)]
mod tests;
