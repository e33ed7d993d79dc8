//! SGD with momentum and weight decay, and the trajectory log it produces.
//!
//! One update step `k` reads the batch-mean gradient `G_k` and applies
//!
//! ```text
//! G_wd    = G_k + λ_k θ_k
//! v_{k+1} = μ_k v_k + G_wd
//! θ_{k+1} = θ_k − η_k v_{k+1}
//! ```
//!
//! Hyperparameters are stored per step. A zero momentum on the first step of
//! a pipeline stage is how a fresh optimizer (velocity reset) is encoded.

mod storage;

pub use storage::{load_log, save_log, FORMAT_VERSION};

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm};
use crate::model::{init_params, loss_grad, Dataset, ModelSpec, ParameterVector};

/// Per-step learning rate, momentum and weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSchedule {
    pub lr: Vec<f64>,
    pub momentum: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

impl HyperSchedule {
    pub fn new(lr: Vec<f64>, momentum: Vec<f64>, weight_decay: Vec<f64>) -> Result<Self> {
        let s = HyperSchedule {
            lr,
            momentum,
            weight_decay,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(steps: usize, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        Self::new(vec![lr; steps], vec![momentum; steps], vec![weight_decay; steps])
    }

    /// `η_k = lr · gamma^(k / every)`.
    pub fn step_decay(steps: usize, lr: f64, gamma: f64, every: usize, momentum: f64, weight_decay: f64) -> Result<Self> {
        if every == 0 {
            return Err(Error::InvalidInput("step-decay interval must be positive".into()));
        }
        let lrs = (0..steps).map(|k| lr * gamma.powi((k / every) as i32)).collect();
        Self::new(lrs, vec![momentum; steps], vec![weight_decay; steps])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.lr.len();
        for (what, len) in [("momentum schedule", self.momentum.len()), ("weight-decay schedule", self.weight_decay.len())] {
            if len != k {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: k,
                    got: len,
                });
            }
        }
        if let Some(i) = self.lr.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("learning rate at step {i} must be finite and >= 0")));
        }
        if let Some(i) = self.momentum.iter().position(|&v| !(0.0..1.0).contains(&v)) {
            return Err(Error::InvalidInput(format!("momentum at step {i} must lie in [0, 1)")));
        }
        if let Some(i) = self.weight_decay.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("weight decay at step {i} must be finite and >= 0")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// Zero momentum at step `k`: the update there starts from a fresh
    /// velocity buffer.
    pub fn reset_velocity_at(&mut self, k: usize) {
        self.momentum[k] = 0.0;
    }

    /// Concatenates stage-local schedules.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a HyperSchedule>) -> Self {
        let mut out = HyperSchedule {
            lr: vec![],
            momentum: vec![],
            weight_decay: vec![],
        };
        for p in parts {
            out.lr.extend_from_slice(&p.lr);
            out.momentum.extend_from_slice(&p.momentum);
            out.weight_decay.extend_from_slice(&p.weight_decay);
        }
        out
    }
}

/// Ordered batches of dataset indices, one per update step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BatchPlan(pub Vec<Vec<usize>>);

impl BatchPlan {
    /// Walks the dataset in order, wrapping around, `batch_size` points per step.
    pub fn sequential(n: usize, batch_size: usize, steps: usize) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::InvalidInput("sequential plan needs n > 0 and batch_size > 0".into()));
        }
        let mut next = 0;
        Ok(BatchPlan(
            (0..steps)
                .map(|_| {
                    (0..batch_size)
                        .map(|_| {
                            let i = next;
                            next = (next + 1) % n;
                            i
                        })
                        .collect()
                })
                .collect(),
        ))
    }

    /// Epoch-wise random permutations; the last partial batch of an epoch is
    /// dropped.
    pub fn shuffled(n: usize, batch_size: usize, steps: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || n < batch_size {
            return Err(Error::InvalidInput("shuffled plan needs 0 < batch_size <= n".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batches = Vec::with_capacity(steps);
        while batches.len() < steps {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for chunk in perm.chunks_exact(batch_size) {
                if batches.len() == steps {
                    break;
                }
                batches.push(chunk.to_vec());
            }
        }
        Ok(BatchPlan(batches))
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        for (k, b) in self.0.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::InvalidInput(format!("batch {k} is empty")));
            }
            if let Some(&i) = b.iter().find(|&&i| i >= dataset_len) {
                return Err(Error::OutOfRange {
                    what: "batch index",
                    index: i,
                    bound: dataset_len,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn batch(&self, k: usize) -> &[usize] {
        &self.0[k]
    }

    /// Concatenates plans whose indices refer to consecutive dataset slices
    /// of the given lengths.
    pub fn concat_offset(parts: &[(BatchPlan, usize)]) -> Self {
        let mut offset = 0;
        let mut out = Vec::new();
        for (plan, len) in parts {
            out.extend(plan.0.iter().map(|b| b.iter().map(|i| i + offset).collect()));
            offset += len;
        }
        BatchPlan(out)
    }
}

/// Optimizer state `ξ = (θ, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub theta: ParameterVector,
    pub velocity: ParameterVector,
}

impl State {
    /// `(θ_0, 0)`.
    pub fn initial(theta: ParameterVector) -> Self {
        let p = theta.len();
        State {
            theta,
            velocity: ParameterVector::zeros(p),
        }
    }

    pub fn bitwise_eq(&self, other: &State) -> bool {
        self.theta.bitwise_eq(&other.theta) && self.velocity.bitwise_eq(&other.velocity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub batch_indices: Vec<usize>,
    pub lr: f64,
    /// Batch-mean loss before the update; NaN when the step was skipped.
    pub loss: f64,
    /// Norm of the batch-mean gradient; NaN when the step was skipped.
    pub grad_norm: f64,
}

/// Complete record of one training run: every state, the hyperparameters and
/// the batches that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub format_version: u32,
    pub model_spec: ModelSpec,
    pub dataset_fingerprint: u64,
    pub schedule: HyperSchedule,
    pub batches: BatchPlan,
    pub states: Vec<State>,
    pub steps: Vec<StepRecord>,
    pub seed: u64,
    /// Set on counterfactual logs produced by step skipping.
    pub skipped_steps: Option<Vec<usize>>,
    /// Set on counterfactual logs produced by stage skipping.
    pub skipped_stage: Option<usize>,
}

impl TrajectoryLog {
    /// Number of update steps `K`.
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn param_count(&self) -> usize {
        self.model_spec.param_count()
    }

    pub fn theta(&self, k: usize) -> &ParameterVector {
        &self.states[k].theta
    }

    pub fn velocity(&self, k: usize) -> &ParameterVector {
        &self.states[k].velocity
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("a log holds at least the initial state")
    }

    pub fn final_theta(&self) -> &ParameterVector {
        &self.final_state().theta
    }

    pub fn is_skipped(&self, k: usize) -> bool {
        self.skipped_steps.as_ref().is_some_and(|s| s.binary_search(&k).is_ok())
    }

    /// Little-endian `θ_0, v_0, θ_1, v_1, …` as written to `states.bin`.
    pub fn states_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.states.len() * 2 * self.param_count() * 8);
        for s in &self.states {
            out.extend(s.theta.to_le_bytes());
            out.extend(s.velocity.to_le_bytes());
        }
        out
    }

    /// Hex SHA-256 over the spec, schedule, batches and states.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.model_spec).expect("spec serializes"));
        h.update(serde_json::to_vec(&self.schedule).expect("schedule serializes"));
        h.update(serde_json::to_vec(&self.batches).expect("plan serializes"));
        h.update(self.states_bytes());
        hex::encode(&h.finalize()[..16])
    }

    /// Bitwise equality of every float array plus the metadata.
    pub fn bitwise_eq(&self, other: &TrajectoryLog) -> bool {
        let f = |a: f64, b: f64| a.to_bits() == b.to_bits();
        let fv = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| f(*x, *y));
        self.format_version == other.format_version
            && self.model_spec == other.model_spec
            && self.dataset_fingerprint == other.dataset_fingerprint
            && fv(&self.schedule.lr, &other.schedule.lr)
            && fv(&self.schedule.momentum, &other.schedule.momentum)
            && fv(&self.schedule.weight_decay, &other.schedule.weight_decay)
            && self.batches == other.batches
            && self.seed == other.seed
            && self.skipped_steps == other.skipped_steps
            && self.skipped_stage == other.skipped_stage
            && self.states.len() == other.states.len()
            && self.states.iter().zip(&other.states).all(|(a, b)| a.bitwise_eq(b))
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.k == b.k
                    && a.batch_indices == b.batch_indices
                    && f(a.lr, b.lr)
                    && f(a.loss, b.loss)
                    && f(a.grad_norm, b.grad_norm)
            })
    }

    /// Errors unless `dataset` is the one this log was trained on.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let fp = dataset.fingerprint();
        if fp != self.dataset_fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "dataset hash {fp:016x} does not match the log's {:016x}",
                self.dataset_fingerprint
            )));
        }
        Ok(())
    }
}

/// One optimizer update. The input state is left untouched.
pub fn sgd_step(state: &State, grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<State> {
    let p = state.theta.len();
    if grad.len() != p || state.velocity.len() != p {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: p,
            got: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} = {}", grad[i])));
    }
    let mut theta = Vec::with_capacity(p);
    let mut velocity = Vec::with_capacity(p);
    for i in 0..p {
        let g_wd = grad[i] + weight_decay * state.theta[i];
        let v = momentum * state.velocity[i] + g_wd;
        velocity.push(v);
        theta.push(state.theta[i] - lr * v);
    }
    Ok(State {
        theta: theta.into(),
        velocity: velocity.into(),
    })
}

/// Runs steps `range` from `start`. Steps for which `skip` holds carry the
/// state over unchanged.
pub(crate) fn run_steps(
    spec: &ModelSpec,
    dataset: &Dataset,
    schedule: &HyperSchedule,
    plan: &BatchPlan,
    start: State,
    range: Range<usize>,
    skip: impl Fn(usize) -> bool,
) -> Result<(Vec<State>, Vec<StepRecord>)> {
    let mut states = vec![start];
    let mut records = Vec::with_capacity(range.len());
    for k in range {
        let current = states.last().expect("non-empty");
        let batch = plan.batch(k);
        if skip(k) {
            states.push(current.clone());
            records.push(StepRecord {
                k,
                batch_indices: batch.to_vec(),
                lr: schedule.lr[k],
                loss: f64::NAN,
                grad_norm: f64::NAN,
            });
            continue;
        }
        let points = dataset.select(batch)?;
        let (loss, grad) = loss_grad(spec, &current.theta, points)?;
        let next = sgd_step(current, &grad, schedule.lr[k], schedule.momentum[k], schedule.weight_decay[k])
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {k}: {m}")),
                other => other,
            })?;
        if !all_finite(&next.theta) {
            return Err(Error::NonFinite(format!("parameters after step {k}")));
        }
        records.push(StepRecord {
            k,
            batch_indices: batch.to_vec(),
            lr: schedule.lr[k],
            loss,
            grad_norm: norm(&grad),
        });
        states.push(next);
    }
    Ok((states, records))
}

pub(crate) fn check_inputs(spec: &ModelSpec, dataset: &Dataset, schedule: &HyperSchedule, plan: &BatchPlan) -> Result<()> {
    spec.validate()?;
    schedule.validate()?;
    if plan.len() != schedule.len() {
        return Err(Error::DimensionMismatch {
            what: "batch plan",
            expected: schedule.len(),
            got: plan.len(),
        });
    }
    plan.validate(dataset.len())?;
    for p in dataset.points() {
        spec.check_point(p)?;
    }
    Ok(())
}

/// Trains from `init_params(spec, seed)` with zero initial velocity.
pub fn train(spec: &ModelSpec, dataset: &Dataset, schedule: &HyperSchedule, plan: &BatchPlan, seed: u64) -> Result<TrajectoryLog> {
    let theta0 = init_params(spec, seed)?;
    train_from(spec, dataset, schedule, plan, theta0, seed)
}

/// Trains from explicit initial parameters; `seed` is recorded only.
pub fn train_from(
    spec: &ModelSpec,
    dataset: &Dataset,
    schedule: &HyperSchedule,
    plan: &BatchPlan,
    theta0: ParameterVector,
    seed: u64,
) -> Result<TrajectoryLog> {
    check_inputs(spec, dataset, schedule, plan)?;
    spec.check_params(&theta0)?;
    let (states, steps) = run_steps(spec, dataset, schedule, plan, State::initial(theta0), 0..plan.len(), |_| false)?;
    Ok(TrajectoryLog {
        format_version: FORMAT_VERSION,
        model_spec: spec.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        schedule: schedule.clone(),
        batches: plan.clone(),
        states,
        steps,
        seed,
        skipped_steps: None,
        skipped_stage: None,
    })
}

/// Re-executes the logged run from `ξ_0` and checks every state bit for bit.
pub fn verify_replay(log: &TrajectoryLog, dataset: &Dataset) -> Result<()> {
    log.check_dataset(dataset)?;
    let (states, _) = run_steps(
        &log.model_spec,
        dataset,
        &log.schedule,
        &log.batches,
        log.states[0].clone(),
        0..log.num_steps(),
        |k| log.is_skipped(k),
    )?;
    if let Some(k) = states.iter().zip(&log.states).position(|(a, b)| !a.bitwise_eq(b)) {
        return Err(Error::FingerprintMismatch(format!("replayed state {k} differs from the log")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
