//! Per-step and per-stage effect estimates on final model performance.
//!
//! The effect of update `t` on the state is exact right after the step,
//! `w_{t+1,t} = (−η_t v_{t+1}; v_{t+1} − v_t)`, and is carried to the end of
//! training by the linearized update maps
//!
//! ```text
//! M_k = [ I − η_k(H_k + λ_k I)   −η_k μ_k I ]
//!       [ H_k + λ_k I              μ_k I     ]
//! ```
//!
//! with `H_k` the batch-mean loss Hessian at `θ_k`. The AA-score of step `t`
//! for a test point is `∇γ(θ_K)ᵀ E_t`, where `E_t` is the θ-block of the
//! propagated effect. Scores can be computed forward (one `E_t` per step,
//! reusable for any test point) or adjoint (one backward sweep per point).

mod bound;
mod cache;
mod result;

pub use bound::{error_bound, estimate_bound_constants, ErrorBoundInputs};
pub use cache::{load_effects, save_effects, EffectTable};
pub use result::{AttributionResult, StageScores};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot};
use crate::model::{dense_hessian, hvp_unchecked, perf_value_grad, Dataset, LayerSlice, ParameterVector, PerformanceKind, TestPoint, DEFAULT_HESSIAN_CAP};
use crate::training::TrajectoryLog;

/// Sorted, duplicate-free set of update-step indices treated together.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StageSpec(Vec<usize>);

impl StageSpec {
    /// Accepts any order; rejects empty sets and duplicates.
    pub fn new(mut steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidInput("a stage needs at least one step".into()));
        }
        steps.sort_unstable();
        if let Some(w) = steps.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("step {} listed twice in a stage", w[0])));
        }
        Ok(StageSpec(steps))
    }

    pub fn range(start: usize, end: usize) -> Result<Self> {
        Self::new((start..end).collect())
    }

    pub fn single(t: usize) -> Self {
        StageSpec(vec![t])
    }

    pub fn check(&self, num_steps: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= num_steps => Err(Error::OutOfRange {
                what: "stage step",
                index: last,
                bound: num_steps,
            }),
            _ => Ok(()),
        }
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn min(&self) -> usize {
        self.0[0]
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: &StageSpec) -> StageSpec {
        let all: BTreeSet<usize> = self.0.iter().chain(&other.0).copied().collect();
        StageSpec(all.into_iter().collect())
    }
}

impl TryFrom<Vec<usize>> for StageSpec {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        StageSpec::new(v)
    }
}

impl From<StageSpec> for Vec<usize> {
    fn from(s: StageSpec) -> Self {
        s.0
    }
}

/// A perturbation of the optimizer state `(δθ, δv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectVector {
    pub theta: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl EffectVector {
    pub fn zeros(p: usize) -> Self {
        EffectVector {
            theta: vec![0.0; p],
            velocity: vec![0.0; p],
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Euclidean norm over the full `2p` state.
    pub fn norm(&self) -> f64 {
        (dot(&self.theta, &self.theta) + dot(&self.velocity, &self.velocity)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.theta) && all_finite(&self.velocity)
    }

    /// `[θ-block; v-block]`.
    pub fn to_stacked(&self) -> Vec<f64> {
        let mut out = self.theta.clone();
        out.extend_from_slice(&self.velocity);
        out
    }

    pub fn from_stacked(v: &[f64]) -> Self {
        let p = v.len() / 2;
        EffectVector {
            theta: v[..p].to_vec(),
            velocity: v[p..].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &EffectVector) -> f64 {
        crate::linalg::max_abs_diff(&self.to_stacked(), &other.to_stacked())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// One Hessian-vector product per step.
    #[default]
    HvpVector,
    /// Dense `2p × 2p` propagators; a reference for small models.
    ExplicitMatrix,
    /// Hessian restricted to its per-layer diagonal blocks.
    LayerwiseBlock,
}

impl fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            PropagationMode::HvpVector => "hvp_vector",
            PropagationMode::ExplicitMatrix => "explicit_matrix",
            PropagationMode::LayerwiseBlock => "layerwise_block",
        })
    }
}

impl FromStr for PropagationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hvp" | "hvp_vector" => Ok(PropagationMode::HvpVector),
            "matrix" | "explicit_matrix" => Ok(PropagationMode::ExplicitMatrix),
            "layerwise" | "layerwise_block" => Ok(PropagationMode::LayerwiseBlock),
            other => Err(Error::InvalidInput(format!("unknown propagation mode `{other}` (hvp, matrix, layerwise)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Propagate each step's effect to the end.
    #[default]
    Forward,
    /// Sweep each test point's gradient backwards.
    Adjoint,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Direction::Forward => "forward",
            Direction::Adjoint => "adjoint",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "adjoint" => Ok(Direction::Adjoint),
            other => Err(Error::InvalidInput(format!("unknown direction `{other}` (forward, adjoint)"))),
        }
    }
}

/// Exact effect of step `t` on the state right after it, read from the log.
pub fn initial_effect(log: &TrajectoryLog, t: usize) -> Result<EffectVector> {
    let k = log.num_steps();
    if t >= k {
        return Err(Error::OutOfRange {
            what: "step",
            index: t,
            bound: k,
        });
    }
    let eta = log.schedule.lr[t];
    let (v0, v1) = (log.velocity(t), log.velocity(t + 1));
    if log.is_skipped(t) {
        return Ok(EffectVector::zeros(v0.len()));
    }
    Ok(EffectVector {
        theta: v1.iter().map(|v| -eta * v).collect(),
        velocity: v1.iter().zip(v0.iter()).map(|(a, b)| a - b).collect(),
    })
}

/// `∇γ(θ_K)ᵀ E_t`.
pub fn aa_score(effect: &[f64], perf_grad: &[f64]) -> Result<f64> {
    if effect.len() != perf_grad.len() {
        return Err(Error::DimensionMismatch {
            what: "performance gradient",
            expected: effect.len(),
            got: perf_grad.len(),
        });
    }
    Ok(dot(effect, perf_grad))
}

/// Performance values and gradients at the final parameters of `log`.
pub fn final_perf_grads(log: &TrajectoryLog, points: &[TestPoint], perf: PerformanceKind) -> Result<Vec<(f64, ParameterVector)>> {
    points
        .iter()
        .map(|pt| perf_value_grad(&log.model_spec, log.final_theta(), pt, perf))
        .collect()
}

/// Propagation engine bound to one trajectory and the dataset it was trained
/// on. Shared read-only across threads; counts the Hessian-vector products it
/// performs.
pub struct Attributor<'a> {
    log: &'a TrajectoryLog,
    layers: Vec<LayerSlice>,
    batches: Vec<Vec<&'a TestPoint>>,
    mode: PropagationMode,
    dense: Vec<OnceLock<DMatrix<f64>>>,
    hvps: AtomicUsize,
}

impl<'a> Attributor<'a> {
    pub fn new(log: &'a TrajectoryLog, dataset: &'a Dataset, mode: PropagationMode) -> Result<Self> {
        Self::with_cap(log, dataset, mode, DEFAULT_HESSIAN_CAP)
    }

    pub fn with_cap(log: &'a TrajectoryLog, dataset: &'a Dataset, mode: PropagationMode, cap: usize) -> Result<Self> {
        log.check_dataset(dataset)?;
        let p = log.param_count();
        if mode == PropagationMode::ExplicitMatrix && p > cap {
            return Err(Error::TooLarge { p, cap });
        }
        let batches = log
            .batches
            .0
            .iter()
            .map(|b| dataset.select(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Attributor {
            log,
            layers: log.model_spec.layers(),
            batches,
            mode,
            dense: (0..log.num_steps()).map(|_| OnceLock::new()).collect(),
            hvps: AtomicUsize::new(0),
        })
    }

    pub fn log(&self) -> &TrajectoryLog {
        self.log
    }

    pub fn mode(&self) -> PropagationMode {
        self.mode
    }

    /// Hessian-vector products performed so far.
    pub fn hvp_count(&self) -> usize {
        self.hvps.load(Ordering::Relaxed)
    }

    fn num_steps(&self) -> usize {
        self.log.num_steps()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.num_steps() {
            return Err(Error::OutOfRange {
                what: "step",
                index: k,
                bound: self.num_steps(),
            });
        }
        Ok(())
    }

    fn check_effect(&self, w: &EffectVector) -> Result<()> {
        let p = self.log.param_count();
        if w.theta.len() != p || w.velocity.len() != p {
            return Err(Error::DimensionMismatch {
                what: "effect vector",
                expected: p,
                got: w.theta.len().min(w.velocity.len()),
            });
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("effect vector".into()));
        }
        Ok(())
    }

    fn hvp(&self, k: usize, x: &[f64]) -> Vec<f64> {
        self.hvps.fetch_add(1, Ordering::Relaxed);
        hvp_unchecked(&self.log.model_spec, &self.layers, self.log.theta(k), &self.batches[k], x)
    }

    /// `H_k x` under the block structure of the current mode.
    fn hess_apply(&self, k: usize, x: &[f64]) -> Vec<f64> {
        match self.mode {
            PropagationMode::LayerwiseBlock if self.layers.len() > 1 => {
                let mut out = vec![0.0; x.len()];
                for layer in &self.layers {
                    let r = layer.range();
                    let mut xi = vec![0.0; x.len()];
                    xi[r.clone()].copy_from_slice(&x[r.clone()]);
                    let hx = self.hvp(k, &xi);
                    out[r.clone()].copy_from_slice(&hx[r]);
                }
                out
            }
            _ => self.hvp(k, x),
        }
    }

    /// Dense `M_k` built from the explicit Hessian at step `k`.
    pub fn dense_propagator(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.check_step(k)?;
        Ok(self.dense[k].get_or_init(|| {
            let p = self.log.param_count();
            if self.log.is_skipped(k) {
                return DMatrix::identity(2 * p, 2 * p);
            }
            self.hvps.fetch_add(p, Ordering::Relaxed);
            let h = dense_hessian(&self.log.model_spec, &self.layers, self.log.theta(k), &self.batches[k]);
            let (eta, mu, lam) = self.hyper(k);
            let eye = DMatrix::<f64>::identity(p, p);
            let hl = &h + &eye * lam;
            let mut m = DMatrix::zeros(2 * p, 2 * p);
            m.view_mut((0, 0), (p, p)).copy_from(&(&eye - &hl * eta));
            m.view_mut((0, p), (p, p)).copy_from(&(&eye * (-eta * mu)));
            m.view_mut((p, 0), (p, p)).copy_from(&hl);
            m.view_mut((p, p), (p, p)).copy_from(&(&eye * mu));
            m
        }))
    }

    fn hyper(&self, k: usize) -> (f64, f64, f64) {
        let s = &self.log.schedule;
        (s.lr[k], s.momentum[k], s.weight_decay[k])
    }

    fn propagate_unchecked(&self, w: &EffectVector, k: usize) -> Result<EffectVector> {
        if self.log.is_skipped(k) {
            return Ok(w.clone());
        }
        let out = if self.mode == PropagationMode::ExplicitMatrix {
            let m = self.dense_propagator(k)?;
            EffectVector::from_stacked((m * DVector::from_vec(w.to_stacked())).as_slice())
        } else {
            let (eta, mu, lam) = self.hyper(k);
            let mut h = self.hess_apply(k, &w.theta);
            axpy(lam, &w.theta, &mut h);
            let theta = (0..h.len())
                .map(|i| w.theta[i] - eta * h[i] - eta * mu * w.velocity[i])
                .collect();
            let velocity = (0..h.len()).map(|i| h[i] + mu * w.velocity[i]).collect();
            EffectVector { theta, velocity }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("propagated effect at step {k}")));
        }
        Ok(out)
    }

    /// `M_k w`.
    pub fn propagate_one(&self, w: &EffectVector, k: usize) -> Result<EffectVector> {
        self.check_step(k)?;
        self.check_effect(w)?;
        self.propagate_unchecked(w, k)
    }

    /// `M_{to−1} ⋯ M_from w`; the identity when `from == to`.
    pub fn propagate_to(&self, w: &EffectVector, from: usize, to: usize) -> Result<EffectVector> {
        if from > to || to > self.num_steps() {
            return Err(Error::InvalidInput(format!(
                "propagation range {from}..{to} outside 0..={}",
                self.num_steps()
            )));
        }
        self.check_effect(w)?;
        let mut cur = w.clone();
        for k in from..to {
            cur = self.propagate_unchecked(&cur, k)?;
        }
        Ok(cur)
    }

    /// `Mᵀ_k u`, one Hessian-vector product using symmetry of `H_k`.
    pub fn propagate_one_transpose(&self, u: &EffectVector, k: usize) -> Result<EffectVector> {
        self.check_step(k)?;
        self.check_effect(u)?;
        self.transpose_unchecked(u, k)
    }

    fn transpose_unchecked(&self, u: &EffectVector, k: usize) -> Result<EffectVector> {
        if self.log.is_skipped(k) {
            return Ok(u.clone());
        }
        let out = if self.mode == PropagationMode::ExplicitMatrix {
            let m = self.dense_propagator(k)?;
            EffectVector::from_stacked((m.tr_mul(&DVector::from_vec(u.to_stacked()))).as_slice())
        } else {
            let (eta, mu, lam) = self.hyper(k);
            let c: Vec<f64> = u.velocity.iter().zip(&u.theta).map(|(b, a)| b - eta * a).collect();
            let mut h = self.hess_apply(k, &c);
            axpy(lam, &c, &mut h);
            EffectVector {
                theta: u.theta.iter().zip(&h).map(|(a, hc)| a + hc).collect(),
                velocity: c.iter().map(|ci| mu * ci).collect(),
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("adjoint state at step {k}")));
        }
        Ok(out)
    }

    /// Estimated effect of step `t` on the final state, `ŵ_{K,t}`.
    pub fn final_state_effect(&self, t: usize) -> Result<EffectVector> {
        let w = initial_effect(self.log, t)?;
        self.propagate_to(&w, t + 1, self.num_steps())
    }

    /// `E_t`, the θ-block of [`Self::final_state_effect`].
    pub fn step_param_effect(&self, t: usize) -> Result<ParameterVector> {
        Ok(self.final_state_effect(t)?.theta.into())
    }

    /// `E_t` for every step, computed in parallel.
    pub fn all_step_effects(&self) -> Result<Vec<ParameterVector>> {
        (0..self.num_steps())
            .into_par_iter()
            .map(|t| self.step_param_effect(t))
            .collect()
    }

    /// Effect of skipping every step of `stage` together, linearized around
    /// the observed trajectory. Member steps after the first act as the
    /// identity on the accumulated difference, as the skipped run does.
    pub fn stage_state_effect(&self, stage: &StageSpec) -> Result<EffectVector> {
        stage.check(self.num_steps())?;
        let mut delta = EffectVector::zeros(self.log.param_count());
        for k in stage.min()..self.num_steps() {
            if stage.contains(k) {
                let w = initial_effect(self.log, k)?;
                axpy(1.0, &w.theta, &mut delta.theta);
                axpy(1.0, &w.velocity, &mut delta.velocity);
            } else {
                delta = self.propagate_unchecked(&delta, k)?;
            }
        }
        Ok(delta)
    }

    /// Scores of every step for one performance gradient, by one backward
    /// sweep `u_K = (∇γ; 0)`, `u_k = M_kᵀ u_{k+1}`, `τ̂_t = u_{t+1}ᵀ w_{t+1,t}`.
    pub fn adjoint_step_scores(&self, perf_grad: &[f64]) -> Result<Vec<f64>> {
        let p = self.log.param_count();
        if perf_grad.len() != p {
            return Err(Error::DimensionMismatch {
                what: "performance gradient",
                expected: p,
                got: perf_grad.len(),
            });
        }
        let k = self.num_steps();
        let mut scores = vec![0.0; k];
        let mut u = EffectVector {
            theta: perf_grad.to_vec(),
            velocity: vec![0.0; p],
        };
        for t in (0..k).rev() {
            let w = initial_effect(self.log, t)?;
            scores[t] = dot(&u.theta, &w.theta) + dot(&u.velocity, &w.velocity);
            if t > 0 {
                u = self.transpose_unchecked(&u, t)?;
            }
        }
        Ok(scores)
    }

    /// Full attribution for `points`: step scores by the chosen direction,
    /// plus additive stage scores for each named stage.
    pub fn attribute(
        &self,
        points: &[TestPoint],
        perf: PerformanceKind,
        stages: &[(String, StageSpec)],
        direction: Direction,
    ) -> Result<AttributionResult> {
        let grads = final_perf_grads(self.log, points, perf)?;
        let per_point = match direction {
            Direction::Forward => {
                let effects = self.all_step_effects()?;
                forward_scores(&effects, &grads)?
            }
            Direction::Adjoint => grads
                .par_iter()
                .map(|(_, g)| self.adjoint_step_scores(g))
                .collect::<Result<Vec<_>>>()?,
        };
        AttributionResult::from_point_scores(self.log, per_point, stages, perf, self.mode, direction, self.hvp_count())
    }

    /// Stage scores from the joint estimator, one sweep per stage.
    pub fn joint_stage_scores(&self, stage: &StageSpec, points: &[TestPoint], perf: PerformanceKind) -> Result<Vec<f64>> {
        let e = self.stage_state_effect(stage)?;
        final_perf_grads(self.log, points, perf)?
            .iter()
            .map(|(_, g)| aa_score(&e.theta, g))
            .collect()
    }
}

/// `[point][step]` scores from precomputed `E_t` vectors.
pub fn forward_scores(effects: &[ParameterVector], grads: &[(f64, ParameterVector)]) -> Result<Vec<Vec<f64>>> {
    grads
        .iter()
        .map(|(_, g)| effects.iter().map(|e| aa_score(e, g)).collect())
        .collect()
}

/// Score-vector agreement used to compare the two propagation directions:
/// `max_t |a_t − b_t| / max_t max(|a_t|, |b_t|)`, zero when both vanish.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    crate::linalg::max_abs_diff(a, b) / scale
}

/// `‖w_{t+1,t}‖` summed over the stage.
pub fn initial_effect_mass(log: &TrajectoryLog, stage: &StageSpec) -> Result<f64> {
    stage.check(log.num_steps())?;
    stage.steps().iter().map(|&t| Ok(initial_effect(log, t)?.norm())).sum()
}
