use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{initial_effect_mass, Attributor, EffectVector, PropagationMode, StageSpec};
use crate::error::{Error, Result};
use crate::linalg::{norm, random_unit, spectral_norm, sub};
use crate::model::{hvp_unchecked, perf_hvp, perf_value_grad, Dataset, PerformanceKind, TestPoint};
use crate::training::TrajectoryLog;

/// Constants of the stage error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundInputs {
    /// Lipschitz constant of the loss Hessian.
    #[serde(rename = "hessian_lipschitz_L")]
    pub hessian_lipschitz: f64,
    /// Local stability constant: `‖M_k‖ ≤ exp(η_k Λ)`.
    #[serde(rename = "stability_Lambda")]
    pub stability: f64,
    pub eta_max: f64,
    /// Bound on `‖∇γ‖`.
    #[serde(rename = "grad_bound_G1")]
    pub grad_bound: f64,
    /// Bound on `‖∇²γ‖₂`.
    #[serde(rename = "hess_bound_G2")]
    pub hess_bound: f64,
    /// `Σ_{t∈S} ‖w_{t+1,t}‖` over the full state.
    #[serde(rename = "D_S")]
    pub d_s: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "min_S")]
    pub min_s: usize,
}

/// `(L_γ D_S² / 2) · exp(2 η Λ (K − min S))` with
/// `L_γ = G1 √(1+η²) L (K − min S) + G2`.
pub fn error_bound(b: &ErrorBoundInputs) -> Result<f64> {
    for (name, v) in [
        ("L", b.hessian_lipschitz),
        ("Lambda", b.stability),
        ("eta", b.eta_max),
        ("G1", b.grad_bound),
        ("G2", b.hess_bound),
        ("D_S", b.d_s),
    ] {
        if !(v >= 0.0) {
            return Err(Error::InvalidInput(format!("bound constant {name} = {v} must be >= 0")));
        }
    }
    if b.min_s >= b.k {
        return Err(Error::InvalidInput(format!("min S = {} must be below K = {}", b.min_s, b.k)));
    }
    let horizon = (b.k - b.min_s) as f64;
    let l_gamma = b.grad_bound * (1.0 + b.eta_max * b.eta_max).sqrt() * b.hessian_lipschitz * horizon + b.hess_bound;
    if l_gamma == 0.0 || b.d_s == 0.0 {
        return Ok(0.0);
    }
    Ok(l_gamma * b.d_s * b.d_s / 2.0 * (2.0 * b.eta_max * b.stability * horizon).exp())
}

const POWER_ITERS: usize = 40;

/// Sampled estimates of the bound constants for `stage` on `log`.
///
/// `L` is the largest observed `‖(H(θ) − H(θ'))u‖ / (‖θ − θ'‖‖u‖)` over
/// `samples` random pairs of logged parameters and unit directions. `Λ` is
/// the largest `ln‖M_k‖ / η_k` over the sampled steps with `η_k > 0`,
/// floored at zero. `G1`, `G2` are the largest gradient norm and Hessian
/// spectral norm of `γ` at `θ_K` over `points`. These are diagnostics, not
/// guarantees.
pub fn estimate_bound_constants(
    log: &TrajectoryLog,
    dataset: &Dataset,
    points: &[TestPoint],
    perf: PerformanceKind,
    stage: &StageSpec,
    samples: usize,
    seed: u64,
) -> Result<ErrorBoundInputs> {
    if samples == 0 {
        return Err(Error::InvalidInput("at least one sample is needed".into()));
    }
    let k = log.num_steps();
    stage.check(k)?;
    let spec = &log.model_spec;
    let layers = spec.layers();
    let p = log.param_count();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lipschitz = 0.0f64;
    for _ in 0..samples {
        let a = rng.random_range(0..=k);
        let b = rng.random_range(0..=k);
        let u = random_unit(&mut rng, p);
        let batch = dataset.select(log.batches.batch(a.min(k - 1)))?;
        let dist = norm(&sub(log.theta(a), log.theta(b)));
        if dist == 0.0 {
            continue;
        }
        let ha = hvp_unchecked(spec, &layers, log.theta(a), &batch, &u);
        let hb = hvp_unchecked(spec, &layers, log.theta(b), &batch, &u);
        lipschitz = lipschitz.max(norm(&sub(&ha, &hb)) / dist);
    }

    let attributor = Attributor::new(log, dataset, PropagationMode::HvpVector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut stability = 0.0f64;
    for _ in 0..samples.min(k) {
        let step = rng.random_range(0..k);
        let eta = log.schedule.lr[step];
        if eta == 0.0 || log.is_skipped(step) {
            continue;
        }
        let s = spectral_norm(
            2 * p,
            |x| attributor.propagate_one(&EffectVector::from_stacked(x), step).map(|w| w.to_stacked()).unwrap_or_default(),
            |x| attributor.propagate_one_transpose(&EffectVector::from_stacked(x), step).map(|w| w.to_stacked()).unwrap_or_default(),
            POWER_ITERS,
            &mut rng,
        );
        if s > 0.0 {
            stability = stability.max(s.ln() / eta);
        }
    }

    let theta_k = log.final_theta();
    let mut g1 = 0.0f64;
    let mut g2 = 0.0f64;
    for pt in points {
        let (_, g) = perf_value_grad(spec, theta_k, pt, perf)?;
        g1 = g1.max(norm(&g));
        let apply = |x: &[f64]| perf_hvp(spec, theta_k, pt, perf, x).map(|v| v.into_inner()).unwrap_or_default();
        g2 = g2.max(spectral_norm(p, apply, apply, POWER_ITERS, &mut rng));
    }

    Ok(ErrorBoundInputs {
        hessian_lipschitz: lipschitz,
        stability,
        eta_max: log.schedule.lr.iter().copied().fold(0.0, f64::max),
        grad_bound: g1,
        hess_bound: g2,
        d_s: initial_effect_mass(log, stage)?,
        k,
        min_s: stage.min(),
    })
}
