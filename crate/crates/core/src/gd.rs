//! Gradient heuristic: the label step of alternating minimization followed
//! by one full-batch gradient step per component instead of a
//! least-squares solve.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::am::{assign_labels, Recorder, Trace};
use crate::datagen::{Instance, ParamSet};
use crate::error::{MixregError, Result};
use crate::linalg::axpy;
use crate::metrics::{check_dims, residual};

/// Loss growth (relative to the initial loss) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
pub const DEFAULT_PROBE_ROUNDS: usize = 10;
/// Upper bound on doublings in the step-size search.
pub const MAX_DOUBLINGS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub gamma: f64,
    pub max_rounds: usize,
    pub tol: f64,
    pub target_precision: Option<f64>,
    pub track_truth: bool,
}

impl GdConfig {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, max_rounds: 500, tol: 1e-12, target_precision: None, track_truth: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(MixregError::InvalidArgument(format!("step size must be > 0, got {}", self.gamma)));
        }
        if self.max_rounds == 0 {
            return Err(MixregError::InvalidArgument("max_rounds must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(MixregError::InvalidArgument("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// `θ_j⁺ = θ_j − γ Σ_{i: z_i = j} 2 (⟨x_i, θ_j⟩ − y_i) x_i`
pub fn gd_step(inst: &Instance, params: &ParamSet, labels: &[usize], gamma: f64) -> Result<ParamSet> {
    check_dims(inst, params)?;
    if labels.len() != inst.n() {
        return Err(MixregError::DimensionMismatch(format!("{} labels for {} samples", labels.len(), inst.n())));
    }
    let k = params.k();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(MixregError::InvalidArgument(format!("label {bad} out of range for K = {k}")));
    }
    let mut grads = vec![vec![0.0; params.dim()]; k];
    for (i, &j) in labels.iter().enumerate() {
        let r = residual(inst, i, params.theta(j));
        axpy(2.0 * r, inst.x().row(i), &mut grads[j]);
    }
    apply_step(params, &grads, gamma)
}

/// Fails when the step overflows to non-finite parameters.
fn apply_step(params: &ParamSet, neg_grads: &[Vec<f64>], gamma: f64) -> Result<ParamSet> {
    let thetas = params
        .thetas()
        .iter()
        .zip(neg_grads)
        .map(|(theta, g)| theta.iter().zip(g).map(|(t, gi)| t + gamma * gi).collect())
        .collect();
    ParamSet::new(thetas)
}

/// Label step and gradient step in one pass over the samples; the
/// residuals used for the labels are reused for the gradient, so the result
/// is bit-identical to `assign_labels` followed by `gd_step`.
fn fused_round(inst: &Instance, params: &ParamSet, gamma: f64) -> Result<ParamSet> {
    let k = params.k();
    let mut grads = vec![vec![0.0; params.dim()]; k];
    for i in 0..inst.n() {
        let mut best = (0, f64::INFINITY, 0.0);
        for (j, theta) in params.thetas().iter().enumerate() {
            let r = residual(inst, i, theta);
            if r.abs() < best.1 {
                best = (j, r.abs(), r);
            }
        }
        axpy(2.0 * best.2, inst.x().row(i), &mut grads[best.0]);
    }
    apply_step(params, &grads, gamma)
}

/// Runs the gradient heuristic. Fails with `Divergence` once the loss
/// exceeds `DIVERGENCE_FACTOR` times its initial value or stops being
/// finite.
pub fn run_gd(inst: &Instance, init: &ParamSet, cfg: &GdConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut rec = Recorder::new(inst, init, cfg.track_truth, cfg.target_precision)?;
    if rec.trace.target_reached_at.is_some() {
        return rec.finish();
    }
    let initial_loss = rec.trace.loss_seq[0];
    for round in 0..cfg.max_rounds {
        let start = Instant::now();
        let next = fused_round(inst, rec.current(), cfg.gamma);
        rec.trace.wall_clock_per_iter.push(start.elapsed().as_secs_f64());
        let Ok(next) = next else {
            return Err(MixregError::Divergence { round: round + 1, loss: f64::INFINITY });
        };
        let movement = next.max_component_distance(rec.current());
        let hit = rec.push(next)?;
        let current_loss = *rec.trace.loss_seq.last().expect("just pushed");
        if !current_loss.is_finite() || current_loss > DIVERGENCE_FACTOR * initial_loss {
            return Err(MixregError::Divergence { round: round + 1, loss: current_loss });
        }
        if hit {
            break;
        }
        if movement < cfg.tol || movement == 0.0 {
            rec.trace.converged_at = Some(round + 1);
            break;
        }
    }
    rec.finish()
}

/// Outcome of the doubling search.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSearch {
    pub gamma: f64,
    pub gamma0: f64,
    /// Number of successful doublings beyond `gamma0`.
    pub doublings: usize,
    /// First step size that failed its probe, if any did.
    pub first_failure: Option<f64>,
}

/// Largest step size `γ₀ · 2^k`, `γ₀ = 1 / (4n)`, whose probe run keeps the
/// loss non-increasing.
pub fn tune_step_size(inst: &Instance, init: &ParamSet, probe_rounds: usize) -> Result<f64> {
    search_step_size(inst, init, probe_rounds, MAX_DOUBLINGS).map(|s| s.gamma)
}

pub fn search_step_size(inst: &Instance, init: &ParamSet, probe_rounds: usize, max_doublings: usize) -> Result<StepSearch> {
    if probe_rounds < 2 {
        return Err(MixregError::InvalidArgument("probe_rounds must be >= 2".into()));
    }
    check_dims(inst, init)?;
    let gamma0 = 1.0 / (4.0 * inst.n() as f64);
    let mut passed: Option<usize> = None;
    let mut first_failure = None;
    for k in 0..=max_doublings {
        let gamma = gamma0 * 2f64.powi(k as i32);
        if probe_is_stable(inst, init, gamma, probe_rounds)? {
            passed = Some(k);
        } else {
            first_failure = Some(gamma);
            break;
        }
    }
    match passed {
        None => Err(MixregError::NoStableStep { gamma0 }),
        Some(k) => Ok(StepSearch { gamma: gamma0 * 2f64.powi(k as i32), gamma0, doublings: k, first_failure }),
    }
}

fn probe_is_stable(inst: &Instance, init: &ParamSet, gamma: f64, rounds: usize) -> Result<bool> {
    let cfg = GdConfig { gamma, max_rounds: rounds, tol: 0.0, target_precision: None, track_truth: false };
    match run_gd(inst, init, &cfg) {
        Ok(trace) => Ok(trace.loss_seq.windows(2).all(|w| w[1] <= w[0])),
        Err(MixregError::Divergence { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Convenience: labels from the current iterate followed by one step.
pub fn gd_round(inst: &Instance, params: &ParamSet, gamma: f64) -> Result<ParamSet> {
    let labels = assign_labels(inst, params)?;
    gd_step(inst, params, &labels, gamma)
}
