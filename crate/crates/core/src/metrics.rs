//! Error metric, mixture loss, mismatch sets and convergence-exponent fits.

use crate::am::Trace;
use crate::datagen::{Instance, ParamSet};
use crate::error::{MixregError, Result};
use crate::linalg::{distance, dot};

/// Permutations are enumerated exactly up to this many components; larger
/// mixtures use an exact bottleneck assignment.
const ENUMERATE_MAX_K: usize = 4;

/// `min_π max_j ‖est_{π(j)} − truth_j‖`.
pub fn dist(est: &ParamSet, truth: &ParamSet) -> Result<f64> {
    best_matching(est, truth).map(|(d, _)| d)
}

/// The minimizing permutation alongside the distance: `est_{perm[j]}` is
/// matched to `truth_j`.
pub fn best_matching(est: &ParamSet, truth: &ParamSet) -> Result<(f64, Vec<usize>)> {
    if est.k() != truth.k() || est.dim() != truth.dim() {
        return Err(MixregError::DimensionMismatch(format!(
            "estimate is K={} d={}, truth is K={} d={}",
            est.k(),
            est.dim(),
            truth.k(),
            truth.dim()
        )));
    }
    let k = est.k();
    // cost[j][e]: distance from truth j to estimate e.
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|e| distance(est.theta(e), truth.theta(j))).collect())
        .collect();
    if k <= ENUMERATE_MAX_K {
        let mut best = (f64::INFINITY, Vec::new());
        for_each_permutation(k, &mut |perm| {
            let worst = perm.iter().enumerate().map(|(j, &e)| cost[j][e]).fold(0.0, f64::max);
            if worst < best.0 {
                best = (worst, perm.to_vec());
            }
        });
        Ok(best)
    } else {
        Ok(bottleneck_assignment(&cost))
    }
}

fn for_each_permutation(k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], f: &mut impl FnMut(&[usize])) {
        if prefix.len() == used.len() {
            f(prefix);
            return;
        }
        for e in 0..used.len() {
            if !used[e] {
                used[e] = true;
                prefix.push(e);
                rec(prefix, used, f);
                prefix.pop();
                used[e] = false;
            }
        }
    }
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], f);
}

/// Smallest threshold admitting a perfect matching, found by bisection over
/// the sorted costs with augmenting-path matching at each step.
fn bottleneck_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let k = cost.len();
    let mut levels: Vec<f64> = cost.iter().flatten().copied().collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let (mut lo, mut hi) = (0, levels.len() - 1);
    let mut best = perfect_matching(cost, levels[hi]).expect("complete graph has a perfect matching");
    while lo < hi {
        let mid = (lo + hi) / 2;
        match perfect_matching(cost, levels[mid]) {
            Some(m) => {
                best = m;
                hi = mid;
            }
            None => lo = mid + 1,
        }
    }
    let worst = (0..k).map(|j| cost[j][best[j]]).fold(0.0, f64::max);
    (worst, best)
}

fn perfect_matching(cost: &[Vec<f64>], threshold: f64) -> Option<Vec<usize>> {
    let k = cost.len();
    let mut owner: Vec<Option<usize>> = vec![None; k];
    fn augment(j: usize, cost: &[Vec<f64>], thr: f64, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for e in 0..cost.len() {
            if cost[j][e] <= thr && !seen[e] {
                seen[e] = true;
                if owner[e].is_none_or(|o| augment(o, cost, thr, seen, owner)) {
                    owner[e] = Some(j);
                    return true;
                }
            }
        }
        false
    }
    for j in 0..k {
        if !augment(j, cost, threshold, &mut vec![false; k], &mut owner) {
            return None;
        }
    }
    let mut perm = vec![0; k];
    for (e, o) in owner.iter().enumerate() {
        perm[o.expect("perfect matching")] = e;
    }
    Some(perm)
}

pub(crate) fn check_dims(inst: &Instance, params: &ParamSet) -> Result<()> {
    if inst.dim() != params.dim() {
        return Err(MixregError::DimensionMismatch(format!(
            "instance has d={} but parameters have d={}",
            inst.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// `y_i − ⟨x_i, θ_j⟩`
#[inline]
pub(crate) fn residual(inst: &Instance, i: usize, theta: &[f64]) -> f64 {
    inst.y()[i] - dot(inst.x().row(i), theta)
}

/// `Σ_i min_j (y_i − ⟨x_i, θ_j⟩)²`
pub fn loss(inst: &Instance, params: &ParamSet) -> Result<f64> {
    check_dims(inst, params)?;
    Ok((0..inst.n())
        .map(|i| {
            params
                .thetas()
                .iter()
                .map(|t| residual(inst, i, t).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum())
}

/// Samples generated by component 2 that the current iterate attributes
/// strictly to component 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MismatchReport {
    pub indices: Vec<usize>,
    pub size: usize,
    /// `dist(params, truth)` when the instance carries its ground truth,
    /// NaN otherwise.
    pub dist_at_eval: f64,
}

pub fn mismatch_set(inst: &Instance, params: &ParamSet) -> Result<MismatchReport> {
    if params.k() != 2 {
        return Err(MixregError::UnsupportedK(params.k()));
    }
    check_dims(inst, params)?;
    let z = inst.labels().ok_or(MixregError::MissingLabels)?;
    let indices: Vec<usize> = (0..inst.n())
        .filter(|&i| z[i] == 1)
        .filter(|&i| residual(inst, i, params.theta(0)).powi(2) < residual(inst, i, params.theta(1)).powi(2))
        .collect();
    let dist_at_eval = match inst.truth() {
        Some(t) if t.k() == 2 => dist(params, &t.params())?,
        _ => f64::NAN,
    };
    Ok(MismatchReport { size: indices.len(), indices, dist_at_eval })
}

/// Admissible range of dist values for a rate fit: `lower < v ≤ upper`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    pub lower: f64,
    pub upper: f64,
}

impl Window {
    pub const DEFAULT_LOWER: f64 = 1e-9;

    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    /// `(1e-9, seq[0]]`
    pub fn for_sequence(seq: &[f64]) -> Self {
        Self { lower: Self::DEFAULT_LOWER, upper: seq.first().copied().unwrap_or(f64::INFINITY) }
    }

    pub fn admits(&self, v: f64) -> bool {
        v > 0.0 && v > self.lower && v <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
    pub window: Window,
}

/// `(log dist_t, log dist_{t+1})` for consecutive pairs with both values in
/// the window.
pub fn log_log_pairs(seq: &[f64], window: Window) -> Vec<(f64, f64)> {
    seq.windows(2)
        .filter(|w| window.admits(w[0]) && window.admits(w[1]))
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect()
}

/// Least-squares line through the log-log pairs; the slope is the empirical
/// convergence exponent (1 for linear, 2 for quadratic convergence).
pub fn fit_convergence_exponent(seq: &[f64], window: Window) -> Result<RateFit> {
    let pairs = log_log_pairs(seq, window);
    if pairs.len() < 2 {
        return Err(MixregError::InsufficientPoints { found: pairs.len() });
    }
    let (slope, intercept, r_squared) = fit_line(&pairs)?;
    Ok(RateFit { slope, intercept, r_squared, points_used: pairs.len(), window })
}

/// Ordinary least-squares line `y = intercept + slope · x`; returns
/// `(slope, intercept, R²)`.
pub fn fit_line(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MixregError::InsufficientPoints { found: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok((slope, intercept, r2))
}

/// Per-iteration `dist(iterate_t, reference)`.
pub fn optimization_error_seq(trace: &Trace, reference: &ParamSet) -> Result<Vec<f64>> {
    trace.iterates.iter().map(|it| dist(it, reference)).collect()
}

/// Element-wise mean of sequences of unequal length; a sequence that
/// stopped early contributes its final value to later positions.
pub fn mean_curve(seqs: &[Vec<f64>], len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            let vals: Vec<f64> = seqs.iter().filter_map(|s| s.get(t).or(s.last()).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}
