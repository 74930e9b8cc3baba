//! Spectral initialization for two components: second-moment matrix, its
//! top-2 eigen-subspace, and an exhaustive grid search over pairs of points
//! in that plane.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Instance, ParamSet};
use crate::error::{MixregError, Result};
use crate::linalg::{axpy, top_k_eigpairs, Matrix};

/// `(1/n) Σ_i y_i² x_i x_iᵀ`, assembled on the upper triangle and mirrored
/// so the result is exactly symmetric.
pub fn moment_matrix(inst: &Instance) -> Matrix {
    let (n, d) = (inst.n(), inst.dim());
    let mut upper = vec![0.0; d * d];
    for i in 0..n {
        let x = inst.x().row(i);
        let w = inst.y()[i] * inst.y()[i];
        for a in 0..d {
            let coeff = w * x[a];
            axpy(coeff, &x[a..], &mut upper[a * d + a..(a + 1) * d]);
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut m = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = upper[a * d + b] * inv_n;
            m.set(a, b, v);
            m.set(b, a, v);
        }
    }
    m
}

/// Orthonormal basis (`d × 2`, columns) of the top-2 eigen-subspace.
pub fn init_subspace(m: &Matrix) -> Result<Matrix> {
    if m.rows() < 2 {
        return Err(MixregError::InvalidArgument("subspace initialization needs d >= 2".into()));
    }
    Ok(top_k_eigpairs(m, 2)?.vectors)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Points per basis direction, `G`.
    pub points_per_axis: usize,
    /// Coefficients range over `[−R, R]`.
    pub radius: f64,
}

impl GridSpec {
    pub const DEFAULT_POINTS: usize = 41;

    pub fn new(points_per_axis: usize, radius: f64) -> Result<Self> {
        let g = Self { points_per_axis, radius };
        g.validate()?;
        Ok(g)
    }

    /// `G = 41`, `R = 1.5 · sqrt(mean y²)`.
    pub fn for_instance(inst: &Instance) -> Self {
        let mean_sq = inst.y().iter().map(|y| y * y).sum::<f64>() / inst.n() as f64;
        let radius = 1.5 * mean_sq.sqrt();
        Self { points_per_axis: Self::DEFAULT_POINTS, radius: if radius > 0.0 { radius } else { 1.0 } }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points_per_axis == 0 {
            return Err(MixregError::InvalidArgument("grid needs at least one point per axis".into()));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(MixregError::InvalidArgument("grid radius must be > 0".into()));
        }
        Ok(())
    }

    /// Equispaced coefficients on `[−R, R]`; a single point sits at 0.
    pub fn coefficients(&self) -> Vec<f64> {
        let g = self.points_per_axis;
        if g == 1 {
            return vec![0.0];
        }
        let step = 2.0 * self.radius / (g - 1) as f64;
        (0..g).map(|i| -self.radius + step * i as f64).collect()
    }
}

/// Best unordered pair `(u, v)` (including `u = v`) of grid points
/// `a·b₁ + c·b₂` under the mixture loss. Candidates are indexed
/// lexicographically by `(a, c)` and ties go to the lexicographically
/// smallest pair of indices.
pub fn grid_init(inst: &Instance, basis: &Matrix, grid: &GridSpec) -> Result<ParamSet> {
    grid_search(inst, basis, grid).map(|(p, _)| p)
}

/// As [`grid_init`], also returning the minimal loss.
pub fn grid_search(inst: &Instance, basis: &Matrix, grid: &GridSpec) -> Result<(ParamSet, f64)> {
    grid.validate()?;
    if basis.rows() != inst.dim() || basis.cols() != 2 {
        return Err(MixregError::DimensionMismatch(format!(
            "basis is {}x{}, expected {}x2",
            basis.rows(),
            basis.cols(),
            inst.dim()
        )));
    }
    let n = inst.n();
    let b1 = basis.column(0);
    let b2 = basis.column(1);
    let p1 = inst.x().matvec(&b1);
    let p2 = inst.x().matvec(&b2);
    let coeffs = grid.coefficients();
    let candidates: Vec<(f64, f64)> = coeffs.iter().flat_map(|&a| coeffs.iter().map(move |&c| (a, c))).collect();

    // Squared residual of every sample under every candidate, candidate-major.
    let sq: Vec<f64> = candidates
        .iter()
        .flat_map(|&(a, c)| (0..n).map(move |i| (a, c, i)))
        .map(|(a, c, i)| {
            let r = inst.y()[i] - (a * p1[i] + c * p2[i]);
            r * r
        })
        .collect();
    let row = |u: usize| &sq[u * n..(u + 1) * n];

    let m = candidates.len();
    let (best_loss, bu, bv) = (0..m)
        .into_par_iter()
        .map(|u| {
            let ru = row(u);
            let mut best = (f64::INFINITY, u, u);
            for v in u..m {
                let rv = row(v);
                let total: f64 = ru.iter().zip(rv).map(|(a, b)| a.min(*b)).sum();
                if total < best.0 {
                    best = (total, u, v);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, usize::MAX),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a },
        );

    let point = |u: usize| -> Vec<f64> {
        let (a, c) = candidates[u];
        b1.iter().zip(&b2).map(|(x, y)| a * x + c * y).collect()
    };
    Ok((ParamSet::new(vec![point(bu), point(bv)])?, best_loss))
}

/// Moment matrix, top-2 subspace and grid search in sequence.
pub fn spectral_init(inst: &Instance, grid: Option<GridSpec>) -> Result<ParamSet> {
    let basis = init_subspace(&moment_matrix(inst))?;
    let grid = grid.unwrap_or_else(|| GridSpec::for_instance(inst));
    grid_init(inst, &basis, &grid)
}
