//! Dense linear-algebra kernel: Gaussian sampling, least squares and a
//! top-k symmetric eigensolver.

use crate::error::{MixregError, Result};
use crate::rng::{streams, SeededStream};

/// Dense row-major matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MixregError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MixregError::InvalidArgument("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MixregError::DimensionMismatch("ragged rows".into()));
        }
        Self::from_row_major(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ x`
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "t_matvec dimension");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                axpy(a, other.row(k), out_row);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `n × d` matrix of independent standard normals drawn from the seeded
/// covariate stream.
pub fn standard_gaussian_matrix(seed: u64, n: usize, d: usize) -> Matrix {
    let mut stream = SeededStream::new(seed, streams::COVARIATES);
    Matrix { rows: n, cols: d, data: stream.gaussian_vec(n * d) }
}

/// Result of a least-squares solve.
#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares {
    pub x: Vec<f64>,
    /// Numerical rank: pivots of the triangular factor above `1e-10` times the largest one.
    pub rank: usize,
}

impl LeastSquares {
    /// Informational: the design had fewer than `d` independent columns and
    /// `x` is the minimum-norm minimizer.
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.x.len()
    }
}

const RANK_TOL: f64 = 1e-10;

/// Minimum-norm minimizer of `‖A x − b‖²` through a column-pivoted
/// Householder QR, completed to an orthogonal decomposition when `A` is
/// rank deficient.
pub fn solve_least_squares(a: &Matrix, b: &[f64]) -> Result<LeastSquares> {
    if b.len() != a.rows {
        return Err(MixregError::DimensionMismatch(format!(
            "design has {} rows but response has {}",
            a.rows,
            b.len()
        )));
    }
    let rows: Vec<usize> = (0..a.rows).collect();
    solve_least_squares_rows(a, b, &rows)
}

/// Least squares restricted to a subset of rows of `(A, b)`; avoids
/// materializing the sub-design.
pub fn solve_least_squares_rows(a: &Matrix, b: &[f64], rows: &[usize]) -> Result<LeastSquares> {
    let (m, n) = (rows.len(), a.cols);
    if n == 0 {
        return Err(MixregError::InvalidArgument("design has no columns".into()));
    }
    if m == 0 {
        return Ok(LeastSquares { x: vec![0.0; n], rank: 0 });
    }
    let mut cm = vec![0.0; m * n];
    for (r, &i) in rows.iter().enumerate() {
        for (j, &v) in a.row(i).iter().enumerate() {
            cm[j * m + r] = v;
        }
    }
    let rhs: Vec<f64> = rows.iter().map(|&i| b[i]).collect();
    if m >= n {
        // Well-conditioned designs skip pivoting; a collapsing diagonal
        // sends the solve through the rank-revealing path instead.
        let qr = HouseholderQr::factor_blocked(cm.clone(), m, n);
        let diag = (0..n).map(|k| qr.r(k, k).abs());
        let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi > 0.0 && lo > PIVOT_FALLBACK_RATIO * hi {
            return Ok(qr.solve_min_norm(rhs));
        }
    }
    let qr = HouseholderQr::factor(cm, m, n, true);
    Ok(qr.solve_min_norm(rhs))
}

const PIVOT_FALLBACK_RATIO: f64 = 1e-7;
const PANEL_WIDTH: usize = 32;

/// Householder QR in column-major storage. `R` sits on and above the
/// diagonal, reflector tails below it (LAPACK `geqp3` layout).
struct HouseholderQr {
    m: usize,
    n: usize,
    a: Vec<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
}

impl HouseholderQr {
    fn factor(mut a: Vec<f64>, m: usize, n: usize, pivot: bool) -> Self {
        let steps = m.min(n);
        let mut tau = vec![0.0; steps];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut vn1: Vec<f64> = if pivot {
            (0..n).map(|j| norm(&a[j * m..(j + 1) * m])).collect()
        } else {
            Vec::new()
        };
        let mut vn2 = vn1.clone();
        let tol3z = f64::EPSILON.sqrt();

        for k in 0..steps {
            if pivot {
                let p = k + argmax(&vn1[k..]);
                if p != k {
                    for i in 0..m {
                        a.swap(p * m + i, k * m + i);
                    }
                    perm.swap(p, k);
                    vn1[p] = vn1[k];
                    vn2[p] = vn2[k];
                }
            }
            let (head, tail) = a.split_at_mut((k + 1) * m);
            let col_k = &mut head[k * m + k..(k + 1) * m];
            tau[k] = make_reflector(col_k);
            let v = &col_k[1..];
            let t = tau[k];
            if t != 0.0 {
                for j in (k + 1)..n {
                    let col = &mut tail[(j - k - 1) * m + k..(j - k) * m];
                    apply_reflector(t, v, col);
                }
            }
            if pivot {
                for j in (k + 1)..n {
                    if vn1[j] == 0.0 {
                        continue;
                    }
                    let akj = a[j * m + k].abs();
                    let temp = (1.0 - (akj / vn1[j]).powi(2)).max(0.0);
                    let temp2 = temp * (vn1[j] / vn2[j]).powi(2);
                    if temp2 <= tol3z {
                        vn1[j] = if k + 1 < m { norm(&a[j * m + k + 1..(j + 1) * m]) } else { 0.0 };
                        vn2[j] = vn1[j];
                    } else {
                        vn1[j] *= temp.sqrt();
                    }
                }
            }
        }
        Self { m, n, a, tau, perm }
    }

    /// Unpivoted factorization with reflectors applied panel by panel, so
    /// each trailing column stays in cache while a whole panel of
    /// reflectors sweeps over it.
    fn factor_blocked(mut a: Vec<f64>, m: usize, n: usize) -> Self {
        let steps = m.min(n);
        let mut tau = vec![0.0; steps];
        let mut start = 0;
        while start < steps {
            let end = (start + PANEL_WIDTH).min(steps);
            for k in start..end {
                let (head, tail) = a.split_at_mut(k * m);
                let col = &mut tail[..m];
                for r in start..k {
                    if tau[r] != 0.0 {
                        apply_reflector(tau[r], &head[r * m + r + 1..(r + 1) * m], &mut col[r..]);
                    }
                }
                tau[k] = make_reflector(&mut col[k..]);
            }
            let (head, tail) = a.split_at_mut(end * m);
            for col in tail.chunks_exact_mut(m) {
                for r in start..end {
                    if tau[r] != 0.0 {
                        apply_reflector(tau[r], &head[r * m + r + 1..(r + 1) * m], &mut col[r..]);
                    }
                }
            }
            start = end;
        }
        Self { m, n, a, tau, perm: (0..n).collect() }
    }

    #[inline]
    fn r(&self, i: usize, j: usize) -> f64 {
        self.a[j * self.m + i]
    }

    /// Applies `Qᵀ` to a length-`m` vector.
    fn apply_qt(&self, b: &mut [f64]) {
        for (k, &t) in self.tau.iter().enumerate() {
            if t != 0.0 {
                let v = &self.a[k * self.m + k + 1..(k + 1) * self.m];
                apply_reflector(t, v, &mut b[k..]);
            }
        }
    }

    /// Applies `Q` to a length-`m` vector.
    fn apply_q(&self, b: &mut [f64]) {
        for (k, &t) in self.tau.iter().enumerate().rev() {
            if t != 0.0 {
                let v = &self.a[k * self.m + k + 1..(k + 1) * self.m];
                apply_reflector(t, v, &mut b[k..]);
            }
        }
    }

    fn numerical_rank(&self) -> usize {
        let steps = self.tau.len();
        if steps == 0 {
            return 0;
        }
        let r00 = self.r(0, 0).abs();
        if r00 == 0.0 {
            return 0;
        }
        (0..steps).take_while(|&k| self.r(k, k).abs() > RANK_TOL * r00).count()
    }

    fn solve_min_norm(&self, mut b: Vec<f64>) -> LeastSquares {
        let n = self.n;
        self.apply_qt(&mut b);
        let rank = self.numerical_rank();
        let mut z = vec![0.0; n];
        if rank == n {
            back_substitute(|i, j| self.r(i, j), &b[..n], &mut z);
        } else if rank > 0 {
            // Complete orthogonal decomposition: [R11 R12]ᵀ = Z U, so the
            // minimum-norm solution of [R11 R12] z = c is Z (U⁻ᵀ c).
            let r = rank;
            let mut trap_t = vec![0.0; n * r];
            for i in 0..r {
                for j in i..n {
                    trap_t[i * n + j] = self.r(i, j);
                }
            }
            let cod = HouseholderQr::factor(trap_t, n, r, false);
            let mut w = vec![0.0; n];
            for i in 0..r {
                let mut s = b[i];
                for j in 0..i {
                    s -= cod.r(j, i) * w[j];
                }
                w[i] = s / cod.r(i, i);
            }
            cod.apply_q(&mut w);
            z = w;
        }
        let mut x = vec![0.0; n];
        for (j, &p) in self.perm.iter().enumerate() {
            x[p] = z[j];
        }
        LeastSquares { x, rank }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Overwrites `x = [alpha, tail…]` with `[beta, v…]` where
/// `(I − τ [1; v][1; v]ᵀ) x = beta e₁`; returns τ.
fn make_reflector(x: &mut [f64]) -> f64 {
    let alpha = x[0];
    let xnorm = norm(&x[1..]);
    if xnorm == 0.0 {
        return 0.0;
    }
    let beta = -alpha.signum() * alpha.hypot(xnorm);
    let scale = 1.0 / (alpha - beta);
    for v in &mut x[1..] {
        *v *= scale;
    }
    x[0] = beta;
    (beta - alpha) / beta
}

#[inline]
fn apply_reflector(tau: f64, v: &[f64], c: &mut [f64]) {
    let (c0, rest) = c.split_first_mut().expect("reflector target is non-empty");
    let w = tau * (*c0 + dot(v, rest));
    *c0 -= w;
    axpy(-w, v, rest);
}

fn back_substitute(r: impl Fn(usize, usize) -> f64, c: &[f64], x: &mut [f64]) {
    let n = c.len();
    for i in (0..n).rev() {
        let mut s = c[i];
        for j in (i + 1)..n {
            s -= r(i, j) * x[j];
        }
        x[i] = s / r(i, i);
    }
}

/// Leading eigenpairs of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EigPairs {
    /// Algebraically largest eigenvalues, descending.
    pub values: Vec<f64>,
    /// `d × k`; column `j` is the unit eigenvector for `values[j]`, signed so
    /// that its largest-magnitude entry is positive.
    pub vectors: Matrix,
}

impl EigPairs {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.column(j)
    }
}

pub const SYMMETRY_TOL: f64 = 1e-9;
pub const EIG_TOL: f64 = 1e-9;
pub const EIG_MAX_ITERS: usize = 10_000;

/// Top-`k` eigenpairs of a symmetric matrix by block power (subspace)
/// iteration with Rayleigh–Ritz extraction.
///
/// The matrix is shifted by its Gershgorin lower bound so that the
/// dominant eigenvalues in magnitude are the algebraically largest ones.
pub fn top_k_eigpairs(s: &Matrix, k: usize) -> Result<EigPairs> {
    let d = s.rows;
    if s.cols != d {
        return Err(MixregError::DimensionMismatch(format!("{}x{} is not square", s.rows, s.cols)));
    }
    if k == 0 || k > d {
        return Err(MixregError::InvalidArgument(format!("k = {k} must lie in 1..={d}")));
    }
    let scale = s.max_abs();
    let mut asym: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    let tolerance = SYMMETRY_TOL * scale;
    if asym > tolerance {
        return Err(MixregError::NotSymmetric { asymmetry: asym, tolerance });
    }

    // Work on the exactly symmetric part, column-major == row-major here.
    let mut b = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            b.data[i * d + j] = 0.5 * (s.get(i, j) + s.get(j, i));
        }
    }
    let gersh = (0..d)
        .map(|i| {
            let off: f64 = (0..d).filter(|&j| j != i).map(|j| b.get(i, j).abs()).sum();
            b.get(i, i) - off
        })
        .fold(f64::INFINITY, f64::min);
    let shift = if gersh < 0.0 { -gersh } else { 0.0 };
    for i in 0..d {
        b.data[i * d + i] += shift;
    }

    let p = d.min(k + 5);
    let mut start = SeededStream::new(0x5EED_E16E, streams::EIGEN_START);
    // Block stored column-major: column c at q[c*d..(c+1)*d].
    let mut q = start.gaussian_vec(d * p);
    orthonormalize(&mut q, d, p, &mut start);

    let mut y = vec![0.0; d * p];
    for _ in 0..EIG_MAX_ITERS {
        for c in 0..p {
            let col = &q[c * d..(c + 1) * d];
            for i in 0..d {
                y[c * d + i] = dot(b.row(i), col);
            }
        }
        let mut h = vec![0.0; p * p];
        for a in 0..p {
            for c in a..p {
                let v = 0.5 * (dot(&q[a * d..(a + 1) * d], &y[c * d..(c + 1) * d])
                    + dot(&q[c * d..(c + 1) * d], &y[a * d..(a + 1) * d]));
                h[a * p + c] = v;
                h[c * p + a] = v;
            }
        }
        let (theta, w) = jacobi_eigen(&mut h, p);
        let ritz = rotate_block(&q, &w, d, p);
        let image = rotate_block(&y, &w, d, p);

        let converged = (0..k).all(|j| {
            let v = &ritz[j * d..(j + 1) * d];
            let bv = &image[j * d..(j + 1) * d];
            let res: f64 = bv.iter().zip(v).map(|(a, b)| (a - theta[j] * b).powi(2)).sum::<f64>().sqrt();
            res <= EIG_TOL * (1.0 + (theta[j] - shift).abs())
        });
        if converged {
            let mut vectors = Matrix::zeros(d, k);
            for j in 0..k {
                let col = &ritz[j * d..(j + 1) * d];
                let nrm = norm(col);
                let big = col.iter().fold(0.0f64, |m, &v| if v.abs() > m.abs() { v } else { m });
                let sign = if big < 0.0 { -1.0 } else { 1.0 };
                for i in 0..d {
                    vectors.set(i, j, sign * col[i] / nrm);
                }
            }
            let values = theta[..k].iter().map(|t| t - shift).collect();
            return Ok(EigPairs { values, vectors });
        }
        q = image;
        orthonormalize(&mut q, d, p, &mut start);
    }
    Err(MixregError::NoConvergence { iterations: EIG_MAX_ITERS })
}

/// `block · W` for a column-major `d × p` block and row-major `p × p` `W`.
fn rotate_block(block: &[f64], w: &[f64], d: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * p];
    for c in 0..p {
        let dst = &mut out[c * d..(c + 1) * d];
        for a in 0..p {
            let coeff = w[a * p + c];
            if coeff != 0.0 {
                axpy(coeff, &block[a * d..(a + 1) * d], dst);
            }
        }
    }
    out
}

/// Modified Gram–Schmidt, applied twice; collapsed columns are replaced by
/// fresh random directions.
fn orthonormalize(q: &mut [f64], d: usize, p: usize, fill: &mut SeededStream) {
    for c in 0..p {
        let mut attempts = 0;
        loop {
            let before = norm(&q[c * d..(c + 1) * d]);
            for _ in 0..2 {
                for a in 0..c {
                    let (prev, cur) = q.split_at_mut(c * d);
                    let qa = &prev[a * d..(a + 1) * d];
                    let col = &mut cur[..d];
                    let proj = dot(qa, col);
                    axpy(-proj, qa, col);
                }
            }
            let col = &mut q[c * d..(c + 1) * d];
            let nrm = norm(col);
            if nrm > 1e-10 * before.max(f64::MIN_POSITIVE) && nrm > 0.0 {
                for v in col.iter_mut() {
                    *v /= nrm;
                }
                break;
            }
            attempts += 1;
            assert!(attempts < 100, "could not complete an orthonormal block");
            for v in col.iter_mut() {
                *v = fill.next_gaussian();
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric row-major matrix.
/// Returns eigenvalues descending and the matching eigenvectors as the
/// columns of a row-major `p × p` matrix.
pub(crate) fn jacobi_eigen(h: &mut [f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; p * p];
    for i in 0..p {
        v[i * p + i] = 1.0;
    }
    let frob: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..p)
            .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| h[i * p + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob || off == 0.0 {
            break;
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let hij = h[i * p + j];
                if hij == 0.0 {
                    continue;
                }
                let (hii, hjj) = (h[i * p + i], h[j * p + j]);
                let tau = (hjj - hii) / (2.0 * hij);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..p {
                    let (hri, hrj) = (h[r * p + i], h[r * p + j]);
                    h[r * p + i] = c * hri - s * hrj;
                    h[r * p + j] = s * hri + c * hrj;
                }
                for r in 0..p {
                    let (hir, hjr) = (h[i * p + r], h[j * p + r]);
                    h[i * p + r] = c * hir - s * hjr;
                    h[j * p + r] = s * hir + c * hjr;
                }
                for r in 0..p {
                    let (vri, vrj) = (v[r * p + i], v[r * p + j]);
                    v[r * p + i] = c * vri - s * vrj;
                    v[r * p + j] = s * vri + c * vrj;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| h[b * p + b].total_cmp(&h[a * p + a]));
    let values = order.iter().map(|&i| h[i * p + i]).collect();
    let mut vecs = vec![0.0; p * p];
    for (c, &src) in order.iter().enumerate() {
        for r in 0..p {
            vecs[r * p + c] = v[r * p + src];
        }
    }
    (values, vecs)
}
