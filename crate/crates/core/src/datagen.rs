//! Synthetic mixed-linear-regression instances and initializations.
//!
//! Samples follow `y_i = ⟨x_i, θ*_{z_i}⟩ + w_i` with `x_i ~ N(0, I_d)`,
//! `z_i` drawn from the mixing weights and `w_i ~ N(0, σ²)`. Covariates,
//! labels and noise come from separate sub-streams of one seed, so changing
//! `σ` or the mixing weights leaves `X` untouched.

use std::io::{Read, Write};

use crate::error::{MixregError, Result};
use crate::linalg::{distance, dot, norm, standard_gaussian_matrix, Matrix};
use crate::rng::{streams, SeededStream};

/// True regressors, mixing weights and noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    thetas: Vec<Vec<f64>>,
    mixing: Vec<f64>,
    sigma: f64,
}

impl GroundTruth {
    pub fn new(thetas: Vec<Vec<f64>>, mixing: Vec<f64>, sigma: f64) -> Result<Self> {
        validate_thetas(&thetas)?;
        if mixing.len() != thetas.len() {
            return Err(MixregError::DimensionMismatch(format!(
                "{} components but {} mixing weights",
                thetas.len(),
                mixing.len()
            )));
        }
        if mixing.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(MixregError::InvalidArgument("mixing weights must be non-negative".into()));
        }
        let total: f64 = mixing.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MixregError::InvalidArgument(format!("mixing weights sum to {total}, not 1")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(MixregError::InvalidArgument(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { thetas, mixing, sigma })
    }

    /// `k` regressors with i.i.d. standard normal entries and uniform mixing.
    pub fn random(k: usize, d: usize, sigma: f64, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(MixregError::InvalidArgument("need k >= 1 and d >= 1".into()));
        }
        let mut stream = SeededStream::new(seed, streams::TRUTH);
        let thetas = (0..k).map(|_| stream.gaussian_vec(d)).collect();
        Self::new(thetas, vec![1.0 / k as f64; k], sigma)
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn k(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].len()
    }

    pub fn params(&self) -> ParamSet {
        ParamSet { thetas: self.thetas.clone() }
    }

    /// Same regressors and noise scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let thetas = self.thetas.iter().map(|t| t.iter().map(|v| c * v).collect()).collect();
        Self::new(thetas, self.mixing.clone(), c * self.sigma)
    }

    /// Smallest pairwise separation `min_{a≠b} ‖θ*_a − θ*_b‖`; `None` for a
    /// single component.
    pub fn min_separation(&self) -> Option<f64> {
        let k = self.k();
        (0..k)
            .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
            .map(|(a, b)| distance(&self.thetas[a], &self.thetas[b]))
            .reduce(f64::min)
    }

    /// The initialization radius `‖θ*₁ − θ*₂‖ / (2 log n₁)` at which the
    /// super-linear contraction regime begins; uses the smallest pairwise
    /// separation when `K > 2`.
    pub fn boundary_radius(&self, n1: usize) -> Option<f64> {
        let sep = self.min_separation()?;
        (n1 > 1).then(|| sep / (2.0 * (n1 as f64).ln()))
    }
}

/// `K` candidate regressors of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    thetas: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new(thetas: Vec<Vec<f64>>) -> Result<Self> {
        validate_thetas(&thetas)?;
        Ok(Self { thetas })
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn theta(&self, j: usize) -> &[f64] {
        &self.thetas[j]
    }

    pub fn into_thetas(self) -> Vec<Vec<f64>> {
        self.thetas
    }

    pub fn k(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].len()
    }

    pub fn scaled(&self, c: f64) -> ParamSet {
        ParamSet { thetas: self.thetas.iter().map(|t| t.iter().map(|v| c * v).collect()).collect() }
    }

    /// Components reordered so that `result[j] = self[order[j]]`.
    pub fn permuted(&self, order: &[usize]) -> ParamSet {
        ParamSet { thetas: order.iter().map(|&j| self.thetas[j].clone()).collect() }
    }

    /// `max_j ‖self_j − other_j‖` under the identity matching.
    pub fn max_component_distance(&self, other: &ParamSet) -> f64 {
        self.thetas
            .iter()
            .zip(&other.thetas)
            .map(|(a, b)| distance(a, b))
            .fold(0.0, f64::max)
    }
}

fn validate_thetas(thetas: &[Vec<f64>]) -> Result<()> {
    let d = thetas.first().map(Vec::len).ok_or_else(|| {
        MixregError::InvalidArgument("need at least one component".into())
    })?;
    if d == 0 {
        return Err(MixregError::InvalidArgument("regressors must have dimension >= 1".into()));
    }
    if thetas.iter().any(|t| t.len() != d) {
        return Err(MixregError::DimensionMismatch("components have unequal dimensions".into()));
    }
    if thetas.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MixregError::InvalidArgument("regressor entries must be finite".into()));
    }
    Ok(())
}

/// Covariates, responses and (optionally) the latent labels that produced
/// them.
#[derive(Clone, Debug)]
pub struct Instance {
    x: Matrix,
    y: Vec<f64>,
    z: Option<Vec<usize>>,
    truth: Option<GroundTruth>,
}

impl Instance {
    pub fn new(x: Matrix, y: Vec<f64>, z: Option<Vec<usize>>, truth: Option<GroundTruth>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(MixregError::InvalidArgument("instance needs n >= 1 and d >= 1".into()));
        }
        if y.len() != x.rows() {
            return Err(MixregError::DimensionMismatch(format!(
                "{} rows of covariates but {} responses",
                x.rows(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MixregError::InvalidArgument("responses must be finite".into()));
        }
        if let Some(z) = &z {
            if z.len() != x.rows() {
                return Err(MixregError::DimensionMismatch(format!(
                    "{} rows of covariates but {} labels",
                    x.rows(),
                    z.len()
                )));
            }
        }
        if let Some(t) = &truth {
            if t.dim() != x.cols() {
                return Err(MixregError::DimensionMismatch("truth dimension differs from covariates".into()));
            }
            if let Some(z) = &z {
                if z.iter().any(|&l| l >= t.k()) {
                    return Err(MixregError::InvalidArgument("label out of range for truth".into()));
                }
            }
        }
        Ok(Self { x, y, z, truth })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.z.as_deref()
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` of this instance, keeping `X`, `y` and `z` aligned.
    pub fn select_rows(&self, idx: &[usize]) -> Instance {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Instance {
            x: Matrix::from_row_major(idx.len(), d, data).expect("rows of a valid matrix"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            z: self.z.as_ref().map(|z| idx.iter().map(|&i| z[i]).collect()),
            truth: self.truth.clone(),
        }
    }

    /// Writes `i,y,z,x_0,…,x_{d-1}` with 17 significant digits; `z` is left
    /// empty when labels are absent.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["i".to_string(), "y".into(), "z".into()];
        header.extend((0..self.dim()).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![i.to_string(), fmt_f64(self.y[i])];
            rec.push(self.z.as_ref().map_or(String::new(), |z| z[i].to_string()));
            rec.extend(self.x.row(i).iter().map(|&v| fmt_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Instance::write_csv`]. Ground truth is
    /// not part of the file.
    pub fn read_csv<R: Read>(input: R) -> Result<Instance> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "i" || &header[1] != "y" || &header[2] != "z" {
            return Err(MixregError::Parse("expected header i,y,z,x_0,...".into()));
        }
        let d = header.len() - 3;
        let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        let mut all_labels = true;
        for rec in r.records() {
            let rec = rec?;
            ys.push(parse_f64(&rec[1])?);
            if rec[2].is_empty() {
                all_labels = false;
            } else {
                zs.push(rec[2].parse::<usize>().map_err(|e| MixregError::Parse(e.to_string()))?);
            }
            for j in 0..d {
                xs.push(parse_f64(&rec[3 + j])?);
            }
        }
        let n = ys.len();
        let z = (all_labels && zs.len() == n).then_some(zs);
        Instance::new(Matrix::from_row_major(n, d, xs)?, ys, z, None)
    }
}

/// Draws `n` samples from the mixture described by `truth`.
pub fn sample_instance(truth: &GroundTruth, n: usize, seed: u64) -> Result<Instance> {
    if n == 0 {
        return Err(MixregError::InvalidArgument("need n >= 1".into()));
    }
    let d = truth.dim();
    let x = standard_gaussian_matrix(seed, n, d);
    let mut label_stream = SeededStream::new(seed, streams::LABELS);
    let mut noise_stream = SeededStream::new(seed, streams::NOISE);
    let mut cumulative: Vec<f64> = truth
        .mixing
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    // Guard the top bin against rounding in the running sum.
    if let Some(last) = cumulative.last_mut() {
        *last = f64::INFINITY;
    }
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let u = label_stream.next_uniform();
        // Uniform on (0, 1]; component j covers (c_{j-1}, c_j].
        let label = cumulative.iter().position(|&c| u <= c).unwrap_or(truth.k() - 1);
        let noise = truth.sigma * noise_stream.next_gaussian();
        y.push(dot(x.row(i), &truth.thetas[label]) + noise);
        z.push(label);
    }
    Instance::new(x, y, Some(z), Some(truth.clone()))
}

/// `θ_j = θ*_j + r · u_j` with independent directions `u_j` uniform on the
/// unit sphere.
pub fn perturbed_init(truth: &GroundTruth, radius: f64, seed: u64) -> Result<ParamSet> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(MixregError::InvalidArgument(format!("radius must be finite and >= 0, got {radius}")));
    }
    let mut stream = SeededStream::new(seed, streams::DIRECTIONS);
    let thetas = truth
        .thetas
        .iter()
        .map(|theta| {
            let u = loop {
                let g = stream.gaussian_vec(theta.len());
                let len = norm(&g);
                if len > 0.0 {
                    break g.into_iter().map(|v| v / len).collect::<Vec<_>>();
                }
            };
            theta.iter().zip(&u).map(|(t, ui)| t + radius * ui).collect()
        })
        .collect();
    ParamSet::new(thetas)
}

/// Scientific notation with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| MixregError::Parse(format!("{s:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component(d: usize, sigma: f64, seed: u64) -> GroundTruth {
        GroundTruth::random(2, d, sigma, seed).unwrap()
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruth::new(vec![vec![1.0], vec![2.0]], vec![0.5, 0.4], 0.0).is_err());
        assert!(GroundTruth::new(vec![vec![1.0], vec![2.0, 3.0]], vec![0.5, 0.5], 0.0).is_err());
        assert!(GroundTruth::new(vec![vec![1.0]], vec![1.0], -1.0).is_err());
        assert!(GroundTruth::new(vec![], vec![], 0.0).is_err());
        assert!(GroundTruth::new(vec![vec![1.0], vec![2.0]], vec![-0.5, 1.5], 0.0).is_err());
    }

    #[test]
    fn identical_components_give_identical_model() {
        let theta = vec![0.5, -1.0, 2.0];
        let truth = GroundTruth::new(vec![theta.clone(), theta.clone()], vec![0.5, 0.5], 0.0).unwrap();
        let inst = sample_instance(&truth, 50, 3).unwrap();
        for i in 0..inst.n() {
            assert_eq!(inst.y()[i], dot(inst.x().row(i), &theta));
        }
    }

    #[test]
    fn noiseless_responses_are_exact() {
        let truth = two_component(7, 0.0, 1);
        let inst = sample_instance(&truth, 200, 9).unwrap();
        let z = inst.labels().unwrap();
        let worst = (0..inst.n())
            .map(|i| (inst.y()[i] - dot(inst.x().row(i), &truth.thetas()[z[i]])).abs())
            .fold(0.0, f64::max);
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn label_frequencies_match_mixing() {
        let truth = two_component(2, 0.0, 5);
        let inst = sample_instance(&truth, 10_000, 17).unwrap();
        let zeros = inst.labels().unwrap().iter().filter(|&&l| l == 0).count() as f64 / 10_000.0;
        // Binomial sd is 0.005; 0.02 is four sd.
        assert!((zeros - 0.5).abs() < 0.02, "{zeros}");
    }

    #[test]
    fn sampling_is_deterministic_and_sigma_does_not_move_covariates() {
        let a = sample_instance(&two_component(4, 0.0, 2), 30, 8).unwrap();
        let b = sample_instance(&two_component(4, 0.0, 2), 30, 8).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        let noisy = sample_instance(&two_component(4, 0.3, 2), 30, 8).unwrap();
        assert_eq!(a.x(), noisy.x());
        assert_eq!(a.labels(), noisy.labels());
        assert_ne!(a.y(), noisy.y());
    }

    #[test]
    fn scaling_truth_scales_responses_only() {
        let truth = two_component(5, 0.2, 4);
        let c = 3.5;
        let base = sample_instance(&truth, 40, 12).unwrap();
        let scaled = sample_instance(&truth.scaled(c).unwrap(), 40, 12).unwrap();
        assert_eq!(base.x(), scaled.x());
        assert_eq!(base.labels(), scaled.labels());
        for (a, b) in base.y().iter().zip(scaled.y()) {
            assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn perturbation_has_exact_radius() {
        let truth = two_component(100, 0.0, 6);
        let zero = perturbed_init(&truth, 0.0, 1).unwrap();
        assert_eq!(zero, truth.params());
        for &r in &[0.01, 0.7, 3.0] {
            let p = perturbed_init(&truth, r, 2).unwrap();
            for j in 0..2 {
                assert!((distance(p.theta(j), &truth.thetas()[j]) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_radius_meets_the_precondition_with_equality() {
        let truth = two_component(100, 0.0, 7);
        let n1 = 600;
        let r = truth.boundary_radius(n1).unwrap();
        let init = perturbed_init(&truth, r, 3).unwrap();
        let dist = init.max_component_distance(&truth.params());
        let bound = distance(&truth.thetas()[0], &truth.thetas()[1]) / (2.0 * (n1 as f64).ln());
        assert!((dist - bound).abs() < 1e-12);
        assert!(GroundTruth::random(1, 3, 0.0, 1).unwrap().boundary_radius(10).is_none());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let inst = sample_instance(&two_component(3, 0.1, 1), 6, 2).unwrap();
        let mut buf = Vec::new();
        inst.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,y,z,x_0,x_1,x_2\n"));
        assert!(!text.contains('\r'));
        let back = Instance::read_csv(&buf[..]).unwrap();
        assert_eq!(back.x(), inst.x());
        assert_eq!(back.y(), inst.y());
        assert_eq!(back.labels(), inst.labels());
    }

    #[test]
    fn select_rows_keeps_alignment() {
        let inst = sample_instance(&two_component(3, 0.0, 1), 10, 2).unwrap();
        let sub = inst.select_rows(&[7, 2]);
        assert_eq!(sub.x().row(0), inst.x().row(7));
        assert_eq!(sub.y()[1], inst.y()[2]);
        assert_eq!(sub.labels().unwrap(), &[inst.labels().unwrap()[7], inst.labels().unwrap()[2]]);
    }
}
