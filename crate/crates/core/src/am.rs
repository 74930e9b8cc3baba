//! Alternating minimization: estimate labels from the current regressors,
//! then refit each regressor by least squares on its assigned samples.

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{fmt_f64, parse_f64, Instance, ParamSet};
use crate::error::{MixregError, Result};
use crate::linalg::solve_least_squares_rows;
use crate::metrics::{check_dims, dist, loss, residual};
use crate::rng::{streams, SeededStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmConfig {
    /// Number of rounds `T`.
    pub max_rounds: usize,
    /// Use a fresh disjoint group of samples in every round.
    pub sample_split: bool,
    /// Stop once `max_j ‖θ_j^(t+1) − θ_j^(t)‖ < tol`.
    pub tol: f64,
    /// Record `dist` to the instance's ground truth when it has one.
    pub track_truth: bool,
    /// Stop once `dist` to the ground truth is at most this value.
    pub target_precision: Option<f64>,
    /// Seed of the permutation used for sample splitting.
    pub split_seed: u64,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            sample_split: false,
            tol: 1e-12,
            track_truth: true,
            target_precision: None,
            split_seed: 0,
        }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(MixregError::InvalidArgument("max_rounds must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(MixregError::InvalidArgument("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Non-fatal events raised while refitting a component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterIssue {
    /// No sample was assigned; the previous regressor was carried forward.
    Empty { component: usize },
    /// The assigned rows did not have full column rank; the minimum-norm
    /// least-squares solution was used.
    RankDeficient { component: usize, rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub round: usize,
    pub issue: ClusterIssue,
}

/// Per-iteration record of a solver run. Index 0 of every per-iterate
/// sequence is the initialization.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub iterates: Vec<ParamSet>,
    pub dist_to_truth: Option<Vec<f64>>,
    pub loss_seq: Vec<f64>,
    pub labels_final: Vec<usize>,
    /// Seconds spent in each round (label step + update step).
    pub wall_clock_per_iter: Vec<f64>,
    /// Round after which the iterate stopped moving.
    pub converged_at: Option<usize>,
    /// First iterate within the configured target precision of the truth.
    pub target_reached_at: Option<usize>,
    pub diagnostics: Vec<Diagnostic>,
}

impl Trace {
    pub fn rounds(&self) -> usize {
        self.wall_clock_per_iter.len()
    }

    pub fn final_params(&self) -> &ParamSet {
        self.iterates.last().expect("a trace always holds its initialization")
    }

    pub fn total_wall_clock(&self) -> f64 {
        self.wall_clock_per_iter.iter().sum()
    }

    /// `iter,dist,loss,wall_clock_s`, one row per iterate; `dist` is empty
    /// when the run did not track the truth and `wall_clock_s` is 0 for the
    /// initialization.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["iter", "dist", "loss", "wall_clock_s"])?;
        for t in 0..self.iterates.len() {
            let dist = self.dist_to_truth.as_ref().map_or(String::new(), |d| fmt_f64(d[t]));
            let clock = if t == 0 { 0.0 } else { self.wall_clock_per_iter[t - 1] };
            w.write_record([t.to_string(), dist, fmt_f64(self.loss_seq[t]), fmt_f64(clock)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row of a trace CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub dist: Option<f64>,
    pub loss: f64,
    pub wall_clock_s: f64,
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["iter", "dist", "loss", "wall_clock_s"] {
        return Err(MixregError::Parse("expected header iter,dist,loss,wall_clock_s".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(TraceRow {
                iter: rec[0].parse().map_err(|e| MixregError::Parse(format!("iter: {e}")))?,
                dist: if rec[1].is_empty() { None } else { Some(parse_f64(&rec[1])?) },
                loss: parse_f64(&rec[2])?,
                wall_clock_s: parse_f64(&rec[3])?,
            })
        })
        .collect()
}

/// Random partition of the samples into `groups` disjoint groups of
/// `⌊n / groups⌋` samples each; the remainder is dropped.
pub fn split_samples(inst: &Instance, groups: usize, seed: u64) -> Result<Vec<Instance>> {
    let n = inst.n();
    if groups == 0 || groups > n {
        return Err(MixregError::TooManyGroups { groups, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(SeededStream::new(seed, streams::SPLIT).rng_mut());
    let size = n / groups;
    Ok(order.chunks_exact(size).take(groups).map(|idx| inst.select_rows(idx)).collect())
}

/// `z_i = argmin_j |y_i − ⟨x_i, θ_j⟩|`, ties to the lowest index.
pub fn assign_labels(inst: &Instance, params: &ParamSet) -> Result<Vec<usize>> {
    check_dims(inst, params)?;
    Ok((0..inst.n())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (j, theta) in params.thetas().iter().enumerate() {
                let r = residual(inst, i, theta).abs();
                if r < best.1 {
                    best = (j, r);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Refit {
    pub params: ParamSet,
    pub issues: Vec<ClusterIssue>,
}

/// Least-squares fit of each component on its assigned rows. Components with
/// no rows keep their previous value.
pub fn refit(inst: &Instance, labels: &[usize], k: usize, prev: &ParamSet) -> Result<Refit> {
    check_dims(inst, prev)?;
    if prev.k() != k {
        return Err(MixregError::DimensionMismatch(format!("previous iterate has {} components, expected {k}", prev.k())));
    }
    if labels.len() != inst.n() {
        return Err(MixregError::DimensionMismatch(format!("{} labels for {} samples", labels.len(), inst.n())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(MixregError::InvalidArgument(format!("label {bad} out of range for K = {k}")));
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        rows[l].push(i);
    }
    let fits: Vec<Result<(Vec<f64>, Option<ClusterIssue>)>> = rows
        .par_iter()
        .enumerate()
        .map(|(j, idx)| {
            if idx.is_empty() {
                return Ok((prev.theta(j).to_vec(), Some(ClusterIssue::Empty { component: j })));
            }
            let sol = solve_least_squares_rows(inst.x(), inst.y(), idx)?;
            let issue = sol
                .rank_deficient()
                .then_some(ClusterIssue::RankDeficient { component: j, rank: sol.rank });
            Ok((sol.x, issue))
        })
        .collect();
    let mut thetas = Vec::with_capacity(k);
    let mut issues = Vec::new();
    for fit in fits {
        let (theta, issue) = fit?;
        thetas.push(theta);
        issues.extend(issue);
    }
    Ok(Refit { params: ParamSet::new(thetas)?, issues })
}

/// Shared bookkeeping for iterative solvers.
pub(crate) struct Recorder<'a> {
    full: &'a Instance,
    truth: Option<ParamSet>,
    target: Option<f64>,
    pub(crate) trace: Trace,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(full: &'a Instance, init: &ParamSet, track_truth: bool, target: Option<f64>) -> Result<Self> {
        check_dims(full, init)?;
        let truth = match full.truth() {
            Some(t) if track_truth || target.is_some() => {
                if t.k() != init.k() {
                    return Err(MixregError::DimensionMismatch(format!(
                        "initialization has {} components, truth has {}",
                        init.k(),
                        t.k()
                    )));
                }
                Some(t.params())
            }
            _ => None,
        };
        let mut rec = Self {
            full,
            truth,
            target,
            trace: Trace { dist_to_truth: (track_truth && full.truth().is_some()).then(Vec::new), ..Trace::default() },
        };
        rec.push(init.clone())?;
        Ok(rec)
    }

    /// Records an iterate; returns true when the target precision is met.
    pub(crate) fn push(&mut self, params: ParamSet) -> Result<bool> {
        let t = self.trace.iterates.len();
        self.trace.loss_seq.push(loss(self.full, &params)?);
        let mut hit = false;
        if let Some(truth) = &self.truth {
            let d = dist(&params, truth)?;
            if let Some(seq) = self.trace.dist_to_truth.as_mut() {
                seq.push(d);
            }
            if self.target.is_some_and(|target| d <= target) && self.trace.target_reached_at.is_none() {
                self.trace.target_reached_at = Some(t);
                hit = true;
            }
        }
        self.trace.iterates.push(params);
        Ok(hit)
    }

    pub(crate) fn current(&self) -> &ParamSet {
        self.trace.final_params()
    }

    pub(crate) fn finish(mut self) -> Result<Trace> {
        self.trace.labels_final = assign_labels(self.full, self.trace.final_params())?;
        Ok(self.trace)
    }
}

/// Runs up to `cfg.max_rounds` rounds of alternating minimization from
/// `init`. Loss is always measured on the full sample.
///
/// A round that leaves the iterate bit-for-bit unchanged is a fixed point of
/// the map, so the run also stops there regardless of `tol`.
pub fn run_am(inst: &Instance, init: &ParamSet, cfg: &AmConfig) -> Result<Trace> {
    cfg.validate()?;
    let k = init.k();
    let groups = if cfg.sample_split { Some(split_samples(inst, cfg.max_rounds, cfg.split_seed)?) } else { None };
    let mut rec = Recorder::new(inst, init, cfg.track_truth, cfg.target_precision)?;
    if rec.trace.target_reached_at.is_some() {
        return rec.finish();
    }
    for round in 0..cfg.max_rounds {
        let work = groups.as_ref().map_or(inst, |g| &g[round]);
        let start = Instant::now();
        let labels = assign_labels(work, rec.current())?;
        let Refit { params, issues } = refit(work, &labels, k, rec.current())?;
        rec.trace.wall_clock_per_iter.push(start.elapsed().as_secs_f64());
        rec.trace.diagnostics.extend(issues.into_iter().map(|issue| Diagnostic { round: round + 1, issue }));

        let movement = params.max_component_distance(rec.current());
        if rec.push(params)? {
            break;
        }
        if movement < cfg.tol || movement == 0.0 {
            rec.trace.converged_at = Some(round + 1);
            break;
        }
    }
    rec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{perturbed_init, sample_instance, GroundTruth};
    use crate::linalg::{solve_least_squares, Matrix};

    #[test]
    fn split_sizes_and_disjointness() {
        let truth = GroundTruth::random(2, 2, 0.0, 1).unwrap();
        let inst = sample_instance(&truth, 10, 2).unwrap();
        let one = split_samples(&inst, 1, 5).unwrap();
        assert_eq!(one.len(), 1);
        let mut ys: Vec<f64> = one[0].y().to_vec();
        let mut orig = inst.y().to_vec();
        ys.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(ys, orig);

        let three = split_samples(&inst, 3, 5).unwrap();
        assert!(three.iter().all(|g| g.n() == 3));
        let mut all: Vec<u64> = three.iter().flat_map(|g| g.y().iter().map(|v| v.to_bits())).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
        assert!(matches!(split_samples(&inst, 11, 5), Err(MixregError::TooManyGroups { groups: 11, n: 10 })));
    }

    #[test]
    fn labels_recover_truth_on_noiseless_instance() {
        let truth = GroundTruth::random(2, 10, 0.0, 3).unwrap();
        let inst = sample_instance(&truth, 200, 4).unwrap();
        assert_eq!(assign_labels(&inst, &truth.params()).unwrap(), inst.labels().unwrap());
    }

    #[test]
    fn single_component_labels_are_zero() {
        let truth = GroundTruth::random(1, 4, 0.0, 3).unwrap();
        let inst = sample_instance(&truth, 20, 4).unwrap();
        assert!(assign_labels(&inst, &truth.params()).unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn exact_tie_goes_to_lowest_index() {
        // Predictions 0 and 2, response 1.
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let inst = Instance::new(x, vec![1.0], None, None).unwrap();
        let params = ParamSet::new(vec![vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(assign_labels(&inst, &params).unwrap(), vec![0]);
        let swapped = ParamSet::new(vec![vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(assign_labels(&inst, &swapped).unwrap(), vec![0]);
    }

    #[test]
    fn refit_with_true_labels_recovers_truth() {
        let truth = GroundTruth::random(2, 8, 0.0, 5).unwrap();
        let inst = sample_instance(&truth, 120, 6).unwrap();
        let labels = inst.labels().unwrap().to_vec();
        let prev = ParamSet::new(vec![vec![0.0; 8]; 2]).unwrap();
        let out = refit(&inst, &labels, 2, &prev).unwrap();
        assert!(out.issues.is_empty());
        for j in 0..2 {
            let idx: Vec<usize> = (0..inst.n()).filter(|&i| labels[i] == j).collect();
            let direct = solve_least_squares(inst.select_rows(&idx).x(), inst.select_rows(&idx).y()).unwrap().x;
            for (a, (b, t)) in out.params.theta(j).iter().zip(direct.iter().zip(&truth.thetas()[j])) {
                assert!((a - b).abs() < 1e-10 && (a - t).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_cluster_keeps_previous_component() {
        let truth = GroundTruth::random(2, 3, 0.0, 5).unwrap();
        let inst = sample_instance(&truth, 30, 6).unwrap();
        let prev = ParamSet::new(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let out = refit(&inst, &vec![0; 30], 2, &prev).unwrap();
        assert_eq!(out.params.theta(1), prev.theta(1));
        assert_eq!(out.issues, vec![ClusterIssue::Empty { component: 1 }]);
    }

    #[test]
    fn single_component_refit_is_ols() {
        let truth = GroundTruth::random(1, 4, 0.3, 5).unwrap();
        let inst = sample_instance(&truth, 40, 6).unwrap();
        let prev = ParamSet::new(vec![vec![0.0; 4]]).unwrap();
        let out = refit(&inst, &vec![0; 40], 1, &prev).unwrap();
        assert_eq!(out.params.theta(0), solve_least_squares(inst.x(), inst.y()).unwrap().x.as_slice());
    }

    #[test]
    fn small_cluster_reports_rank_deficiency() {
        let truth = GroundTruth::random(2, 6, 0.0, 5).unwrap();
        let inst = sample_instance(&truth, 20, 6).unwrap();
        let mut labels = vec![0; 20];
        labels[3] = 1;
        labels[9] = 1;
        let prev = truth.params();
        let out = refit(&inst, &labels, 2, &prev).unwrap();
        assert_eq!(out.issues, vec![ClusterIssue::RankDeficient { component: 1, rank: 2 }]);
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let truth = GroundTruth::random(2, 10, 0.0, 7).unwrap();
        let inst = sample_instance(&truth, 100, 8).unwrap();
        let trace = run_am(&inst, &truth.params(), &AmConfig::default()).unwrap();
        assert_eq!(trace.converged_at, Some(1));
        assert_eq!(trace.iterates.len(), 2);
        assert!(trace.dist_to_truth.unwrap().iter().all(|&d| d <= 1e-12));
    }

    #[test]
    fn target_precision_stops_early() {
        let truth = GroundTruth::random(2, 20, 0.0, 7).unwrap();
        let inst = sample_instance(&truth, 200, 8).unwrap();
        let init = perturbed_init(&truth, 0.5, 1).unwrap();
        let cfg = AmConfig { target_precision: Some(1e-3), ..AmConfig::default() };
        let trace = run_am(&inst, &init, &cfg).unwrap();
        let t = trace.target_reached_at.expect("reaches target");
        assert_eq!(trace.iterates.len(), t + 1);
        assert!(trace.dist_to_truth.as_ref().unwrap()[t] <= 1e-3);
        assert!(trace.dist_to_truth.as_ref().unwrap()[t - 1] > 1e-3);
    }

    #[test]
    fn sample_split_runs_one_group_per_round() {
        let truth = GroundTruth::random(2, 5, 0.0, 7).unwrap();
        let inst = sample_instance(&truth, 600, 8).unwrap();
        let init = perturbed_init(&truth, 0.3, 1).unwrap();
        let cfg = AmConfig { max_rounds: 4, sample_split: true, tol: 0.0, ..AmConfig::default() };
        let trace = run_am(&inst, &init, &cfg).unwrap();
        assert!(trace.rounds() <= 4);
        assert_eq!(trace.loss_seq.len(), trace.iterates.len());
        assert!(*trace.dist_to_truth.unwrap().last().unwrap() < 1e-8);
        let too_many = AmConfig { max_rounds: 601, sample_split: true, ..AmConfig::default() };
        assert!(matches!(run_am(&inst, &init, &too_many), Err(MixregError::TooManyGroups { .. })));
    }

    #[test]
    fn trace_csv_round_trip() {
        let truth = GroundTruth::random(2, 5, 0.0, 7).unwrap();
        let inst = sample_instance(&truth, 60, 8).unwrap();
        let trace = run_am(&inst, &perturbed_init(&truth, 0.3, 1).unwrap(), &AmConfig::default()).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("iter,dist,loss,wall_clock_s\n"));
        let rows = read_trace_csv(&buf[..]).unwrap();
        assert_eq!(rows.len(), trace.iterates.len());
        for (row, d) in rows.iter().zip(trace.dist_to_truth.as_ref().unwrap()) {
            assert_eq!(row.dist, Some(*d));
        }
        assert_eq!(rows.iter().map(|r| r.loss).collect::<Vec<_>>(), trace.loss_seq);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let truth = GroundTruth::random(2, 5, 0.0, 7).unwrap();
        let inst = sample_instance(&truth, 60, 8).unwrap();
        let bad = ParamSet::new(vec![vec![0.0; 4]; 2]).unwrap();
        assert!(matches!(run_am(&inst, &bad, &AmConfig::default()), Err(MixregError::DimensionMismatch(_))));
    }
}
