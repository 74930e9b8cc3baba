//! Experiment runner: seeded sweeps over dimensions and trials, averaged
//! convergence curves, log-log rate fits, the AM versus GD comparison table
//! and the mismatch-set sweep. Everything is written as CSV/JSON.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::am::{run_am, AmConfig, Trace};
use crate::datagen::{fmt_f64, parse_f64, perturbed_init, sample_instance, GroundTruth, Instance, ParamSet};
use crate::error::{MixregError, Result};
use crate::gd::{run_gd, tune_step_size, GdConfig, DEFAULT_PROBE_ROUNDS};
use crate::metrics::{
    dist, fit_convergence_exponent, fit_line, log_log_pairs, mean_curve, mismatch_set, optimization_error_seq,
    RateFit, Window,
};
use crate::rng::derive_seed;
use crate::spectral::spectral_init;

/// Default target precision of the comparison table.
pub const DEFAULT_TARGET: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Panel {
    Fig3a,
    Fig3b,
    Fig3c,
    Fig4a,
    Fig4b,
    Fig4c,
    Table1,
    Custom,
}

impl Panel {
    pub const ALL: [Panel; 8] =
        [Panel::Fig3a, Panel::Fig3b, Panel::Fig3c, Panel::Fig4a, Panel::Fig4b, Panel::Fig4c, Panel::Table1, Panel::Custom];

    pub fn name(self) -> &'static str {
        match self {
            Panel::Fig3a => "fig3a",
            Panel::Fig3b => "fig3b",
            Panel::Fig3c => "fig3c",
            Panel::Fig4a => "fig4a",
            Panel::Fig4b => "fig4b",
            Panel::Fig4c => "fig4c",
            Panel::Table1 => "table1",
            Panel::Custom => "custom",
        }
    }
}

impl fmt::Display for Panel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Panel {
    type Err = MixregError;

    fn from_str(s: &str) -> Result<Self> {
        Panel::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| MixregError::InvalidSpec(format!("unknown panel {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Perturbed,
    Spectral,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Perturbed => "perturbed",
            InitKind::Spectral => "spectral",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Am,
    Gd,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Am => "am",
            Algorithm::Gd => "gd",
        })
    }
}

/// What the per-iteration error is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReference {
    /// `dist` to the ground truth.
    Truth,
    /// Distance to the last iterate of the run (optimization error).
    FinalIterate,
}

/// Perturbation radius of the initializer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadiusPolicy {
    /// `factor · min_{j≠l} ‖θ*_j − θ*_l‖ / (2 ln n₁)`.
    Boundary { factor: f64 },
    Fixed(f64),
}

impl RadiusPolicy {
    pub fn radius(&self, truth: &GroundTruth, n1: usize) -> Result<f64> {
        match *self {
            RadiusPolicy::Fixed(r) => Ok(r),
            RadiusPolicy::Boundary { factor } => truth
                .boundary_radius(n1)
                .map(|r| factor * r)
                .ok_or_else(|| MixregError::InvalidSpec("boundary radius needs K >= 2 and n >= 2".into())),
        }
    }
}

impl FromStr for RadiusPolicy {
    type Err = MixregError;

    /// Accepts `boundary`, `boundary:<factor>` and `fixed:<radius>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || MixregError::InvalidSpec(format!("bad radius policy {s:?}"));
        let value = |v: &str| -> Result<f64> {
            let x: f64 = v.trim().parse().map_err(|_| bad())?;
            if x >= 0.0 && x.is_finite() {
                Ok(x)
            } else {
                Err(bad())
            }
        };
        match s.trim().split_once(':') {
            None if s.trim() == "boundary" => Ok(RadiusPolicy::Boundary { factor: 1.0 }),
            Some(("boundary", f)) => Ok(RadiusPolicy::Boundary { factor: value(f)? }),
            Some(("fixed", r)) => Ok(RadiusPolicy::Fixed(value(r)?)),
            _ => Err(bad()),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub panel: Panel,
    pub d_list: Vec<usize>,
    pub n_over_d: f64,
    pub k: usize,
    /// Noise levels; each one is a separate sweep over `d_list`.
    #[serde(deserialize_with = "one_or_many")]
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub root_seed: u64,
    pub init: InitKind,
    pub init_radius_policy: String,
    #[serde(default)]
    pub target_precision: Option<f64>,
    /// Round budget `T` of every run; curves are padded to `T + 1` points.
    pub rounds: usize,
    /// Solver for `custom`; the figure panels fix their own.
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    #[serde(default)]
    pub error_reference: Option<ErrorReference>,
}

impl ExperimentSpec {
    /// Settings of each published panel at desk scale.
    pub fn preset(panel: Panel) -> Self {
        let base = ExperimentSpec {
            panel,
            d_list: vec![50, 100, 250, 500],
            n_over_d: 6.0,
            k: 2,
            sigmas: vec![0.0],
            trials: 20,
            root_seed: 0,
            init: InitKind::Perturbed,
            init_radius_policy: "boundary".into(),
            target_precision: None,
            rounds: 10,
            algorithm: None,
            error_reference: None,
        };
        match panel {
            Panel::Fig3a | Panel::Custom => base,
            Panel::Fig3b => ExperimentSpec { d_list: vec![250, 500], ..base },
            Panel::Fig3c => ExperimentSpec { d_list: vec![200, 250], n_over_d: 15.0, k: 3, ..base },
            Panel::Fig4a => ExperimentSpec { d_list: vec![250], sigmas: vec![0.1, 0.2, 0.25], rounds: 50, ..base },
            Panel::Fig4b => ExperimentSpec { d_list: vec![50, 100, 200], rounds: 300, ..base },
            Panel::Fig4c => ExperimentSpec { d_list: vec![50, 100, 250], rounds: 300, ..base },
            Panel::Table1 => ExperimentSpec {
                d_list: vec![50, 100, 250],
                target_precision: Some(DEFAULT_TARGET),
                rounds: 500,
                ..base
            },
        }
    }

    /// Parses a JSON object. Only `panel` is required; every other field
    /// defaults to the panel preset. `sigma` and `K` are accepted as
    /// aliases of `sigmas` and `k`.
    pub fn from_json(text: &str) -> Result<Self> {
        let invalid = |e: serde_json::Error| MixregError::InvalidSpec(e.to_string());
        let serde_json::Value::Object(mut user) = serde_json::from_str(text).map_err(invalid)? else {
            return Err(MixregError::InvalidSpec("spec must be a JSON object".into()));
        };
        for (alias, field) in [("sigma", "sigmas"), ("K", "k")] {
            if let Some(v) = user.remove(alias) {
                if user.insert(field.into(), v).is_some() {
                    return Err(MixregError::InvalidSpec(format!("both {alias:?} and {field:?} given")));
                }
            }
        }
        let panel: Panel = match user.get("panel") {
            Some(serde_json::Value::String(s)) => s.parse()?,
            _ => return Err(MixregError::InvalidSpec("missing \"panel\"".into())),
        };
        let serde_json::Value::Object(mut merged) = serde_json::to_value(Self::preset(panel)).map_err(invalid)? else {
            unreachable!("specs serialize to objects")
        };
        merged.extend(user);
        let spec: Self = serde_json::from_value(serde_json::Value::Object(merged)).map_err(invalid)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("specs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MixregError::InvalidSpec(m));
        if self.trials == 0 {
            return fail("trials must be >= 1".into());
        }
        if self.d_list.is_empty() || self.d_list.contains(&0) {
            return fail("d_list must be non-empty with positive entries".into());
        }
        if !(self.n_over_d >= 1.0) || !self.n_over_d.is_finite() {
            return fail(format!("n_over_d must be >= 1, got {}", self.n_over_d));
        }
        if self.k == 0 {
            return fail("K must be >= 1".into());
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return fail("sigma values must be finite and >= 0".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if let Some(t) = self.target_precision {
            if !(t >= 0.0) {
                return fail(format!("target_precision must be >= 0, got {t}"));
            }
        }
        if self.init == InitKind::Spectral && self.k != 2 {
            return fail("spectral initialization is defined for K = 2 only".into());
        }
        if self.init == InitKind::Spectral && self.d_list.contains(&1) {
            return fail("spectral initialization needs d >= 2".into());
        }
        self.radius_policy()?;
        Ok(())
    }

    pub fn radius_policy(&self) -> Result<RadiusPolicy> {
        self.init_radius_policy.parse()
    }

    pub fn n_for(&self, d: usize) -> usize {
        (self.n_over_d * d as f64).round() as usize
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.panel {
            Panel::Fig4b | Panel::Fig4c => Algorithm::Gd,
            Panel::Custom => self.algorithm.unwrap_or(Algorithm::Am),
            _ => Algorithm::Am,
        }
    }

    pub fn error_reference(&self) -> ErrorReference {
        self.error_reference.unwrap_or(match self.panel {
            Panel::Fig4a => ErrorReference::FinalIterate,
            _ => ErrorReference::Truth,
        })
    }

    /// Seed of trial `trial` at dimension `d`; independent of every other
    /// field so that adding trials or noise levels leaves existing ones intact.
    pub fn trial_seed(&self, d: usize, trial: usize) -> u64 {
        derive_seed(self.root_seed, &[d as u64, trial as u64])
    }

    fn stem(&self, sigma: f64) -> String {
        if self.sigmas.len() > 1 {
            format!("{}_sigma{sigma}", self.panel)
        } else {
            self.panel.to_string()
        }
    }
}

/// One solver run inside a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub panel: Panel,
    pub algorithm: Algorithm,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub sigma: f64,
    pub trial: usize,
    pub seed: u64,
    pub init: InitKind,
    pub init_radius: Option<f64>,
    pub gamma: Option<f64>,
    pub n_over_d: f64,
    pub trials: usize,
    pub root_seed: u64,
    pub target_precision: Option<f64>,
    pub rounds: usize,
    /// First iteration whose error is within the target; −1 if never.
    pub iterations_to_target: i64,
    pub rounds_run: usize,
    pub wall_clock_s: f64,
    pub fitted_slope: Option<f64>,
    pub final_dist: Option<f64>,
    pub error: Option<String>,
}

pub const RUN_HEADER: [&str; 22] = [
    "panel",
    "algorithm",
    "d",
    "n",
    "k",
    "sigma",
    "trial",
    "seed",
    "init",
    "init_radius",
    "gamma",
    "n_over_d",
    "trials",
    "root_seed",
    "target_precision",
    "rounds",
    "iterations_to_target",
    "rounds_run",
    "wall_clock_s",
    "fitted_slope",
    "final_dist",
    "error",
];

fn opt_f64(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_f64)
}

fn parse_opt_f64(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_int<T: FromStr>(field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| MixregError::Parse(format!("{field}: {s:?}")))
}

impl RunRecord {
    fn to_row(&self) -> Vec<String> {
        vec![
            self.panel.to_string(),
            self.algorithm.to_string(),
            self.d.to_string(),
            self.n.to_string(),
            self.k.to_string(),
            fmt_f64(self.sigma),
            self.trial.to_string(),
            self.seed.to_string(),
            self.init.to_string(),
            opt_f64(self.init_radius),
            opt_f64(self.gamma),
            fmt_f64(self.n_over_d),
            self.trials.to_string(),
            self.root_seed.to_string(),
            opt_f64(self.target_precision),
            self.rounds.to_string(),
            self.iterations_to_target.to_string(),
            self.rounds_run.to_string(),
            fmt_f64(self.wall_clock_s),
            opt_f64(self.fitted_slope),
            opt_f64(self.final_dist),
            self.error.clone().unwrap_or_default(),
        ]
    }

    fn from_row(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != RUN_HEADER.len() {
            return Err(MixregError::Parse(format!("expected {} fields, got {}", RUN_HEADER.len(), rec.len())));
        }
        let algorithm = match &rec[1] {
            "am" => Algorithm::Am,
            "gd" => Algorithm::Gd,
            other => return Err(MixregError::Parse(format!("algorithm: {other:?}"))),
        };
        let init = match &rec[8] {
            "perturbed" => InitKind::Perturbed,
            "spectral" => InitKind::Spectral,
            other => return Err(MixregError::Parse(format!("init: {other:?}"))),
        };
        Ok(RunRecord {
            panel: rec[0].parse().map_err(|_| MixregError::Parse(format!("panel: {:?}", &rec[0])))?,
            algorithm,
            d: parse_int("d", &rec[2])?,
            n: parse_int("n", &rec[3])?,
            k: parse_int("k", &rec[4])?,
            sigma: parse_f64(&rec[5])?,
            trial: parse_int("trial", &rec[6])?,
            seed: parse_int("seed", &rec[7])?,
            init,
            init_radius: parse_opt_f64(&rec[9])?,
            gamma: parse_opt_f64(&rec[10])?,
            n_over_d: parse_f64(&rec[11])?,
            trials: parse_int("trials", &rec[12])?,
            root_seed: parse_int("root_seed", &rec[13])?,
            target_precision: parse_opt_f64(&rec[14])?,
            rounds: parse_int("rounds", &rec[15])?,
            iterations_to_target: parse_int("iterations_to_target", &rec[16])?,
            rounds_run: parse_int("rounds_run", &rec[17])?,
            wall_clock_s: parse_f64(&rec[18])?,
            fitted_slope: parse_opt_f64(&rec[19])?,
            final_dist: parse_opt_f64(&rec[20])?,
            error: (!rec[21].is_empty()).then(|| rec[21].to_string()),
        })
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

pub fn write_runs_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(RUN_HEADER)?;
    for r in records {
        w.write_record(r.to_row())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(RUN_HEADER) {
        return Err(MixregError::Parse("unexpected run-record header".into()));
    }
    r.records().map(|rec| RunRecord::from_row(&rec?)).collect()
}

/// Trial-averaged error curve of one `(σ, d)` cell and its rate fit.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSummary {
    pub sigma: f64,
    pub d: usize,
    pub mean: Vec<f64>,
    /// `None` when fewer than two log-log pairs fall inside the window.
    pub fit: Option<RateFit>,
    pub trials_ok: usize,
}

#[derive(Clone, Debug)]
pub struct PanelReport {
    pub records: Vec<RunRecord>,
    pub curves: Vec<CurveSummary>,
}

struct Outcome {
    record: RunRecord,
    errors: Option<Vec<f64>>,
}

struct Setup {
    truth: GroundTruth,
    inst: Instance,
    init: ParamSet,
    radius: Option<f64>,
}

fn setup_trial(spec: &ExperimentSpec, d: usize, sigma: f64, trial: usize) -> Result<Setup> {
    let seed = spec.trial_seed(d, trial);
    let n = spec.n_for(d);
    let truth = GroundTruth::random(spec.k, d, sigma, derive_seed(seed, &[0]))?;
    let inst = sample_instance(&truth, n, derive_seed(seed, &[1]))?;
    let (init, radius) = match spec.init {
        InitKind::Perturbed => {
            let r = spec.radius_policy()?.radius(&truth, n)?;
            (perturbed_init(&truth, r, derive_seed(seed, &[2]))?, Some(r))
        }
        InitKind::Spectral => (spectral_init(&inst, None)?, None),
    };
    Ok(Setup { truth, inst, init, radius })
}

fn solve(alg: Algorithm, s: &Setup, rounds: usize, stop_at: Option<f64>) -> Result<(Trace, Option<f64>)> {
    match alg {
        Algorithm::Am => {
            let cfg =
                AmConfig { max_rounds: rounds, tol: 0.0, target_precision: stop_at, ..AmConfig::default() };
            Ok((run_am(&s.inst, &s.init, &cfg)?, None))
        }
        Algorithm::Gd => {
            let gamma = tune_step_size(&s.inst, &s.init, DEFAULT_PROBE_ROUNDS)?;
            let cfg = GdConfig { max_rounds: rounds, tol: 0.0, target_precision: stop_at, ..GdConfig::new(gamma) };
            Ok((run_gd(&s.inst, &s.init, &cfg)?, Some(gamma)))
        }
    }
}

fn run_trial(
    spec: &ExperimentSpec,
    alg: Algorithm,
    d: usize,
    sigma: f64,
    trial: usize,
    stop_at_target: bool,
) -> Outcome {
    let mut record = RunRecord {
        panel: spec.panel,
        algorithm: alg,
        d,
        n: spec.n_for(d),
        k: spec.k,
        sigma,
        trial,
        seed: spec.trial_seed(d, trial),
        init: spec.init,
        init_radius: None,
        gamma: None,
        n_over_d: spec.n_over_d,
        trials: spec.trials,
        root_seed: spec.root_seed,
        target_precision: spec.target_precision,
        rounds: spec.rounds,
        iterations_to_target: -1,
        rounds_run: 0,
        wall_clock_s: 0.0,
        fitted_slope: None,
        final_dist: None,
        error: None,
    };
    let result = setup_trial(spec, d, sigma, trial).and_then(|s| {
        record.init_radius = s.radius;
        let stop = if stop_at_target { spec.target_precision } else { None };
        let (trace, gamma) = solve(alg, &s, spec.rounds, stop)?;
        record.gamma = gamma;
        let errors = match spec.error_reference() {
            ErrorReference::Truth => trace.dist_to_truth.clone().expect("truth is tracked"),
            ErrorReference::FinalIterate => optimization_error_seq(&trace, trace.final_params())?,
        };
        record.rounds_run = trace.rounds();
        record.wall_clock_s = trace.total_wall_clock();
        record.final_dist = Some(dist(trace.final_params(), &s.truth.params())?);
        record.fitted_slope = fit_convergence_exponent(&errors, Window::for_sequence(&errors)).ok().map(|f| f.slope);
        if let Some(target) = spec.target_precision {
            record.iterations_to_target = errors.iter().position(|&e| e <= target).map_or(-1, |t| t as i64);
        }
        Ok(errors)
    });
    match result {
        Ok(errors) => Outcome { record, errors: Some(errors) },
        Err(e) => {
            record.error = Some(e.to_string());
            Outcome { record, errors: None }
        }
    }
}

fn summarize(spec: &ExperimentSpec, sigma: f64, d: usize, outcomes: &[Outcome]) -> CurveSummary {
    let seqs: Vec<Vec<f64>> = outcomes.iter().filter_map(|o| o.errors.clone()).collect();
    let mean = if seqs.is_empty() { Vec::new() } else { mean_curve(&seqs, spec.rounds + 1) };
    let fit = if mean.is_empty() { None } else { fit_convergence_exponent(&mean, Window::for_sequence(&mean)).ok() };
    CurveSummary { sigma, d, mean, fit, trials_ok: seqs.len() }
}

/// Runs every `(σ, d, trial)` of a figure panel. Trials run in parallel and
/// are collected in `(σ, d, trial)` order; a solver failure is recorded in
/// its run record and excluded from the averages. Files are written only
/// when `out_dir` is given.
pub fn run_panel(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<PanelReport> {
    spec.validate()?;
    if spec.panel == Panel::Table1 {
        return Err(MixregError::InvalidSpec("table1 is produced by compare_table".into()));
    }
    let alg = spec.algorithm();
    let mut records = Vec::new();
    let mut curves = Vec::new();
    for &sigma in &spec.sigmas {
        for &d in &spec.d_list {
            let outcomes: Vec<Outcome> =
                (0..spec.trials).into_par_iter().map(|t| run_trial(spec, alg, d, sigma, t, false)).collect();
            curves.push(summarize(spec, sigma, d, &outcomes));
            records.extend(outcomes.into_iter().map(|o| o.record));
        }
    }
    let report = PanelReport { records, curves };
    if let Some(dir) = out_dir {
        write_panel(spec, &report, dir)?;
    }
    Ok(report)
}

fn write_panel(spec: &ExperimentSpec, report: &PanelReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for &sigma in &spec.sigmas {
        let stem = spec.stem(sigma);
        let cells: Vec<&CurveSummary> = report.curves.iter().filter(|c| c.sigma == sigma).collect();

        let mut w = csv_writer(fs::File::create(dir.join(format!("{stem}_curves.csv")))?);
        w.write_record(["d", "iter", "mean_dist"])?;
        for c in &cells {
            for (t, v) in c.mean.iter().enumerate() {
                w.write_record([c.d.to_string(), t.to_string(), fmt_f64(*v)])?;
            }
        }
        w.flush()?;

        let mut w = csv_writer(fs::File::create(dir.join(format!("{stem}_loglog.csv")))?);
        w.write_record(["d", "log_dist_t", "log_dist_t1"])?;
        for c in &cells {
            if c.mean.is_empty() {
                continue;
            }
            for (a, b) in log_log_pairs(&c.mean, Window::for_sequence(&c.mean)) {
                w.write_record([c.d.to_string(), fmt_f64(a), fmt_f64(b)])?;
            }
        }
        w.flush()?;

        let mut w = csv_writer(fs::File::create(dir.join(format!("{stem}_fits.csv")))?);
        w.write_record(["d", "slope", "intercept", "r_squared", "points_used", "window_lower", "window_upper"])?;
        for c in &cells {
            let row = match &c.fit {
                Some(f) => vec![
                    c.d.to_string(),
                    fmt_f64(f.slope),
                    fmt_f64(f.intercept),
                    fmt_f64(f.r_squared),
                    f.points_used.to_string(),
                    fmt_f64(f.window.lower),
                    fmt_f64(f.window.upper),
                ],
                None => vec![c.d.to_string(), String::new(), String::new(), String::new(), "0".into(), String::new(), String::new()],
            };
            w.write_record(row)?;
        }
        w.flush()?;
    }
    write_runs_csv(&report.records, fs::File::create(dir.join(format!("{}_runs.csv", spec.panel)))?)?;
    write_meta(spec, dir)
}

#[derive(Serialize)]
struct Meta<'a> {
    spec: &'a ExperimentSpec,
    algorithm: Algorithm,
    error_reference: ErrorReference,
    notes: Vec<String>,
}

fn write_meta(spec: &ExperimentSpec, dir: &Path) -> Result<()> {
    let mut notes = Vec::new();
    if spec.k > 2 && spec.init == InitKind::Perturbed {
        notes.push(format!(
            "K={} runs start from a perturbation of the truth ({}); no K>2 initializer is implemented",
            spec.k, spec.init_radius_policy
        ));
    }
    if spec.panel == Panel::Table1 {
        notes.push("wall_clock_s covers the solver loop only; step-size tuning and data generation are excluded".into());
    }
    let meta =
        Meta { spec, algorithm: spec.algorithm(), error_reference: spec.error_reference(), notes };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join(format!("{}_meta.json", spec.panel)), text)?;
    Ok(())
}

/// Median iterations and wall clock of one algorithm at one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub d: usize,
    pub algorithm: Algorithm,
    /// Median over trials, counting runs that missed the target as infinite;
    /// −1 when the median itself is infinite.
    pub iterations: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TableReport {
    pub rows: Vec<TableRow>,
    pub records: Vec<RunRecord>,
}

impl TableReport {
    pub fn row(&self, d: usize, alg: Algorithm) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.d == d && r.algorithm == alg)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Runs AM and tuned GD to the target precision on the same instances and
/// initializations. Trials run sequentially so that timings are not skewed
/// by contention.
pub fn compare_table(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<TableReport> {
    spec.validate()?;
    if spec.panel != Panel::Table1 {
        return Err(MixregError::InvalidSpec(format!("compare_table needs panel table1, got {}", spec.panel)));
    }
    let spec = ExperimentSpec { target_precision: Some(spec.target_precision.unwrap_or(DEFAULT_TARGET)), ..spec.clone() };
    let sigma = spec.sigmas[0];
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &d in &spec.d_list {
        for alg in [Algorithm::Am, Algorithm::Gd] {
            let outcomes: Vec<Outcome> = (0..spec.trials).map(|t| run_trial(&spec, alg, d, sigma, t, true)).collect();
            let ok: Vec<&RunRecord> = outcomes.iter().filter(|o| o.errors.is_some()).map(|o| &o.record).collect();
            let iters: Vec<f64> = ok
                .iter()
                .map(|r| if r.iterations_to_target >= 0 { r.iterations_to_target as f64 } else { f64::INFINITY })
                .collect();
            let clocks: Vec<f64> = ok.iter().map(|r| r.wall_clock_s).collect();
            let iterations = median(&iters).filter(|m| m.is_finite()).unwrap_or(-1.0);
            rows.push(TableRow { d, algorithm: alg, iterations, wall_clock_s: median(&clocks).unwrap_or(f64::NAN) });
            records.extend(outcomes.into_iter().map(|o| o.record));
        }
    }
    let report = TableReport { rows, records };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv_writer(fs::File::create(dir.join("table1.csv"))?);
        w.write_record(["d", "algorithm", "iterations", "wall_clock_s"])?;
        for r in &report.rows {
            w.write_record([r.d.to_string(), r.algorithm.to_string(), fmt_f64(r.iterations), fmt_f64(r.wall_clock_s)])?;
        }
        w.flush()?;
        write_runs_csv(&report.records, fs::File::create(dir.join("table1_runs.csv"))?)?;
        write_meta(&spec, dir)?;
    }
    Ok(report)
}

/// Settings of the mismatch-set sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma1Spec {
    pub d: usize,
    pub n: usize,
    /// Perturbation radii, or multiples of each trial's boundary radius
    /// when `relative` is set.
    pub radii: Vec<f64>,
    #[serde(default)]
    pub relative: bool,
    pub trials: usize,
    pub root_seed: u64,
}

impl Default for Lemma1Spec {
    fn default() -> Self {
        Self { d: 20, n: 2000, radii: vec![1.0, 0.5, 0.25, 0.125], relative: true, trials: 50, root_seed: 0 }
    }
}

impl Lemma1Spec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MixregError::InvalidSpec(m.into()));
        if self.d == 0 || self.n < 2 || self.trials == 0 {
            return fail("need d >= 1, n >= 2 and trials >= 1");
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return fail("radii must be non-empty, finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Point {
    /// Entry of `radii` this point was produced from.
    pub radius: f64,
    /// Mean `dist` of the initializations.
    pub dist: f64,
    pub mean_frac_mismatch: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Report {
    pub points: Vec<Lemma1Point>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Mean mismatch fraction `|S| / n` of perturbed initializations at each
/// radius, and the least-squares line through `(dist, fraction)`.
pub fn lemma1_sweep(spec: &Lemma1Spec, out_dir: Option<&Path>) -> Result<Lemma1Report> {
    spec.validate()?;
    let per_trial: Vec<Vec<(f64, f64)>> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(spec.root_seed, &[t as u64]);
            let truth = GroundTruth::random(2, spec.d, 0.0, derive_seed(seed, &[0]))?;
            let inst = sample_instance(&truth, spec.n, derive_seed(seed, &[1]))?;
            let base = if spec.relative { RadiusPolicy::Boundary { factor: 1.0 }.radius(&truth, spec.n)? } else { 1.0 };
            spec.radii
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let init = perturbed_init(&truth, r * base, derive_seed(seed, &[2, i as u64]))?;
                    let s = mismatch_set(&inst, &init)?;
                    Ok((s.dist_at_eval, s.size as f64 / spec.n as f64))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let m = spec.trials as f64;
    let points: Vec<Lemma1Point> = spec
        .radii
        .iter()
        .enumerate()
        .map(|(i, &radius)| Lemma1Point {
            radius,
            dist: per_trial.iter().map(|p| p[i].0).sum::<f64>() / m,
            mean_frac_mismatch: per_trial.iter().map(|p| p[i].1).sum::<f64>() / m,
        })
        .collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.dist, p.mean_frac_mismatch)).collect();
    let (slope, intercept, r_squared) = fit_line(&xy)?;
    let report = Lemma1Report { points, slope, intercept, r_squared };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv_writer(fs::File::create(dir.join("lemma1.csv"))?);
        w.write_record(["dist", "mean_frac_mismatch"])?;
        for p in &report.points {
            w.write_record([fmt_f64(p.dist), fmt_f64(p.mean_frac_mismatch)])?;
        }
        w.flush()?;
        let mut w = csv_writer(fs::File::create(dir.join("lemma1_fit.csv"))?);
        w.write_record(["slope", "intercept", "r_squared"])?;
        w.write_record([fmt_f64(slope), fmt_f64(intercept), fmt_f64(r_squared)])?;
        w.flush()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(panel: Panel) -> ExperimentSpec {
        ExperimentSpec { d_list: vec![8], trials: 3, ..ExperimentSpec::preset(panel) }
    }

    #[test]
    fn radius_policy_parsing() {
        assert_eq!("boundary".parse::<RadiusPolicy>().unwrap(), RadiusPolicy::Boundary { factor: 1.0 });
        assert_eq!("boundary:0.5".parse::<RadiusPolicy>().unwrap(), RadiusPolicy::Boundary { factor: 0.5 });
        assert_eq!("fixed:2".parse::<RadiusPolicy>().unwrap(), RadiusPolicy::Fixed(2.0));
        for bad in ["", "fixed", "fixed:-1", "boundary:x", "radius:1"] {
            assert!(bad.parse::<RadiusPolicy>().unwrap_err().is_spec_error(), "{bad}");
        }
    }

    #[test]
    fn json_overrides_preset() {
        let spec = ExperimentSpec::from_json(r#"{"panel":"fig3b","trials":4,"sigma":0.1,"K":2}"#).unwrap();
        assert_eq!(spec.d_list, vec![250, 500]);
        assert_eq!(spec.trials, 4);
        assert_eq!(spec.sigmas, vec![0.1]);
        let again = ExperimentSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for text in [
            r#"{"trials":1}"#,
            r#"{"panel":"fig9"}"#,
            r#"{"panel":"fig3a","trials":0}"#,
            r#"{"panel":"fig3a","d_list":[]}"#,
            r#"{"panel":"fig3a","n_over_d":0.5}"#,
            r#"{"panel":"fig3a","unknown":1}"#,
            r#"{"panel":"fig3a","sigma":-1}"#,
            r#"{"panel":"fig3c","init":"spectral"}"#,
            r#"[1,2]"#,
        ] {
            assert!(ExperimentSpec::from_json(text).unwrap_err().is_spec_error(), "{text}");
        }
    }

    #[test]
    fn panel_defaults() {
        assert_eq!(ExperimentSpec::preset(Panel::Fig4c).algorithm(), Algorithm::Gd);
        assert_eq!(ExperimentSpec::preset(Panel::Fig4a).error_reference(), ErrorReference::FinalIterate);
        assert_eq!(ExperimentSpec::preset(Panel::Fig3a).error_reference(), ErrorReference::Truth);
        assert_eq!(ExperimentSpec::preset(Panel::Table1).target_precision, Some(1e-3));
        assert_eq!(ExperimentSpec::preset(Panel::Fig3c).n_for(200), 3000);
    }

    #[test]
    fn trial_seeds_ignore_trial_count() {
        let a = small(Panel::Fig3a);
        let b = ExperimentSpec { trials: 7, sigmas: vec![0.3], ..a.clone() };
        assert_eq!(a.trial_seed(8, 2), b.trial_seed(8, 2));
        assert_ne!(a.trial_seed(8, 2), a.trial_seed(9, 2));
    }

    #[test]
    fn adding_trials_keeps_existing_records() {
        let a = run_panel(&small(Panel::Fig3a), None).unwrap();
        let b = run_panel(&ExperimentSpec { trials: 5, ..small(Panel::Fig3a) }, None).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.final_dist, y.final_dist);
            assert_eq!(x.rounds_run, y.rounds_run);
        }
    }

    #[test]
    fn run_records_round_trip() {
        let mut report = run_panel(&small(Panel::Fig4c), None).unwrap();
        report.records[0].error = Some("a, \"quoted\" message".into());
        let mut buf = Vec::new();
        write_runs_csv(&report.records, &mut buf).unwrap();
        assert_eq!(read_runs_csv(buf.as_slice()).unwrap(), report.records);
    }

    #[test]
    fn solver_failures_are_recorded_not_fatal() {
        // An astronomically far start overflows the loss, so no step size is stable.
        let spec = ExperimentSpec {
            algorithm: Some(Algorithm::Gd),
            init_radius_policy: "fixed:1e300".into(),
            ..small(Panel::Custom)
        };
        let report = run_panel(&spec, None).unwrap();
        assert_eq!(report.records.len(), 3);
        assert!(report.records.iter().all(|r| r.error.is_some() && r.iterations_to_target == -1));
        assert!(report.curves[0].mean.is_empty() && report.curves[0].trials_ok == 0);
    }

    #[test]
    fn median_handles_even_and_infinite() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), Some(f64::INFINITY));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn lemma1_zero_radius_has_empty_mismatch() {
        let spec = Lemma1Spec { d: 5, n: 200, radii: vec![0.0, 1.0], relative: true, trials: 3, root_seed: 1 };
        let r = lemma1_sweep(&spec, None).unwrap();
        assert_eq!(r.points[0].mean_frac_mismatch, 0.0);
        assert_eq!(r.points[0].dist, 0.0);
        assert!(r.points[1].mean_frac_mismatch > 0.0);
    }
}
