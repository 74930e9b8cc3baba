use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mixreg::am::{read_trace_csv, run_am, AmConfig, Trace};
use mixreg::bench::{compare_table, lemma1_sweep, run_panel, ExperimentSpec, InitKind, Lemma1Spec, Panel, RadiusPolicy};
use mixreg::datagen::{perturbed_init, sample_instance, GroundTruth, Instance};
use mixreg::gd::{run_gd, tune_step_size, GdConfig, DEFAULT_PROBE_ROUNDS};
use mixreg::metrics::{fit_convergence_exponent, Window};
use mixreg::rng::derive_seed;
use mixreg::spectral::spectral_init;
use mixreg::{MixregError, Result};

#[derive(Parser)]
#[command(name = "mixreg", version, about = "Mixed linear regression solvers and benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic instance and write it as CSV.
    Gen {
        #[command(flatten)]
        problem: Problem,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single alternating-minimization run.
    Am(RunArgs),
    /// Single gradient-heuristic run.
    Gd {
        #[command(flatten)]
        run: RunArgs,
        /// Step size; tuned by doubling when omitted.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Fit the convergence exponent of a trace CSV.
    Rate {
        trace: PathBuf,
        #[arg(long, default_value_t = Window::DEFAULT_LOWER)]
        window_lo: f64,
        /// Defaults to the first dist value of the trace.
        #[arg(long)]
        window_hi: Option<f64>,
    },
    /// Reproduce one figure panel.
    Panel {
        name: String,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// AM versus tuned GD comparison table.
    Table1(SweepArgs),
    /// Mismatch-set size versus initialization distance.
    Lemma1 {
        /// JSON file with any of d, n, radii, relative, trials, root_seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Problem {
    #[arg(long, default_value_t = 50)]
    d: usize,
    /// Sample count; defaults to 6·d.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Problem {
    fn n(&self) -> usize {
        self.n.unwrap_or(6 * self.d)
    }

    fn build(&self) -> Result<(GroundTruth, Instance)> {
        let truth = GroundTruth::random(self.k, self.d, self.sigma, derive_seed(self.seed, &[0]))?;
        let inst = sample_instance(&truth, self.n(), derive_seed(self.seed, &[1]))?;
        Ok((truth, inst))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Perturbed,
    Spectral,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    problem: Problem,
    /// Read the instance from CSV instead of sampling one (spectral init only).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "perturbed")]
    init: InitArg,
    /// `boundary`, `boundary:<factor>`, `fixed:<r>` or a bare radius.
    #[arg(long, default_value = "boundary")]
    radius: String,
    #[arg(long, default_value_t = 50)]
    rounds: usize,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    /// Fresh disjoint sample group per round.
    #[arg(long)]
    split: bool,
    /// Stop once dist to the truth reaches this value.
    #[arg(long)]
    target: Option<f64>,
    /// Trace CSV destination (a `.json` summary is written next to it);
    /// stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON experiment spec; fields left out take the panel defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn spec_error(msg: impl Into<String>) -> MixregError {
    MixregError::InvalidSpec(msg.into())
}

fn parse_radius(s: &str) -> Result<RadiusPolicy> {
    match s.parse::<f64>() {
        Ok(r) if r >= 0.0 && r.is_finite() => Ok(RadiusPolicy::Fixed(r)),
        Ok(_) => Err(spec_error(format!("bad radius {s:?}"))),
        Err(_) => s.parse(),
    }
}

fn write_output(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut file = io::BufWriter::new(fs::File::create(path)?);
            f(&mut file)?;
            file.flush()?;
        }
        None => f(&mut io::stdout().lock())?,
    }
    Ok(())
}

fn single_run(args: &RunArgs, gamma: Option<Option<f64>>) -> Result<()> {
    if args.input.is_some() && matches!(args.init, InitArg::Perturbed) {
        return Err(spec_error("--input needs --init spectral: a perturbed start requires the ground truth"));
    }
    let (truth, inst) = match &args.input {
        Some(path) => (None, Instance::read_csv(fs::File::open(path)?)?),
        None => {
            let (t, i) = args.problem.build()?;
            (Some(t), i)
        }
    };
    let (init, radius) = match args.init {
        InitArg::Spectral => (spectral_init(&inst, None)?, None),
        InitArg::Perturbed => {
            let truth = truth.as_ref().expect("checked above");
            let n1 = if args.split { inst.n() / args.rounds.max(1) } else { inst.n() };
            let r = parse_radius(&args.radius)?.radius(truth, n1)?;
            (perturbed_init(truth, r, derive_seed(args.problem.seed, &[2]))?, Some(r))
        }
    };
    let track = truth.is_some();
    let (trace, algorithm, used_gamma): (Trace, &str, Option<f64>) = match gamma {
        None => {
            let cfg = AmConfig {
                max_rounds: args.rounds,
                sample_split: args.split,
                tol: args.tol,
                track_truth: track,
                target_precision: args.target,
                split_seed: derive_seed(args.problem.seed, &[3]),
            };
            (run_am(&inst, &init, &cfg)?, "am", None)
        }
        Some(g) => {
            if args.split {
                return Err(spec_error("the gradient heuristic does not use sample splitting"));
            }
            let g = match g {
                Some(g) => g,
                None => tune_step_size(&inst, &init, DEFAULT_PROBE_ROUNDS)?,
            };
            let cfg = GdConfig {
                gamma: g,
                max_rounds: args.rounds,
                tol: args.tol,
                target_precision: args.target,
                track_truth: track,
            };
            (run_gd(&inst, &init, &cfg)?, "gd", Some(g))
        }
    };
    write_output(args.out.as_deref(), |w| trace.write_csv(w))?;
    let summary = json!({
        "algorithm": algorithm,
        "d": inst.dim(),
        "n": inst.n(),
        "k": init.k(),
        "sigma": truth.as_ref().map(|t| t.sigma()),
        "seed": args.problem.seed,
        "init": match args.init { InitArg::Perturbed => "perturbed", InitArg::Spectral => "spectral" },
        "init_radius": radius,
        "gamma": used_gamma,
        "rounds": trace.rounds(),
        "converged_at": trace.converged_at,
        "target_reached_at": trace.target_reached_at,
        "final_dist": trace.dist_to_truth.as_ref().and_then(|d| d.last().copied()),
        "final_loss": trace.loss_seq.last(),
        "wall_clock_s": trace.total_wall_clock(),
        "diagnostics": trace.diagnostics.len(),
    });
    match &args.out {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&summary)?;
            text.push('\n');
            fs::write(path.with_extension("json"), text)?;
        }
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn load_spec(panel: Panel, sweep: &SweepArgs) -> Result<ExperimentSpec> {
    let mut spec = match &sweep.spec {
        Some(path) => {
            let spec = ExperimentSpec::from_json(&fs::read_to_string(path)?)?;
            if spec.panel != panel {
                return Err(spec_error(format!("spec is for panel {}, not {panel}", spec.panel)));
            }
            spec
        }
        None => ExperimentSpec::preset(panel),
    };
    if let Some(t) = sweep.trials {
        spec.trials = t;
    }
    if let Some(s) = sweep.seed {
        spec.root_seed = s;
    }
    if let Some(init) = sweep.init {
        spec.init = match init {
            InitArg::Perturbed => InitKind::Perturbed,
            InitArg::Spectral => InitKind::Spectral,
        };
    }
    spec.validate()?;
    Ok(spec)
}

fn table(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let report = compare_table(spec, Some(out))?;
    println!("d,algorithm,iterations,wall_clock_s");
    for r in &report.rows {
        println!("{},{},{},{:.6}", r.d, r.algorithm, r.iterations, r.wall_clock_s);
    }
    Ok(())
}

fn panel(name: &str, sweep: &SweepArgs) -> Result<()> {
    let panel: Panel = name.parse()?;
    let spec = load_spec(panel, sweep)?;
    if panel == Panel::Table1 {
        return table(&spec, &sweep.out);
    }
    let report = run_panel(&spec, Some(&sweep.out))?;
    let failed = report.records.iter().filter(|r| r.error.is_some()).count();
    println!("sigma,d,trials_ok,slope,r_squared");
    for c in &report.curves {
        let (slope, r2) = c.fit.as_ref().map_or((f64::NAN, f64::NAN), |f| (f.slope, f.r_squared));
        println!("{},{},{},{slope:.4},{r2:.4}", c.sigma, c.d, c.trials_ok);
    }
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see {}_runs.csv", spec.panel);
    }
    Ok(())
}

fn lemma1(spec: Option<&Path>, trials: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut s = match spec {
        Some(path) => {
            let mut base = serde_json::to_value(Lemma1Spec::default())?;
            let user: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| spec_error(e.to_string()))?;
            let (Some(b), Some(u)) = (base.as_object_mut(), user.as_object()) else {
                return Err(spec_error("lemma1 spec must be a JSON object"));
            };
            b.extend(u.clone());
            serde_json::from_value::<Lemma1Spec>(base).map_err(|e| spec_error(e.to_string()))?
        }
        None => Lemma1Spec::default(),
    };
    if let Some(t) = trials {
        s.trials = t;
    }
    if let Some(seed) = seed {
        s.root_seed = seed;
    }
    let r = lemma1_sweep(&s, Some(out))?;
    println!("dist,mean_frac_mismatch");
    for p in &r.points {
        println!("{:.6e},{:.6e}", p.dist, p.mean_frac_mismatch);
    }
    eprintln!("slope={:.6e} intercept={:.6e} r_squared={:.4}", r.slope, r.intercept, r.r_squared);
    Ok(())
}

fn rate(trace: &Path, lo: f64, hi: Option<f64>) -> Result<()> {
    let rows = read_trace_csv(fs::File::open(trace)?)?;
    let seq: Vec<f64> = rows
        .iter()
        .map(|r| r.dist.ok_or_else(|| spec_error("trace has no dist column values")))
        .collect::<Result<_>>()?;
    let window = Window::new(lo, hi.unwrap_or_else(|| Window::for_sequence(&seq).upper));
    let f = fit_convergence_exponent(&seq, window)?;
    println!("slope,intercept,r_squared,points_used,window_lower,window_upper");
    println!("{},{},{},{},{},{}", f.slope, f.intercept, f.r_squared, f.points_used, window.lower, window.upper);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { problem, out } => {
            let (_, inst) = problem.build()?;
            write_output(out.as_deref(), |w| inst.write_csv(w))
        }
        Command::Am(args) => single_run(&args, None),
        Command::Gd { run, gamma } => single_run(&run, Some(gamma)),
        Command::Rate { trace, window_lo, window_hi } => rate(&trace, window_lo, window_hi),
        Command::Panel { name, sweep } => panel(&name, &sweep),
        Command::Table1(sweep) => {
            let spec = load_spec(Panel::Table1, &sweep)?;
            table(&spec, &sweep.out)
        }
        Command::Lemma1 { spec, trials, seed, out } => lemma1(spec.as_deref(), trials, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_spec_error() { 1 } else { 2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_number_is_a_fixed_radius() {
        assert!(matches!(parse_radius("0.25"), Ok(RadiusPolicy::Fixed(r)) if r == 0.25));
        assert!(matches!(parse_radius("boundary"), Ok(RadiusPolicy::Boundary { .. })));
        assert!(parse_radius("-1").unwrap_err().is_spec_error());
        assert!(parse_radius("inf").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
