use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use projdyn::battery::{self, BatteryConfig, Fault};
use projdyn::catalog;
use projdyn::definition::{ControllerKind, MuSetting, ScenarioSpec};
use projdyn::model::{self, MuPolicy};
use projdyn::projection::build_projectors;
use projdyn::sim::{self, Controller};
use projdyn::system::{jacobian_at, plant_at};
use projdyn::trace::{RankEventCause, SimulationTrace, TraceFormat};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "projdyn", version, about = "Constrained multibody dynamics in dependent coordinates")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace.
    Simulate(SimulateArgs),
    /// Run the invariant battery; exits nonzero if any invariant fails.
    Check(CheckArgs),
    /// Spectrum, conditioning and virtual-mass analysis at one configuration.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Catalog system name.
    #[arg(long, required_unless_present = "scenario_file")]
    system: Option<String>,
    /// Scenario definition (TOML); flags override its values.
    #[arg(long)]
    scenario_file: Option<PathBuf>,
    /// Simulated time in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Step size in seconds.
    #[arg(long)]
    dt: Option<f64>,
    /// Virtual mass: a positive number, `auto` (geometric mean of the optimal interval) or `midpoint`.
    #[arg(long)]
    mu: Option<String>,
    #[arg(long, value_enum)]
    controller: Option<ControllerArg>,
    /// Regulation target, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    target: Option<Vec<f64>>,
    /// Initial configuration, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q: Option<Vec<f64>>,
    /// Initial velocity, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    qdot: Option<Vec<f64>>,
    /// Start from a random reachable state drawn with `--seed`.
    #[arg(long)]
    random_initial: bool,
    /// Retract q onto the position constraints every N steps.
    #[arg(long)]
    retract_every: Option<usize>,
    /// Trace file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative rank tolerance (default 1e-10, or PROJDYN_RANK_TOL).
    #[arg(long)]
    rank_tol: Option<f64>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per suite.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    rank_tol: Option<f64>,
    /// Deliberately break the model to test the harness.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    /// Report file (JSON); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    system: String,
    /// Configuration, comma separated; the catalog reference configuration when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    q: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-3)]
    mu_min: f64,
    #[arg(long, default_value_t = 1e3)]
    mu_max: f64,
    /// Grid points (log spaced); the interval endpoints are always added.
    #[arg(long, default_value_t = 25)]
    points: usize,
    /// Also print a step-halving convergence table for the default scenario.
    #[arg(long)]
    convergence: bool,
    #[arg(long, default_value_t = 2.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: AnalyzeFormat,
    #[arg(long)]
    rank_tol: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    None,
    Regulate,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    CbarSign,
}

/// Error classified by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Check(args) => check(args),
        Command::Analyze(args) => analyze(args),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn rank_tol(explicit: Option<f64>) -> Result<f64, Failure> {
    projdyn::resolve_rank_tol(explicit).map_err(usage)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(args: SimulateArgs) -> Result<ExitCode, Failure> {
    let tol = rank_tol(args.rank_tol)?;
    let mut spec = match &args.scenario_file {
        Some(path) => ScenarioSpec::from_file(path)
            .with_context(|| format!("reading scenario {}", path.display()))
            .map_err(usage)?,
        None => ScenarioSpec::default(),
    };
    if let Some(name) = args.system {
        spec.system = Some(name);
        spec.system_file = None;
    }
    spec.horizon = args.horizon.or(spec.horizon);
    spec.dt = args.dt.or(spec.dt);
    if let Some(mu) = args.mu {
        spec.mu = Some(MuSetting::Policy(mu));
    }
    match args.controller {
        Some(ControllerArg::None) => spec.controller = Some(ControllerKind::None),
        Some(ControllerArg::Regulate) => spec.controller = Some(ControllerKind::Regulate),
        None => {}
    }
    spec.target = args.target.or(spec.target);
    spec.q = args.q.or(spec.q);
    spec.qdot = args.qdot.or(spec.qdot);
    spec.retract_every = args.retract_every.or(spec.retract_every);

    if args.random_initial {
        let name = spec
            .system
            .clone()
            .ok_or_else(|| usage(anyhow::anyhow!("--random-initial needs a catalog system")))?;
        let entry = catalog::entry(&name).map_err(usage)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
        let active = entry.system.initial_constraints();
        let (q, qdot) = entry.sample_state(&mut rng, &active).map_err(usage)?;
        spec.q = Some(q.iter().copied().collect());
        spec.qdot = Some(qdot.iter().copied().collect());
    }

    let scenario = spec.build(tol).map_err(usage)?;
    let trace = sim::run(&scenario).context("simulation failed")?;

    let format = match args.format {
        FormatArg::Csv => TraceFormat::Csv,
        FormatArg::Jsonl => TraceFormat::JsonLines,
    };
    let mut out = output(&args.out)?;
    trace.write(format, &mut out).context("writing trace")?;
    out.flush()?;
    drop(out);

    let target = match &scenario.controller {
        Controller::Regulate { target, .. } => Some(target.clone()),
        _ => None,
    };
    let summary = summarize(&trace, target.as_ref());
    if args.out.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(ExitCode::SUCCESS)
}

fn summarize(trace: &SimulationTrace, target: Option<&DVector<f64>>) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let last = trace.last().expect("trace has the initial record");
    let _ = writeln!(s, "system: {}", trace.system);
    let _ = writeln!(s, "records: {}", trace.records.len());
    let _ = writeln!(s, "final time: {}", last.t);
    let _ = writeln!(s, "mu: {:e}", last.mu);
    let _ = writeln!(s, "relative energy drift: {:e}", trace.relative_energy_drift());
    let max_drift = trace.records.iter().map(|r| r.drift_velocity).fold(0.0, f64::max);
    let _ = writeln!(s, "max velocity drift |A qdot|: {max_drift:e}");
    if let Some(t) = target {
        let e = (last.q_vec() - t).norm();
        let _ = writeln!(s, "final error |q - q*|: {e:e}");
        let _ = writeln!(s, "final speed |qdot|: {:e}", last.qdot_vec().norm());
        if let Some(inc) = trace.max_lyapunov_increase() {
            let _ = writeln!(s, "max Lyapunov increase per step: {inc:e}");
        }
    }
    let _ = writeln!(s, "rank events: {}", trace.events.len());
    for ev in &trace.events {
        let cause = match ev.cause {
            RankEventCause::Topology => "topology",
            RankEventCause::Configuration => "configuration",
        };
        let _ = writeln!(
            s,
            "  t = {} (step {}): rank {} -> {} [{cause}], energy drop {:e}, mu {:e}",
            ev.t, ev.step, ev.rank_before, ev.rank_after, ev.energy_drop, ev.mu
        );
    }
    s
}

fn check(args: CheckArgs) -> Result<ExitCode, Failure> {
    let config = BatteryConfig {
        seed: args.seed,
        samples: args.samples,
        rank_tol: rank_tol(args.rank_tol)?,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::CbarSign => Fault::CbarSign,
        }),
    };
    if config.samples == 0 {
        return Err(usage(anyhow::anyhow!("--samples must be positive")));
    }
    let report = battery::run_battery(&config);
    let mut out = output(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &report).context("writing report")?;
    writeln!(out)?;
    out.flush()?;
    for c in &report.checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        eprintln!(
            "{status:4} {:20} {} (max {:e}, tol {:e})",
            c.suite, c.invariant, c.max_residual, c.tolerance
        );
        if let Some(e) = &c.error {
            eprintln!("     {e}");
        }
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn analyze(args: AnalyzeArgs) -> Result<ExitCode, Failure> {
    let tol = rank_tol(args.rank_tol)?;
    if !(args.mu_min > 0.0 && args.mu_max > args.mu_min && args.points >= 2) {
        return Err(usage(anyhow::anyhow!("need 0 < --mu-min < --mu-max and --points ≥ 2")));
    }
    let entry = catalog::entry(&args.system).map_err(usage)?;
    let sys = entry.system.as_ref();
    let n = sys.dof();
    let q = match args.q {
        Some(v) if v.len() == n => DVector::from_vec(v),
        Some(v) => return Err(usage(anyhow::anyhow!("--q needs {n} entries, got {}", v.len()))),
        None => entry.reference_configuration.clone(),
    };
    let zero = DVector::zeros(n);
    let active = sys.initial_constraints();
    let plant = plant_at(sys, &q, &zero);
    let proj = build_projectors(&jacobian_at(sys, &active, &q, &zero).map_err(usage)?, tol).map_err(usage)?;
    let nonzero = model::projected_inertia_eigenvalues(&plant, &proj, tol);
    let selection = model::optimal_mu(&plant, &proj, MuPolicy::GeometricMean, tol).context("virtual mass")?;

    let (a, b) = (args.mu_min.ln(), args.mu_max.ln());
    let mut grid: Vec<f64> =
        (0..args.points).map(|i| (a + (b - a) * i as f64 / (args.points - 1) as f64).exp()).collect();
    if let Some((lo, hi)) = selection.interval {
        grid.extend([lo, hi]);
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut rows = Vec::with_capacity(grid.len());
    for &mu in &grid {
        let sp = model::spectrum_of_mbar(&plant, &proj, mu).context("spectrum")?;
        let inside = selection.interval.is_some_and(|(lo, hi)| mu >= lo && mu <= hi);
        rows.push((mu, sp.cond, inside, sp.eigenvalues));
    }

    let convergence = if args.convergence {
        Some(convergence_table(&args.system, args.horizon, args.dt, tol)?)
    } else {
        None
    };

    let mut out = io::stdout().lock();
    match args.format {
        AnalyzeFormat::Json => {
            let json = serde_json::json!({
                "system": sys.name(),
                "q": q.iter().collect::<Vec<_>>(),
                "rank": proj.rank,
                "freedom": proj.freedom(),
                "projected_inertia_eigenvalues": nonzero,
                "interval": selection.interval,
                "optimal_cond": selection.interval.map(|(lo, hi)| hi / lo),
                "selected_mu": selection.mu,
                "sweep": rows.iter().map(|(mu, cond, inside, eig)| serde_json::json!({
                    "mu": mu, "cond": cond, "in_interval": inside, "spectrum": eig,
                })).collect::<Vec<_>>(),
                "convergence": convergence.as_ref().map(|c| c.iter().map(|(h, e)| serde_json::json!({"dt": h, "error": e})).collect::<Vec<_>>()),
            });
            serde_json::to_writer_pretty(&mut out, &json).context("writing analysis")?;
            writeln!(out)?;
        }
        AnalyzeFormat::Text => {
            writeln!(out, "system: {}", sys.name())?;
            writeln!(out, "q: {:?}", q.iter().collect::<Vec<_>>())?;
            writeln!(out, "rank(A): {}  n - r: {}", proj.rank, proj.freedom())?;
            writeln!(out, "nonzero eigenvalues of PMP: {nonzero:?}")?;
            match selection.interval {
                Some((lo, hi)) => {
                    writeln!(out, "optimal mu interval: [{lo}, {hi}]")?;
                    writeln!(out, "optimal cond: {}", hi / lo)?;
                }
                None => writeln!(out, "optimal mu interval: none (no admissible directions)")?,
            }
            writeln!(out, "selected mu (auto): {}", selection.mu)?;
            writeln!(out, "{:>14} {:>14}  {}", "mu", "cond", "in interval")?;
            for (mu, cond, inside, _) in &rows {
                writeln!(out, "{mu:>14.6e} {cond:>14.6e}  {}", if *inside { "*" } else { "" })?;
            }
            if let Some(table) = &convergence {
                writeln!(out, "{:>12} {:>14} {:>8}", "dt", "max error", "ratio")?;
                for (i, (h, e)) in table.iter().enumerate() {
                    let ratio = if i > 0 { format!("{:.2}", table[i - 1].1 / e) } else { String::new() };
                    writeln!(out, "{h:>12.4e} {e:>14.6e} {ratio:>8}")?;
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Final-state error of the default scenario at `dt`, `dt/2`, `dt/4` against a `dt/32` reference.
fn convergence_table(system: &str, horizon: f64, dt: f64, tol: f64) -> Result<Vec<(f64, f64)>, Failure> {
    let run = |h: f64| -> Result<SimulationTrace, Failure> {
        let spec = ScenarioSpec {
            system: Some(system.to_string()),
            horizon: Some(horizon),
            dt: Some(h),
            ..Default::default()
        };
        let scenario = spec.build(tol).map_err(usage)?;
        Ok(sim::run(&scenario).context("simulation failed")?)
    };
    let reference = run(dt / 32.0)?;
    let reference = reference.last().expect("nonempty trace");
    let mut table = Vec::new();
    for h in [dt, dt / 2.0, dt / 4.0] {
        let trace = run(h)?;
        let last = trace.last().expect("nonempty trace");
        let err = (last.q_vec() - reference.q_vec())
            .amax()
            .max((last.qdot_vec() - reference.qdot_vec()).amax());
        table.push((h, err));
    }
    Ok(table)
}
