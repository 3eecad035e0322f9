//! `kbgain` command-line front end.
//!
//! Every command prints its JSON result on stdout. With `--out DIR` the same
//! JSON goes to `DIR/result.json` together with the command's CSV series.
//! Exit status: 0 success, 1 domain error (JSON error object on stdout),
//! 2 usage error (bad flags, unreadable or malformed input file).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kbgain::model::{matrix_from_rows, matrix_to_rows, validate_system, GainSchedule, HorizonSpec, LtiSystem, ProblemSpec};
use kbgain::pmp::integrate_canonical;
use kbgain::riccati::integrate_riccati;
use kbgain::scalar::{
    classify_case, phase_field, solve_scalar, stationary_point, write_phase_field_csv, ScalarProblem,
    ScalarSolution,
};
use kbgain::simulate::{estimate_mse, simulate_paths, SimulationOptions};
use kbgain::stationary::{
    alpha_sweep, block_spectrum, random_experiment, sdp, solve_stationary, trial_system, write_spectrum_csv,
    write_sweep_csv,
};
use kbgain::DMatrix;
use serde::Deserialize;
use serde_json::{json, Value};

/// Samples per trajectory CSV.
const TRAJECTORY_POINTS: usize = 2001;
/// Grid side of the phase-portrait CSV.
const PHASE_GRID: usize = 41;

#[derive(Parser, Debug)]
#[command(name = "kbgain", version, about = "Gain design for minimum-information Kalman-Bucy filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Case label and stationary point of a scalar problem.
    Classify(ScalarArgs),
    /// Optimal finite-horizon gain schedule of a scalar problem.
    SolveScalar(RunArgs),
    /// Optimal time-invariant gain via the relaxed SDP.
    SolveStationary(StationaryArgs),
    /// Hamiltonian-gap certificate of a schedule (the analytic one for scalar input without a schedule).
    VerifyPmp(RunArgs),
    /// Monte-Carlo check of the filter MSE against the Riccati prediction.
    Simulate(SimulateArgs),
    /// Integrates the covariance flow under a schedule.
    Riccati(RunArgs),
    /// Random-system rank-exactness experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Problem JSON.
    #[arg(value_name = "INPUT")]
    positional: Option<PathBuf>,
    #[arg(long = "input", value_name = "PATH", conflicts_with = "positional")]
    input: Option<PathBuf>,
    /// Directory for result.json and CSV series.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
}

impl Common {
    fn path(&self) -> Option<&Path> {
        self.input.as_deref().or(self.positional.as_deref())
    }
}

#[derive(Args, Debug)]
struct ScalarArgs {
    #[command(flatten)]
    common: Common,
    /// Drift of the scalar source.
    #[arg(long = "a", allow_negative_numbers = true)]
    a: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Integration step; defaults to (t1 − t0)/8192.
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args, Debug)]
struct StationaryArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "a", allow_negative_numbers = true)]
    a: Option<f64>,
    #[arg(long, default_value_t = sdp::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Simulation step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of sample paths.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Also write paths.csv with each path's integrated squared error.
    #[arg(long)]
    emit_paths: bool,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 100.0)]
    gamma: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated α values for a gain sweep on the first trial's system.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
}

enum Failure {
    Usage(String),
    Domain { kind: &'static str, message: String },
}

impl Failure {
    fn domain(kind: &'static str, e: impl std::fmt::Display) -> Self {
        Failure::Domain {
            kind,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Where a command puts its result JSON and CSV series.
struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn new(dir: Option<PathBuf>) -> Result<Self, Failure> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self { dir })
    }

    fn csv(&self, name: &str, write: impl FnOnce(BufWriter<File>) -> csv::Result<()>) -> Outcome {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Failure::domain("io", format!("{}: {e}", path.display())))?;
        write(BufWriter::new(file)).map_err(|e| Failure::domain("io", format!("{}: {e}", path.display())))
    }

    fn finish(&self, result: &Value) -> Outcome {
        let text = serde_json::to_string_pretty(result).expect("values serialize");
        if let Some(dir) = &self.dir {
            let path = dir.join("result.json");
            fs::write(&path, format!("{text}\n")).map_err(|e| Failure::domain("io", format!("{}: {e}", path.display())))?;
        }
        emit(&text);
        Ok(())
    }
}

/// Writes a line to stdout. A closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_problem(common: &Common) -> Result<ProblemSpec, Failure> {
    let path = common
        .path()
        .ok_or_else(|| Failure::Usage("this command needs a problem file".into()))?;
    let mut spec: ProblemSpec = read_json(path)?;
    if let Some(a) = common.alpha {
        spec.alpha = a;
    }
    if let Some(g) = common.gamma {
        spec.gamma = g;
    }
    Ok(spec)
}

fn parse_problem(spec: &ProblemSpec) -> Result<(LtiSystem, HorizonSpec), Failure> {
    spec.parse().map_err(|e| Failure::domain("model", e))
}

fn scalar_problem(system: &LtiSystem, horizon: &HorizonSpec) -> Result<ScalarProblem, Failure> {
    ScalarProblem::from_model(system, horizon).map_err(|e| Failure::domain("scalar", e))
}

fn default_dt(horizon: &HorizonSpec, dt: Option<f64>) -> f64 {
    dt.unwrap_or(horizon.duration() / 8192.0)
}

/// The file's schedule, or for scalar input the analytic optimum.
fn schedule_or_analytic(
    spec: &ProblemSpec,
    system: &LtiSystem,
    horizon: &HorizonSpec,
) -> Result<(GainSchedule, Option<ScalarSolution>), Failure> {
    if let Some(s) = spec.gain_schedule().map_err(|e| Failure::domain("model", e))? {
        return Ok((s, None));
    }
    if system.n() == 1 {
        let sol = solve_scalar(&scalar_problem(system, horizon)?).map_err(|e| Failure::domain("scalar", e))?;
        return Ok((sol.schedule(), Some(sol)));
    }
    Err(Failure::domain("model", "no schedule given and the problem is not scalar"))
}

fn classify(args: ScalarArgs) -> Outcome {
    let c = &args.common;
    let problem = match (c.path(), args.a, c.alpha, c.gamma) {
        (Some(_), ..) => {
            let spec = load_problem(c)?;
            let (system, horizon) = parse_problem(&spec)?;
            scalar_problem(&system, &horizon)?
        }
        (None, Some(a), Some(alpha), Some(gamma)) => {
            ScalarProblem::new(a, alpha, gamma, 0.0, 0.0, 1.0).map_err(|e| Failure::domain("scalar", e))?
        }
        _ => return Err(Failure::Usage("classify needs a problem file or --a, --alpha and --gamma".into())),
    };
    let label = classify_case(&problem);
    let out = Output::new(c.out.clone())?;
    out.finish(&json!({
        "case": label.label,
        "threshold_low": label.threshold_low,
        "threshold_high": label.threshold_high,
        "stationary_point": stationary_point(&problem),
    }))
}

fn solve_scalar_cmd(args: RunArgs) -> Outcome {
    let spec = load_problem(&args.common)?;
    let (system, horizon) = parse_problem(&spec)?;
    let problem = scalar_problem(&system, &horizon)?;
    let sol = solve_scalar(&problem).map_err(|e| Failure::domain("scalar", e))?;
    let out = Output::new(args.common.out.clone())?;
    out.csv("trajectory.csv", |w| sol.write_trajectory_csv(w, TRAJECTORY_POINTS))?;
    let stat = stationary_point(&problem);
    let x_max = 2.0 * problem.x0.max(stat.x).max(1e-3);
    let p_max = 2.0 * sol.segments.iter().map(|s| s.p_start).fold(stat.p, f64::max).max(1e-3);
    out.csv("phase_field.csv", |w| {
        write_phase_field_csv(&phase_field(&problem, x_max, p_max, PHASE_GRID), w)
    })?;
    let mut v = serde_json::to_value(&sol).expect("solution serializes");
    v["switch_residuals"] = json!(sol.switch_residuals());
    out.finish(&v)
}

#[derive(Deserialize)]
struct StationaryInput {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    alpha: f64,
    gamma: f64,
}

fn solve_stationary_cmd(args: StationaryArgs) -> Outcome {
    let c = &args.common;
    let (system, alpha, gamma) = match (c.path(), args.a) {
        (Some(path), _) => {
            let input: StationaryInput = read_json(path)?;
            let a = matrix_from_rows(&input.a).map_err(|e| Failure::domain("model", e))?;
            let b = matrix_from_rows(&input.b).map_err(|e| Failure::domain("model", e))?;
            let system = validate_system(a, b).map_err(|e| Failure::domain("model", e))?;
            (system, c.alpha.unwrap_or(input.alpha), c.gamma.unwrap_or(input.gamma))
        }
        (None, Some(a)) => {
            let (Some(alpha), Some(gamma)) = (c.alpha, c.gamma) else {
                return Err(Failure::Usage("--a needs --alpha and --gamma".into()));
            };
            (LtiSystem::scalar(a).map_err(|e| Failure::domain("model", e))?, alpha, gamma)
        }
        (None, None) => return Err(Failure::Usage("solve-stationary needs a problem file or --a".into())),
    };
    let sol = solve_stationary(&system, alpha, gamma, args.tol).map_err(|e| Failure::domain("stationary", e))?;
    let out = Output::new(c.out.clone())?;
    let mut v = serde_json::to_value(&sol).expect("solution serializes");
    if system.n() == 1 {
        v["x_star"] = json!(sol.x[(0, 0)]);
        v["u_star"] = json!(sol.c[(0, 0)].powi(2));
    }
    out.csv("gain_spectrum.csv", |w| write_spectrum_csv(&sol.gain_spectrum, w))?;
    out.csv("rank_spectrum.csv", |w| write_spectrum_csv(&block_spectrum(&sol.x, &sol.y), w))?;
    out.finish(&v)
}

fn verify_pmp(args: RunArgs) -> Outcome {
    let spec = load_problem(&args.common)?;
    let (system, horizon) = parse_problem(&spec)?;
    let (schedule, analytic) = schedule_or_analytic(&spec, &system, &horizon)?;
    let dt = default_dt(&horizon, args.dt);
    let cert = integrate_canonical(&system, &horizon, &schedule, dt).map_err(|e| Failure::domain("pmp", e))?;
    let out = Output::new(args.common.out.clone())?;
    out.csv("gap.csv", |w| cert.write_gap_csv(w))?;
    out.finish(&json!({
        "dt": dt,
        "max_gap": cert.max_gap,
        "breakpoints": schedule.breakpoints(),
        "analytic_subcase": analytic.map(|s| s.subcase),
    }))
}

fn riccati_cmd(args: RunArgs) -> Outcome {
    let spec = load_problem(&args.common)?;
    let (system, horizon) = parse_problem(&spec)?;
    let schedule = match spec.gain_schedule().map_err(|e| Failure::domain("model", e))? {
        Some(s) => s,
        None => GainSchedule::constant(horizon.t0, horizon.t1, DMatrix::zeros(system.n(), system.n()), horizon.gamma)
            .map_err(|e| Failure::domain("model", e))?,
    };
    let dt = default_dt(&horizon, args.dt);
    let traj = integrate_riccati(&system, &horizon, &schedule, dt).map_err(|e| Failure::domain("riccati", e))?;
    let out = Output::new(args.common.out.clone())?;
    out.csv("riccati.csv", |w| traj.write_csv(w))?;
    out.finish(&json!({
        "dt": dt,
        "cost": traj.costs(),
        "final_covariance": matrix_to_rows(traj.final_covariance()),
    }))
}

fn simulate_cmd(args: SimulateArgs) -> Outcome {
    let spec = load_problem(&args.common)?;
    let (system, horizon) = parse_problem(&spec)?;
    let (breakpoints, gains) = match &spec.schedule {
        Some(s) => {
            spec.gain_schedule().map_err(|e| Failure::domain("model", e))?;
            let gains = s
                .gains
                .iter()
                .map(|g| matrix_from_rows(g))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::domain("model", e))?;
            (s.breakpoints.clone(), gains)
        }
        None => {
            let (schedule, _) = schedule_or_analytic(&spec, &system, &horizon)?;
            let gains = schedule
                .values()
                .iter()
                .map(|u| u.map(|v| v.max(0.0).sqrt()))
                .collect();
            (schedule.breakpoints().to_vec(), gains)
        }
    };
    let options = SimulationOptions {
        num_paths: args.paths,
        dt_sim: args.dt,
        seed: args.seed,
        keep_paths: args.emit_paths,
    };
    let sim = simulate_paths(&system, &horizon, &breakpoints, &gains, options).map_err(|e| Failure::domain("simulate", e))?;
    let out = Output::new(args.common.out.clone())?;
    if args.emit_paths {
        out.csv("paths.csv", |w| sim.write_paths_csv(w))?;
    }
    out.finish(&json!({
        "seed": args.seed,
        "report": sim.report,
        "verdict": estimate_mse(&sim.report),
    }))
}

fn experiment(args: ExperimentArgs) -> Outcome {
    let summary = random_experiment(args.n, args.alpha, args.gamma, args.trials, args.seed)
        .map_err(|e| Failure::domain("stationary", e))?;
    let out = Output::new(args.out.clone())?;
    out.csv("rank_spectra.csv", |w| summary.write_rank_spectra_csv(w))?;
    out.csv("gain_spectra.csv", |w| summary.write_gain_spectra_csv(w))?;
    let mut v = serde_json::to_value(&summary).expect("summary serializes");
    if !args.alphas.is_empty() {
        let system = trial_system(args.n, args.seed, 0);
        let sweep = alpha_sweep(&system, &args.alphas, args.gamma).map_err(|e| Failure::domain("stationary", e))?;
        out.csv("alpha_sweep.csv", |w| write_sweep_csv(&sweep, w))?;
        v["alpha_sweep"] = serde_json::to_value(&sweep).expect("sweep serializes");
    }
    out.finish(&v)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Classify(a) => classify(a),
        Command::SolveScalar(a) => solve_scalar_cmd(a),
        Command::SolveStationary(a) => solve_stationary_cmd(a),
        Command::VerifyPmp(a) => verify_pmp(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Riccati(a) => riccati_cmd(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain { kind, message }) => {
            emit(&json!({ "error": kind, "message": message }).to_string());
            ExitCode::from(1)
        }
    }
}
