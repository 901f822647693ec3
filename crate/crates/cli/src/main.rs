//! `reinsqp` command-line front end.
//!
//! Exit codes: 0 success, 1 input error, 2 infeasible, 3 numerical failure
//! (including a solve whose optimality check did not pass).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use reinsqp::error::ErrorClass;
use reinsqp::pipeline::{self, Report, SolveOptions};
use reinsqp::portfolio::Form;
use reinsqp::{Error, Model, Scenario};

#[derive(Parser, Debug)]
#[command(name = "reinsqp", version, about = "Multiperiod mean-variance underwriting on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check tree rules and the independence hypotheses.
    Validate(CommonArgs),
    /// Structured solve (multiplier iteration, dense fallback).
    Solve(SolveArgs),
    /// Dense reference solve with its certificate.
    Oracle(SolveArgs),
    /// Spectral sets from the elimination pivots, plus dense eigenvalues.
    Spectrum(CommonArgs),
    /// Structured solve against the dense reference.
    Compare(SolveArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    input: PathBuf,
    /// Report destination; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = reinsqp::contracts::TOL_MOM, value_parser = positive)]
    tol_mom: f64,
    #[arg(long, default_value_t = reinsqp::contracts::TOL_PD_REL, value_parser = positive)]
    tol_pd: f64,
    /// Treat hypothesis failures as input errors.
    #[arg(long)]
    strict: bool,
    /// Seed for the randomized checks of `validate`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = FormArg::MinVariance)]
    form: FormArg,
    /// Override the mean floor of the scenario file.
    #[arg(long)]
    e: Option<f64>,
    /// Override the variance cap of the scenario file.
    #[arg(long, value_parser = positive)]
    sigma2: Option<f64>,
    #[arg(long, default_value_t = reinsqp::multipliers::TOL_KKT, value_parser = positive)]
    tol_kkt: f64,
    #[arg(long, default_value_t = reinsqp::portfolio::TOL_FEAS, value_parser = positive)]
    tol_feas: f64,
    #[arg(long, default_value_t = reinsqp::multipliers::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// Report the iteration's own result even when it misses the tolerance.
    #[arg(long)]
    no_dense_fallback: bool,
    /// Also sweep the mean floor over [0, 2e] and write (e, variance) pairs as CSV.
    #[arg(long)]
    frontier_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 21)]
    frontier_points: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormArg {
    MinVariance,
    FixedMean,
    MaxMean,
}

impl From<FormArg> for Form {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::MinVariance => Form::MinVariance,
            FormArg::FixedMean => Form::FixedMean,
            FormArg::MaxMean => Form::MaxMean,
        }
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(_) => Err("must be a positive number".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(c)) = err.downcast_ref::<Exit>() {
        return *c;
    }
    match err.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Infeasible) => 2,
        Some(ErrorClass::Numerical) => 3,
        _ => 1,
    }
}

fn class_name(code: u8) -> &'static str {
    match code {
        2 => "infeasible",
        3 => "numerical",
        _ => "input",
    }
}

fn load(args: &CommonArgs) -> anyhow::Result<Scenario> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    Ok(Scenario::from_json(&text)?)
}

fn emit(report: &Report, output: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn options(a: &SolveArgs) -> SolveOptions {
    SolveOptions {
        form: a.form.into(),
        tol_kkt: a.tol_kkt,
        max_iter: a.max_iter,
        strict: a.common.strict,
        tol_feas: a.tol_feas,
        tol_mom: a.common.tol_mom,
        tol_pd: a.common.tol_pd,
        dense_fallback: !a.no_dense_fallback,
        ..SolveOptions::default()
    }
}

fn model(a: &SolveArgs) -> anyhow::Result<Model> {
    let mut m = load(&a.common)?.into_model()?;
    if let Some(e) = a.e {
        m.config.e = e;
    }
    if let Some(s) = a.sigma2 {
        m.config.sigma2 = Some(s);
    }
    m.config.validate(m.tree.horizon())?;
    Ok(m)
}

fn warn_hypotheses(failures: &[String]) {
    for f in failures {
        warn!("hypothesis check failed: {}", f);
    }
}

fn check_solved(report: &pipeline::SolveReport) -> anyhow::Result<()> {
    warn_hypotheses(&report.hypotheses.failures);
    for f in &report.fallbacks_used {
        warn!("fallback used: {:?}", f);
    }
    info!(
        "method={:?} mean={:.6e} variance={:.6e} kkt={:.3e} iterations={}",
        report.method, report.mean, report.variance, report.kkt.max_residual, report.iterations
    );
    if !report.kkt.converged {
        warn!(
            "optimality check failed: residual {:.3e} > tol {:.1e}",
            report.kkt.max_residual, report.kkt.tol
        );
        return Err(Exit(3).into());
    }
    Ok(())
}

fn finish_solve(report: Report, a: &SolveArgs, m: &Model, opts: &SolveOptions) -> anyhow::Result<()> {
    emit(&report, a.common.output.as_deref())?;
    if let Some(p) = &a.frontier_csv {
        write_frontier(m, opts, p, a.frontier_points)?;
    }
    match &report {
        Report::Solve(r) | Report::Oracle(r) => check_solved(r),
        _ => Ok(()),
    }
}

fn write_frontier(m: &Model, opts: &SolveOptions, path: &Path, points: usize) -> anyhow::Result<()> {
    if points < 2 {
        bail!("--frontier-points must be at least 2");
    }
    let top = 2.0 * m.config.e.max(0.0);
    let floors: Vec<f64> = (0..points).map(|i| top * i as f64 / (points - 1) as f64).collect();
    let pts = pipeline::frontier(m, opts, &floors);
    fs::write(path, pipeline::frontier_csv(&pts)).with_context(|| format!("writing {}", path.display()))?;
    info!("frontier: {} points written to {}", pts.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate(a) => {
            let s = load(&a)?;
            let rep = pipeline::validate_with(&s, a.tol_mom, a.tol_pd, a.seed);
            for v in &rep.violations {
                warn!("tree rule violated: {}: {}", v.rule, v.message);
            }
            if let Some(e) = &rep.error {
                warn!("scenario rejected: {}", e);
            }
            let failures = rep.hypotheses.as_ref().map(|h| h.failures()).unwrap_or_default();
            warn_hypotheses(&failures);
            if rep.spot_checks.as_ref().is_some_and(|c| !c.ok) {
                warn!("randomized form checks failed");
            }
            let valid = rep.valid;
            emit(&Report::Validate(rep), a.output.as_deref())?;
            if !valid || (a.strict && !failures.is_empty()) {
                return Err(Exit(1).into());
            }
            Ok(())
        }
        Command::Solve(a) => {
            let m = model(&a)?;
            let opts = options(&a);
            let solved = pipeline::solve(&m, &opts)?;
            finish_solve(Report::Solve(solved.report), &a, &m, &opts)
        }
        Command::Oracle(a) => {
            let m = model(&a)?;
            let opts = options(&a);
            let solved = pipeline::solve_dense(&m, &opts)?;
            finish_solve(Report::Oracle(solved.report), &a, &m, &opts)
        }
        Command::Spectrum(a) => {
            let s = load(&a)?;
            let m = s.into_model()?;
            let rep = pipeline::spectrum(&m, reinsqp::operators::DENSE_CAP)?;
            if rep.dense_a.is_none() {
                warn!("dimension above the dense cap; dense eigenvalues omitted");
            }
            emit(&Report::Spectrum(rep), a.output.as_deref())
        }
        Command::Compare(a) => {
            let m = model(&a)?;
            let rep = pipeline::compare(&m, &options(&a))?;
            info!("max relative deviation {:.3e}", rep.max_rel_deviation);
            let ok = rep.structured.kkt.converged && rep.dense.kkt.converged;
            emit(&Report::Compare(rep), a.common.output.as_deref())?;
            if !ok {
                warn!("one of the solves did not pass its optimality check");
                return Err(Exit(3).into());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REINSQP_LOG", "warn"))
        .format(|buf, rec| writeln!(buf, "level={} target={} msg={:?}", rec.level().as_str().to_lowercase(), rec.target(), rec.args().to_string()))
        .target(env_logger::Target::Stderr)
        .init();
    // clap's own usage-error code (2) would collide with "infeasible"
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if err.downcast_ref::<Exit>().is_none() {
                eprintln!("level=error class={} msg={:?}", class_name(code), format!("{:#}", err));
            }
            ExitCode::from(code)
        }
    }
}
