//! End-to-end solves and serializable reports.
//!
//! The structured route runs the multiplier iteration on top of the
//! elimination solver. When the iteration stops short of the KKT tolerance the
//! dense oracle takes over (if allowed and the instance is small enough) and
//! the report says so in `fallbacks_used`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contracts::{check_hypotheses, HypothesisReport, TOL_MOM, TOL_PD_REL};
use crate::error::{Error, ErrorClass, Result};
use crate::exec;
use crate::multipliers::{iterate, Context, KktReport, MultiplierSet, StopReason, DEFAULT_MAX_ITER, TOL_KKT};
use crate::operators::{apply, OperatorKind, DENSE_CAP};
use crate::oracle::{self, dense_spectrum, CertificateSummary, DenseProblem};
use crate::portfolio::{evaluate_constraints_tol, TOL_FEAS, mean_functional, variance_b, ConstraintConfig, ConstraintReport, Form};
use crate::scenario::{Model, Scenario};
use crate::solver::spectral_sets;
use crate::tree::{validate_tree, Dims, Portfolio, ScenarioTree, Violation};

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub form: Form,
    pub tol_kkt: f64,
    pub max_iter: usize,
    /// Refuse instances violating the independence hypotheses.
    pub strict: bool,
    pub dense_cap: usize,
    /// Let the dense QP finish the job when the iteration does not converge.
    pub dense_fallback: bool,
    /// Absolute tolerance on constraint slacks in the report.
    pub tol_feas: f64,
    /// Hypothesis-check tolerances (moment identities, relative eigenvalue floor).
    pub tol_mom: f64,
    pub tol_pd: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            form: Form::MinVariance,
            tol_kkt: TOL_KKT,
            max_iter: DEFAULT_MAX_ITER,
            strict: false,
            dense_cap: DENSE_CAP,
            dense_fallback: true,
            tol_feas: TOL_FEAS,
            tol_mom: TOL_MOM,
            tol_pd: TOL_PD_REL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct NodeValue {
    pub issue_time: usize,
    pub node: i64,
    pub values: Vec<f64>,
}

pub fn node_values(tree: &ScenarioTree, p: &Portfolio) -> Vec<NodeValue> {
    p.stages()
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            tree.layer_ids(k).iter().enumerate().map(move |(pos, id)| NodeValue {
                issue_time: k,
                node: *id,
                values: s.at(pos).to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Linear solves with `C` went through a dense factorization.
    DenseLinearSolve,
    /// The optimum was taken from the dense QP.
    DenseQp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Structured,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct MultiplierReport {
    pub lambda: Vec<f64>,
    pub mu: f64,
    pub nu: Vec<NodeValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct HypothesisSummary {
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub h3_ok: bool,
    pub failures: Vec<String>,
}

impl From<&HypothesisReport> for HypothesisSummary {
    fn from(r: &HypothesisReport) -> Self {
        Self {
            h1_ok: r.h1_ok,
            h2_ok: r.h2_ok,
            h3_ok: r.h3_ok,
            failures: r.failures(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SolveReport {
    pub form: Form,
    pub method: Method,
    /// Mean floor of the final min-variance or fixed-mean problem.
    pub e: f64,
    pub sigma2: Option<f64>,
    pub mean: f64,
    pub variance: f64,
    pub eta: Vec<NodeValue>,
    pub multipliers: MultiplierReport,
    pub kkt: KktReport,
    /// Iteration cycles after the first approximation (last structured run).
    pub iterations: usize,
    /// KKT residual history of the last structured run.
    pub history: Vec<f64>,
    pub stop: Option<StopReason>,
    pub monotone: Option<bool>,
    pub near_singular_l: bool,
    pub deterministic_infeasible: bool,
    pub fallbacks_used: Vec<Fallback>,
    pub bisection_steps: usize,
    pub hypotheses: HypothesisSummary,
    pub constraints: ConstraintReport,
    pub certificate: Option<CertificateSummary>,
}

/// A report together with the in-memory solution.
#[derive(Clone, Debug)]
pub struct Solved {
    pub report: SolveReport,
    pub eta: Portfolio,
    pub multipliers: MultiplierSet,
}

struct Trace {
    iterations: usize,
    history: Vec<f64>,
    stop: Option<StopReason>,
    monotone: Option<bool>,
    near_singular_l: bool,
    deterministic_infeasible: bool,
}

impl Trace {
    fn none() -> Self {
        Self {
            iterations: 0,
            history: Vec::new(),
            stop: None,
            monotone: None,
            near_singular_l: false,
            deterministic_infeasible: false,
        }
    }
}

struct Inner {
    eta: Portfolio,
    multipliers: MultiplierSet,
    kkt: KktReport,
    method: Method,
    trace: Trace,
    fallbacks: Vec<Fallback>,
    certificate: Option<CertificateSummary>,
}

fn hypotheses(model: &Model, opts: &SolveOptions) -> Result<HypothesisReport> {
    let rep = check_hypotheses(&model.tree, &model.book, opts.tol_mom, opts.tol_pd);
    if opts.strict && !rep.all_ok() {
        return Err(Error::Hypothesis(rep.failures().join("; ")));
    }
    Ok(rep)
}

fn dense_inner(model: &Model, cfg: &ConstraintConfig, form: Form, opts: &SolveOptions) -> Result<Inner> {
    let p = DenseProblem::new(&model.tree, &model.book, cfg, opts.dense_cap)?;
    let cert = oracle::dense_qp(&p, form)?;
    Ok(Inner {
        kkt: KktReport { tol: opts.tol_kkt, converged: cert.kkt.max_residual <= opts.tol_kkt, ..cert.kkt.clone() },
        certificate: Some(cert.summary()),
        eta: cert.eta,
        multipliers: cert.multipliers,
        method: Method::Dense,
        trace: Trace::none(),
        fallbacks: Vec::new(),
    })
}

/// Min-variance or fixed-mean at the floor in `cfg`.
fn structured_inner(model: &Model, cfg: &ConstraintConfig, form: Form, opts: &SolveOptions) -> Result<Inner> {
    let ctx = Context::with_cap(&model.tree, &model.book, cfg, form, opts.dense_cap)?;
    let dense_ok = opts.dense_fallback && model.tree.portfolio_dim() <= opts.dense_cap;
    let out = match iterate(&ctx, opts.max_iter, opts.tol_kkt) {
        Ok(out) => out,
        Err(e) if e.class() == ErrorClass::Numerical && dense_ok => {
            log::warn!("structured iteration failed ({}); using the dense QP", e);
            let mut inner = dense_inner(model, cfg, form, opts)?;
            inner.fallbacks = fallbacks(ctx.inv.used_fallback(), true);
            return Ok(inner);
        }
        Err(e) => return Err(e),
    };
    let trace = Trace {
        iterations: out.iterations,
        history: out.history.clone(),
        stop: Some(out.stop),
        monotone: Some(out.monotone),
        near_singular_l: out.near_singular_l,
        deterministic_infeasible: out.deterministic_infeasible,
    };
    if !out.kkt.converged && dense_ok {
        log::info!(
            "iteration stopped at residual {:.3e} ({:?}); using the dense QP",
            out.kkt.max_residual,
            out.stop
        );
        let mut inner = dense_inner(model, cfg, form, opts)?;
        inner.trace = trace;
        inner.fallbacks = fallbacks(ctx.inv.used_fallback(), true);
        return Ok(inner);
    }
    Ok(Inner {
        eta: out.eta,
        multipliers: out.multipliers,
        kkt: out.kkt,
        method: Method::Structured,
        trace,
        fallbacks: fallbacks(ctx.inv.used_fallback(), false),
        certificate: None,
    })
}

fn fallbacks(linear: bool, qp: bool) -> Vec<Fallback> {
    let mut v = Vec::new();
    if linear {
        v.push(Fallback::DenseLinearSolve);
    }
    if qp {
        v.push(Fallback::DenseQp);
    }
    v
}

/// Largest floor `e` whose min-variance optimum has variance at most `σ²`.
/// `solve_at(e)` returns `None` when the floor is infeasible.
fn bisect_mean<T>(
    sigma2: f64,
    mut solve_at: impl FnMut(f64) -> Result<Option<(T, f64, f64)>>,
) -> Result<(f64, T, usize)> {
    const STEPS: usize = 200;
    let (base, v0, mean0) = solve_at(0.0)?.ok_or(Error::Infeasible)?;
    if v0 > sigma2 * (1.0 + 1e-12) {
        return Err(Error::Infeasible);
    }
    let mut lo = mean0.max(0.0);
    let mut best = (lo, base, v0);
    let mut hi = 2.0 * lo.max(1.0);
    let mut steps = 0;
    loop {
        steps += 1;
        if steps > STEPS {
            return Err(Error::Input("mean unbounded under the variance cap".into()));
        }
        match solve_at(hi)? {
            Some((s, v, _)) if v <= sigma2 => {
                lo = hi;
                best = (hi, s, v);
                hi *= 2.0;
            }
            _ => break,
        }
    }
    for _ in 0..STEPS {
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) || (sigma2 - best.2).abs() <= 1e-12 * sigma2 {
            break;
        }
        steps += 1;
        let mid = 0.5 * (lo + hi);
        match solve_at(mid)? {
            Some((s, v, _)) if v <= sigma2 => {
                lo = mid;
                best = (mid, s, v);
            }
            _ => hi = mid,
        }
    }
    Ok((best.0, best.1, steps))
}

fn infeasible_as_none(r: Result<Inner>) -> Result<Option<Inner>> {
    match r {
        Ok(i) => Ok(Some(i)),
        Err(Error::Infeasible) => Ok(None),
        Err(e) => Err(e),
    }
}

fn finish(
    model: &Model,
    cfg: &ConstraintConfig,
    form: Form,
    inner: Inner,
    hyp: &HypothesisReport,
    steps: usize,
    tol_feas: f64,
) -> Solved {
    let tree = &model.tree;
    let m = &inner.multipliers;
    let report = SolveReport {
        form,
        method: inner.method,
        e: cfg.e,
        sigma2: cfg.sigma2,
        mean: mean_functional(tree, &model.book, &inner.eta),
        variance: variance_b(tree, &model.book, &inner.eta),
        eta: node_values(tree, &inner.eta),
        multipliers: MultiplierReport {
            lambda: m.lambda.clone(),
            mu: m.mu,
            nu: node_values(tree, &m.nu),
        },
        kkt: inner.kkt,
        iterations: inner.trace.iterations,
        history: inner.trace.history,
        stop: inner.trace.stop,
        monotone: inner.trace.monotone,
        near_singular_l: inner.trace.near_singular_l,
        deterministic_infeasible: inner.trace.deterministic_infeasible,
        fallbacks_used: inner.fallbacks,
        bisection_steps: steps,
        hypotheses: hyp.into(),
        constraints: evaluate_constraints_tol(tree, &model.book, &inner.eta, cfg, tol_feas),
        certificate: inner.certificate,
    };
    Solved {
        report,
        eta: inner.eta,
        multipliers: inner.multipliers,
    }
}

fn run(model: &Model, opts: &SolveOptions, dense: bool) -> Result<Solved> {
    let hyp = hypotheses(model, opts)?;
    let cfg = model.config.clone();
    let inner_at = |c: &ConstraintConfig, form: Form| {
        if dense {
            dense_inner(model, c, form, opts)
        } else {
            structured_inner(model, c, form, opts)
        }
    };
    match opts.form {
        Form::MinVariance | Form::FixedMean => {
            let inner = inner_at(&cfg, opts.form)?;
            Ok(finish(model, &cfg, opts.form, inner, &hyp, 0, opts.tol_feas))
        }
        Form::MaxMean => {
            let sigma2 = cfg
                .sigma2
                .ok_or_else(|| Error::Input("max-mean form needs a variance cap (sigma2)".into()))?;
            if dense {
                let inner = inner_at(&cfg, Form::MaxMean)?;
                let e = inner.certificate.as_ref().map(|c| c.e_used).unwrap_or(cfg.e);
                let steps = inner.certificate.as_ref().map(|c| c.bisection_steps).unwrap_or(0);
                let at = ConstraintConfig { e, ..cfg };
                return Ok(finish(model, &at, Form::MaxMean, inner, &hyp, steps, opts.tol_feas));
            }
            let (e, inner, steps) = bisect_mean(sigma2, |e| {
                let at = ConstraintConfig { e, ..cfg.clone() };
                let Some(inner) = infeasible_as_none(inner_at(&at, Form::MinVariance))? else {
                    return Ok(None);
                };
                if !inner.kkt.converged {
                    return Err(Error::NotConverged {
                        residual: inner.kkt.max_residual,
                    });
                }
                let v = variance_b(&model.tree, &model.book, &inner.eta);
                let mean = mean_functional(&model.tree, &model.book, &inner.eta);
                Ok(Some((inner, v, mean)))
            })?;
            let at = ConstraintConfig { e, ..cfg };
            Ok(finish(model, &at, Form::MaxMean, inner, &hyp, steps, opts.tol_feas))
        }
    }
}

/// Structured pipeline (with fallbacks as configured).
pub fn solve(model: &Model, opts: &SolveOptions) -> Result<Solved> {
    run(model, opts, false)
}

/// Dense oracle, same report shape plus the certificate.
pub fn solve_dense(model: &Model, opts: &SolveOptions) -> Result<Solved> {
    run(model, opts, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CompareReport {
    pub structured: SolveReport,
    pub dense: SolveReport,
    /// `‖η_s − η_d‖_H / max(‖η_d‖_H, 1)`.
    pub eta_deviation: f64,
    pub mean_deviation: f64,
    pub variance_deviation: f64,
    pub max_rel_deviation: f64,
}

/// Structured pipeline without the dense-QP fallback against the oracle.
pub fn compare(model: &Model, opts: &SolveOptions) -> Result<CompareReport> {
    let s_opts = SolveOptions {
        dense_fallback: false,
        ..opts.clone()
    };
    let s = solve(model, &s_opts)?;
    let d = solve_dense(model, opts)?;
    let tree = &model.tree;
    let mut diff = s.eta.clone();
    diff.axpy(-1.0, &d.eta);
    let eta_deviation = tree.norm(&diff) / tree.norm(&d.eta).max(1.0);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    let mean_deviation = rel(s.report.mean, d.report.mean);
    let variance_deviation = rel(s.report.variance, d.report.variance);
    Ok(CompareReport {
        max_rel_deviation: eta_deviation.max(mean_deviation).max(variance_deviation),
        eta_deviation,
        mean_deviation,
        variance_deviation,
        structured: s.report,
        dense: d.report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct FrontierPoint {
    pub e: f64,
    pub feasible: bool,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub converged: bool,
    pub method: Option<Method>,
}

/// Min-variance optima over a sweep of floors; independent solves run in parallel.
pub fn frontier(model: &Model, opts: &SolveOptions, floors: &[f64]) -> Vec<FrontierPoint> {
    let opts = SolveOptions {
        form: Form::MinVariance,
        ..opts.clone()
    };
    exec::map_slice(floors, |e| {
        let mut m = model.clone();
        m.config.e = *e;
        match solve(&m, &opts) {
            Ok(s) => FrontierPoint {
                e: *e,
                feasible: true,
                mean: Some(s.report.mean),
                variance: Some(s.report.variance),
                converged: s.report.kkt.converged,
                method: Some(s.report.method),
            },
            Err(_) => FrontierPoint {
                e: *e,
                feasible: false,
                mean: None,
                variance: None,
                converged: false,
                method: None,
            },
        }
    })
}

pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let mut out = String::from("e,variance,mean,feasible,converged\n");
    let f = |x: Option<f64>| x.map(|v| format!("{:.12e}", v)).unwrap_or_default();
    for p in points {
        out.push_str(&format!(
            "{:.12e},{},{},{},{}\n",
            p.e,
            f(p.variance),
            f(p.mean),
            p.feasible,
            p.converged
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SpectrumReport {
    pub sigma_a: Vec<f64>,
    pub sigma_b: Vec<f64>,
    pub levels_a: Vec<Vec<f64>>,
    pub levels_b: Vec<Vec<f64>>,
    pub radius: f64,
    pub dense_a: Option<Vec<f64>>,
    pub dense_b: Option<Vec<f64>>,
    /// Largest distance from a dense eigenvalue to the matching set.
    pub max_distance_a: Option<f64>,
    pub max_distance_b: Option<f64>,
}

pub fn spectrum(model: &Model, dense_cap: usize) -> Result<SpectrumReport> {
    let sets = spectral_sets(&crate::contracts::MomentTables::new(&model.tree, &model.book));
    let dense = |kind| match dense_spectrum(kind, &model.tree, &model.book, dense_cap) {
        Ok(v) => Ok(Some(v)),
        Err(Error::DimensionOverflow { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let dense_a = dense(OperatorKind::A)?;
    let dense_b = dense(OperatorKind::B)?;
    let dist = |kind, ev: &Option<Vec<f64>>| {
        ev.as_ref()
            .map(|v| v.iter().map(|x| sets.distance(kind, *x)).fold(0.0, f64::max))
    };
    Ok(SpectrumReport {
        max_distance_a: dist(OperatorKind::A, &dense_a),
        max_distance_b: dist(OperatorKind::B, &dense_b),
        sigma_a: sets.sigma_a,
        sigma_b: sets.sigma_b,
        levels_a: sets.levels_a,
        levels_b: sets.levels_b,
        radius: sets.radius,
        dense_a,
        dense_b,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ValidateReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
    pub dims: Dims,
    pub n_nodes: usize,
    pub portfolio_dim: Option<usize>,
    pub hypotheses: Option<HypothesisReport>,
    pub spot_checks: Option<SpotChecks>,
    pub error: Option<String>,
}

/// Checks of the quadratic forms on seeded random portfolios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SpotChecks {
    pub seed: u64,
    pub samples: usize,
    /// Smallest `b(η)/‖η‖²` seen.
    pub min_variance_ratio: f64,
    /// Smallest `((η,Aη) − (η,Bη))/(1 + |(η,Aη)|)` seen.
    pub min_order_gap: f64,
    pub ok: bool,
}

pub const SPOT_SAMPLES: usize = 32;

pub fn spot_checks(model: &Model, seed: u64, samples: usize) -> SpotChecks {
    let (tree, book) = (&model.tree, &model.book);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ratio, mut gap) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..samples {
        let flat: Vec<f64> = (0..tree.portfolio_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta = Portfolio::from_flat(tree, &flat).expect("shape");
        ratio = ratio.min(variance_b(tree, book, &eta) / tree.norm(&eta).powi(2));
        let qa = tree.inner_unchecked(&eta, &apply(OperatorKind::A, tree, book, &eta));
        let qb = tree.inner_unchecked(&eta, &apply(OperatorKind::B, tree, book, &eta));
        gap = gap.min((qa - qb) / (1.0 + qa.abs()));
    }
    SpotChecks {
        seed,
        samples,
        min_variance_ratio: ratio,
        min_order_gap: gap,
        ok: ratio > 0.0 && gap >= -1e-10,
    }
}

/// Any report, tagged with the command that produced it:
/// `{"command": "...", "report": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "command", content = "report", rename_all = "kebab-case")]
pub enum Report {
    Validate(ValidateReport),
    Solve(SolveReport),
    Oracle(SolveReport),
    Spectrum(SpectrumReport),
    Compare(CompareReport),
}

/// Tree rules, then (if the file builds) the hypothesis checks and spot checks.
pub fn validate(scenario: &Scenario) -> ValidateReport {
    validate_with(scenario, TOL_MOM, TOL_PD_REL, 0)
}

pub fn validate_with(scenario: &Scenario, tol_mom: f64, tol_pd: f64, seed: u64) -> ValidateReport {
    let dims = scenario.dims();
    let tree_rep = validate_tree(&scenario.nodes, dims.horizon);
    let mut rep = ValidateReport {
        valid: false,
        violations: tree_rep.violations,
        dims,
        n_nodes: scenario.nodes.len(),
        portfolio_dim: None,
        hypotheses: None,
        spot_checks: None,
        error: None,
    };
    match scenario.into_model() {
        Ok(m) => {
            let h = check_hypotheses(&m.tree, &m.book, tol_mom, tol_pd);
            rep.valid = rep.violations.is_empty();
            rep.portfolio_dim = Some(m.tree.portfolio_dim());
            rep.hypotheses = Some(h);
            rep.spot_checks = Some(spot_checks(&m, seed, SPOT_SAMPLES));
        }
        Err(e) => rep.error = Some(e.to_string()),
    }
    rep
}
