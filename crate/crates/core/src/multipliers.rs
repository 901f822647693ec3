//! Lagrange multipliers: the `L`-matrix, deterministic and first
//! approximations, the fixed-point iteration, solution assembly and KKT checks.
//!
//! Convention: the objective is `½(η, Cη)` and stationarity reads
//! `Cη = Σ_t λ_t l_t + μ m + ν`, so the candidate solution for given
//! multipliers is `η = C⁻¹(Σ_t λ_t l_t + μ m + ν)`. Constraint functionals are
//! indexed `0..horizon` with `l_horizon = m` and `λ_horizon = μ`.

use std::cell::{Cell, OnceCell};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::contracts::{ContractBook, MomentTables};
use crate::error::{Error, Result};
use crate::linalg::{self, COND_MAX};
use crate::operators::{self, apply, representers, OperatorKind, Representers, DENSE_CAP};
use crate::portfolio::{mean_functional, ConstraintConfig, Form};
use crate::qp::{nonneg_qp, nonneg_qp_masked, DenseQp, Normal};
use crate::solver::Solver;
use crate::tree::{Adapted, Portfolio, ScenarioTree};

pub const TOL_KKT: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;
/// Consecutive residual increases that stop the iteration.
pub const NONMONOTONE_RUN: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiplierSet {
    /// Profitability multipliers `λ_t`, `t = 0..horizon-1`.
    pub lambda: Vec<f64>,
    /// Mean multiplier.
    pub mu: f64,
    /// Bound multipliers, one per underwriting level.
    pub nu: Portfolio,
}

impl MultiplierSet {
    pub fn zeros(tree: &ScenarioTree) -> Self {
        Self {
            lambda: vec![0.0; tree.horizon()],
            mu: 0.0,
            nu: Portfolio::zeros(tree),
        }
    }

    /// From `(λ_0, …, λ_{H-1}, μ)` and `ν`.
    pub fn from_levels(levels: &[f64], nu: Portfolio) -> Self {
        let (mu, lambda) = levels.split_last().expect("at least the mean multiplier");
        Self {
            lambda: lambda.to_vec(),
            mu: *mu,
            nu,
        }
    }

    /// `(λ_0, …, λ_{H-1}, μ)`.
    pub fn levels(&self) -> Vec<f64> {
        self.lambda.iter().copied().chain(std::iter::once(self.mu)).collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            lambda: self.lambda.iter().map(|x| a * x).collect(),
            mu: a * self.mu,
            nu: self.nu.scaled(a),
        }
    }
}

/// Residuals of the optimality conditions for a candidate pair `(η, multipliers)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct KktReport {
    /// `‖Cη − Σλ_t l_t − μm − ν‖_H / (1 + ‖Cη‖_H + ‖Σλ_t l_t + μm + ν‖_H)`.
    pub stationarity: f64,
    /// `|λ_t · slack_t|` per constraint, mean constraint last.
    pub complementarity: Vec<f64>,
    /// Largest `|ν_i η_i|` over nodes and contracts.
    pub bound_complementarity: f64,
    /// `(l_t, η) − e_t` per constraint, mean constraint last.
    pub slacks: Vec<f64>,
    pub primal_infeasibility: f64,
    /// Sign violations of the multipliers (`μ` is free for the fixed-mean form).
    pub dual_infeasibility: f64,
    pub max_residual: f64,
    pub tol: f64,
    pub converged: bool,
}

/// `C⁻¹` at shift zero: structured elimination, falling back to a dense
/// Cholesky factorization when the elimination is singular or inexact.
pub struct InverseC<'a> {
    kind: OperatorKind,
    tree: &'a ScenarioTree,
    book: &'a ContractBook,
    structured: Option<Solver<'a>>,
    dense: OnceCell<Option<Cholesky<f64, Dyn>>>,
    fallback: Cell<bool>,
    cap: usize,
}

impl<'a> InverseC<'a> {
    pub fn new(
        kind: OperatorKind,
        tree: &'a ScenarioTree,
        book: &'a ContractBook,
        moments: MomentTables,
        cap: usize,
    ) -> Self {
        let structured = Solver::with_moments(kind, tree, book, moments, 0.0).ok();
        Self {
            kind,
            tree,
            book,
            structured,
            dense: OnceCell::new(),
            fallback: Cell::new(false),
            cap,
        }
    }

    /// Disables the structured path (tests, benches).
    pub fn dense_only(mut self) -> Self {
        self.structured = None;
        self
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    /// Whether any solve so far needed the dense path.
    pub fn used_fallback(&self) -> bool {
        self.fallback.get()
    }

    pub fn solve(&self, xi: &Portfolio) -> Result<Portfolio> {
        if let Some(s) = &self.structured {
            match s.solve(xi) {
                Ok(out) => return Ok(out.eta),
                Err(Error::ResidualTooLarge { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        self.fallback.set(true);
        let dim = self.tree.portfolio_dim();
        if dim > self.cap {
            return Err(Error::DimensionOverflow { dim, cap: self.cap });
        }
        let chol = self.dense.get_or_init(|| {
            operators::dense_matrix(self.kind, self.tree, self.book, self.cap)
                .ok()
                .and_then(Cholesky::new)
        });
        let chol = chol.as_ref().ok_or(Error::SingularSystem)?;
        let z = chol.solve(&DVector::from_vec(operators::to_weighted(self.tree, xi)));
        operators::from_weighted(self.tree, z.as_slice())
    }
}

/// Shared data for one problem instance.
pub struct Context<'a> {
    pub tree: &'a ScenarioTree,
    pub book: &'a ContractBook,
    pub config: &'a ConstraintConfig,
    /// [`Form::MinVariance`] or [`Form::FixedMean`].
    pub form: Form,
    pub reps: Representers,
    pub inv: InverseC<'a>,
    moments: MomentTables,
    /// `E(u∞(k) u∞(k)ᵀ | F_k)` per node, flattened `N × N`.
    local: Vec<Adapted>,
}

impl<'a> Context<'a> {
    /// The max-mean form is handled as min-variance at a given floor; callers
    /// doing the bisection set `config.e`.
    pub fn new(tree: &'a ScenarioTree, book: &'a ContractBook, config: &'a ConstraintConfig, form: Form) -> Result<Self> {
        Self::with_cap(tree, book, config, form, DENSE_CAP)
    }

    pub fn with_cap(
        tree: &'a ScenarioTree,
        book: &'a ContractBook,
        config: &'a ConstraintConfig,
        form: Form,
        cap: usize,
    ) -> Result<Self> {
        book.check_shape(tree)?;
        config.validate(tree.horizon())?;
        let form = if form == Form::MaxMean { Form::MinVariance } else { form };
        let moments = MomentTables::new(tree, book);
        let n = tree.n_contracts();
        let h = tree.horizon();
        let local = (0..=tree.t_bar())
            .map(|k| {
                let u = book.fin(k);
                let outer = Adapted::from_fn(tree, h, n * n, |pos, ij| {
                    let v = u.at(pos);
                    v[ij / n] * v[ij % n]
                });
                tree.condition_unchecked(&outer, k)
            })
            .collect();
        Ok(Self {
            tree,
            book,
            config,
            form,
            reps: representers(tree, book, config),
            inv: InverseC::new(form.kind(), tree, book, moments.clone(), cap),
            moments,
            local,
        })
    }

    pub fn kind(&self) -> OperatorKind {
        self.form.kind()
    }

    pub fn moments(&self) -> &MomentTables {
        &self.moments
    }

    fn mean_free(&self) -> bool {
        self.form == Form::FixedMean
    }

    /// `Σ_t levels_t · l_t + ν` (mean representer last).
    pub fn combine(&self, levels: &[f64], nu: &Portfolio) -> Portfolio {
        let mut out = nu.clone();
        for (lt, x) in self.reps.functionals().into_iter().zip(levels) {
            if *x != 0.0 {
                out.axpy(*x, lt);
            }
        }
        out
    }

    pub fn kkt(&self, eta: &Portfolio, mult: &MultiplierSet, tol: f64) -> KktReport {
        kkt_with(self.tree, self.book, self.config, &self.reps, self.form, eta, mult, tol)
    }

    fn local_matrix(&self, k: usize, pos: usize) -> DMatrix<f64> {
        let n = self.tree.n_contracts();
        DMatrix::from_row_slice(n, n, self.local[k].at(pos))
    }
}

/// The matrix `L⁻¹_{ts} = (l_t, C⁻¹ l_s)` and the solves behind it.
#[derive(Clone, Debug)]
pub struct LGram {
    pub l_inv: DMatrix<f64>,
    /// `C⁻¹ l_t`, mean representer last.
    pub solves: Vec<Portfolio>,
    /// Functionals that are not identically zero; the others get multiplier 0.
    pub active: Vec<bool>,
    /// Condition number of `L⁻¹` restricted to the active functionals.
    pub cond: f64,
    /// Tikhonov shift added to the diagonal when that condition number exceeds the cap.
    pub regularization: f64,
    pub near_singular: bool,
}

pub fn l_gram(ctx: &Context) -> Result<LGram> {
    let fns = ctx.reps.functionals();
    let norms: Vec<f64> = fns.iter().map(|l| ctx.tree.norm(l)).collect();
    let top = norms.iter().cloned().fold(0.0, f64::max);
    let active: Vec<bool> = norms.iter().map(|n| *n > 1e-14 * top.max(1e-300)).collect();
    let solves = fns
        .iter()
        .zip(&active)
        .map(|(l, a)| {
            if *a {
                ctx.inv.solve(l)
            } else {
                Ok(Portfolio::zeros(ctx.tree))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let s = fns.len();
    let mut l_inv = DMatrix::from_fn(s, s, |t, u| ctx.tree.inner_unchecked(fns[t], &solves[u]));
    linalg::symmetrize(&mut l_inv);

    let idx: Vec<usize> = (0..s).filter(|i| active[*i]).collect();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| l_inv[(idx[i], idx[j])]);
    let cond = if idx.is_empty() { 1.0 } else { linalg::cond_sym(&sub) };
    let near_singular = !(cond <= COND_MAX);
    let regularization = if near_singular {
        1e-10 * (0..idx.len()).map(|i| sub[(i, i)]).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(LGram {
        l_inv,
        solves,
        active,
        cond,
        regularization,
        near_singular,
    })
}

impl LGram {
    /// `r(ν)_t = (l_t, C⁻¹ν) = (C⁻¹l_t, ν)`.
    pub fn r(&self, tree: &ScenarioTree, nu: &Portfolio) -> Vec<f64> {
        self.solves.iter().map(|s| tree.inner_unchecked(s, nu)).collect()
    }

    /// Restriction of `L⁻¹` to the active functionals, regularized.
    pub fn reduced(&self) -> (Vec<usize>, DMatrix<f64>) {
        let idx: Vec<usize> = (0..self.active.len()).filter(|i| self.active[*i]).collect();
        let mut m = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.l_inv[(idx[i], idx[j])]);
        for i in 0..idx.len() {
            m[(i, i)] += self.regularization;
        }
        (idx, m)
    }

    /// `λ = F⁺_{L⁻¹}(e − r)` (with the mean coordinate free when asked) and
    /// the constraint slacks `F⁻_{L⁻¹}(e − r)`.
    pub fn solve_levels(&self, e: &[f64], r: &[f64], mean_free: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.active.len();
        let mut lam = vec![0.0; s];
        let mut slack: Vec<f64> = (0..s).map(|t| r[t] - e[t]).collect();
        let (idx, m) = self.reduced();
        if idx.is_empty() {
            return Ok((lam, slack));
        }
        let x: Vec<f64> = idx.iter().map(|t| e[*t] - r[*t]).collect();
        let free: Vec<bool> = idx.iter().map(|t| mean_free && *t == s - 1).collect();
        let split = nonneg_qp_masked(&m, &x, &free)?;
        for (i, t) in idx.iter().enumerate() {
            lam[*t] = split.plus[i];
            slack[*t] = split.minus[i];
        }
        Ok((lam, slack))
    }
}

/// Solution of the deterministic subproblem (underwriting levels fixed per issue time).
#[derive(Clone, Debug)]
pub struct DeterministicSolution {
    pub eta: Portfolio,
    pub multipliers: MultiplierSet,
    /// One vector per issue time.
    pub levels: Vec<Vec<f64>>,
}

/// Minimizes the objective over portfolios constant on each stage. The Gram
/// matrix of that subspace is `E(u∞(k) u∞(l)ᵀ)` for `A` and the covariance for `B`.
pub fn deterministic_solution(ctx: &Context) -> Result<DeterministicSolution> {
    let tree = ctx.tree;
    let n = tree.n_contracts();
    let tb = tree.t_bar();
    let dim = (tb + 1) * n;
    let h = tree.horizon();
    let probs = tree.layer_probs(h);
    let fin: Vec<&Adapted> = (0..=tb).map(|k| ctx.book.fin(k)).collect();
    let col = |j: usize| (j / n, j % n);

    let mut g = DMatrix::from_fn(dim, dim, |a, b| {
        let ((k, i), (l, j)) = (col(a), col(b));
        probs
            .iter()
            .enumerate()
            .map(|(pos, p)| p * fin[k].at(pos)[i] * fin[l].at(pos)[j])
            .sum::<f64>()
    });
    if ctx.kind() == OperatorKind::B {
        let mean: Vec<f64> = (0..dim).map(|a| ctx.moments.mean[a / n][a % n]).collect();
        g -= linalg::outer(&mean, &mean);
    }
    linalg::symmetrize(&mut g);
    if Cholesky::new(g.clone()).is_none() {
        let d = 1e-12 * (1.0 + linalg::max_abs_mat(&g));
        for i in 0..dim {
            g[(i, i)] += d;
        }
    }

    let rows: Vec<Vec<f64>> = ctx
        .reps
        .functionals()
        .iter()
        .map(|l| (0..=tb).flat_map(|k| tree.expect_unchecked(l.stage(k))).collect())
        .collect();
    let levels = ctx.config.levels();
    let last = rows.len() - 1;
    let mut qp = DenseQp::new(g, vec![0.0; dim]);
    for (t, row) in rows.iter().enumerate() {
        let normal = Normal::Dense(row.clone());
        qp = if t == last && ctx.mean_free() {
            qp.eq(normal, levels[t])
        } else {
            qp.ge(normal, levels[t])
        };
    }
    let sol = match qp.nonnegative().solve() {
        Err(Error::Infeasible) => return Err(Error::InfeasibleDeterministic),
        other => other?,
    };
    let per_stage: Vec<Vec<f64>> = sol.z.chunks(n).map(|c| c.to_vec()).collect();
    let nu_stage: Vec<Vec<f64>> = sol.multipliers[rows.len()..].chunks(n).map(|c| c.to_vec()).collect();
    Ok(DeterministicSolution {
        eta: Portfolio::deterministic(tree, &per_stage)?,
        multipliers: MultiplierSet::from_levels(&sol.multipliers[..rows.len()], Portfolio::deterministic(tree, &nu_stage)?),
        levels: per_stage,
    })
}

/// `Θ⁺` and `Θ⁻` on every stage: nodewise `F^±_M` of
/// `Σλ_t l_t(k) + M η(k) − (Cη)(k)`, with `M = E(u∞(k) u∞(k)ᵀ | F_k)`.
///
/// Under the independence hypotheses `M` is the constant `M_a(k)` and the
/// argument reduces to `Σλ_t l_t(k) + (M_a(k) − M_b(k))E(η(k)) − Σ_{l≠k} B(k,l)η(l)`
/// for kind `B` (without the mean term for `A`). At the optimum `Θ⁺ = η` and `Θ⁻ = ν`.
pub fn theta_all(ctx: &Context, levels: &[f64], eta: &Portfolio) -> Result<(Portfolio, Portfolio)> {
    ctx.tree.check_portfolio(eta)?;
    let tree = ctx.tree;
    let c_eta = apply(ctx.kind(), tree, ctx.book, eta);
    let lin = ctx.combine(levels, &Portfolio::zeros(tree));
    let mut plus = Portfolio::zeros(tree);
    let mut minus = Portfolio::zeros(tree);
    for k in 0..=tree.t_bar() {
        for pos in 0..tree.layer_len(k) {
            let m = ctx.local_matrix(k, pos);
            let me = linalg::mat_vec(&m, eta.stage(k).at(pos));
            let arg: Vec<f64> = (0..tree.n_contracts())
                .map(|i| lin.stage(k).at(pos)[i] + me[i] - c_eta.stage(k).at(pos)[i])
                .collect();
            let split = nonneg_qp(&m, &arg)?;
            plus.stage_mut(k).at_mut(pos).copy_from_slice(&split.plus);
            minus.stage_mut(k).at_mut(pos).copy_from_slice(&split.minus);
        }
    }
    Ok((plus, minus))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Sign {
    Plus,
    Minus,
}

/// One stage of [`theta_all`].
pub fn theta(ctx: &Context, k: usize, sign: Sign, levels: &[f64], eta: &Portfolio) -> Result<Adapted> {
    if k > ctx.tree.t_bar() {
        return Err(Error::OutOfRange(format!("stage {} beyond {}", k, ctx.tree.t_bar())));
    }
    let (p, m) = theta_all(ctx, levels, eta)?;
    Ok(match sign {
        Sign::Plus => p.stage(k).clone(),
        Sign::Minus => m.stage(k).clone(),
    })
}

#[derive(Clone, Debug)]
pub struct Approximation {
    /// `C⁻¹(Σλ_t l_t + ν_in)` before the nodewise projection.
    pub eta_bar: Portfolio,
    /// `Θ⁺`, nonnegative by construction.
    pub eta: Portfolio,
    /// `λ` from the `L`-system and `ν = Θ⁻`.
    pub multipliers: MultiplierSet,
}

/// One approximation cycle started from bound multipliers `nu`.
pub fn first_approximation(ctx: &Context, gram: &LGram, nu: &Portfolio) -> Result<Approximation> {
    let r = gram.r(ctx.tree, nu);
    let (levels, _) = gram.solve_levels(&ctx.config.levels(), &r, ctx.mean_free())?;
    let eta_bar = ctx.inv.solve(&ctx.combine(&levels, nu))?;
    let (plus, minus) = theta_all(ctx, &levels, &eta_bar)?;
    Ok(Approximation {
        eta_bar,
        eta: plus,
        multipliers: MultiplierSet::from_levels(&levels, minus),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIter,
    /// The residual grew for [`NONMONOTONE_RUN`] consecutive iterations.
    NonMonotone,
    /// The iterate stopped being finite.
    Diverged,
}

#[derive(Clone, Debug)]
pub struct IterateOutcome {
    /// The iterate with the smallest KKT residual seen.
    pub eta: Portfolio,
    pub multipliers: MultiplierSet,
    pub kkt: KktReport,
    /// Max KKT residual of the first approximation and of every later iterate.
    pub history: Vec<f64>,
    /// Cycles performed after the first approximation.
    pub iterations: usize,
    pub stop: StopReason,
    /// Whether `history` is non-increasing.
    pub monotone: bool,
    pub near_singular_l: bool,
    /// The deterministic subproblem was infeasible; the cycle started from `ν = 0`.
    pub deterministic_infeasible: bool,
}

/// Deterministic start, first approximation, then repeated cycles with the
/// latest `ν`. Convergence is not assumed: the outcome says whether `tol_kkt`
/// was reached and carries the residual history.
pub fn iterate(ctx: &Context, max_iter: usize, tol_kkt: f64) -> Result<IterateOutcome> {
    let gram = l_gram(ctx)?;
    let (nu0, det_infeasible) = match deterministic_solution(ctx) {
        Ok(d) => (d.multipliers.nu, false),
        Err(Error::InfeasibleDeterministic) => (Portfolio::zeros(ctx.tree), true),
        Err(e) => return Err(e),
    };
    let mut cur = first_approximation(ctx, &gram, &nu0)?;
    let mut rep = ctx.kkt(&cur.eta, &cur.multipliers, tol_kkt);
    let mut history = vec![rep.max_residual];
    let mut best = (cur.clone(), rep.clone());
    let mut stop = if rep.converged { StopReason::Converged } else { StopReason::MaxIter };
    let mut iterations = 0;
    let mut rising = 0;
    while stop != StopReason::Converged && iterations < max_iter {
        iterations += 1;
        cur = first_approximation(ctx, &gram, &cur.multipliers.nu)?;
        rep = ctx.kkt(&cur.eta, &cur.multipliers, tol_kkt);
        let prev = *history.last().expect("nonempty");
        history.push(rep.max_residual);
        rising = if rep.max_residual > prev { rising + 1 } else { 0 };
        if rep.max_residual < best.1.max_residual {
            best = (cur.clone(), rep.clone());
        }
        if rep.converged {
            stop = StopReason::Converged;
        } else if !rep.max_residual.is_finite() {
            stop = StopReason::Diverged;
            break;
        } else if rising >= NONMONOTONE_RUN {
            stop = StopReason::NonMonotone;
            break;
        }
    }
    let monotone = history.windows(2).all(|w| w[1] <= w[0]);
    let (best, kkt) = best;
    Ok(IterateOutcome {
        eta: best.eta,
        multipliers: best.multipliers,
        kkt,
        history,
        iterations,
        stop,
        monotone,
        near_singular_l: gram.near_singular,
        deterministic_infeasible: det_infeasible,
    })
}

/// `η = C⁻¹(μm + Σλ_t l_t + ν)`.
pub fn assemble_solution(ctx: &Context, mult: &MultiplierSet) -> Result<Portfolio> {
    ctx.tree.check_portfolio(&mult.nu)?;
    if mult.lambda.len() != ctx.tree.horizon() {
        return Err(Error::Shape(format!(
            "expected {} profitability multipliers, got {}",
            ctx.tree.horizon(),
            mult.lambda.len()
        )));
    }
    ctx.inv.solve(&ctx.combine(&mult.levels(), &mult.nu))
}

/// Checks stationarity, complementarity, feasibility and multiplier signs.
/// The max-mean form is checked as min-variance with floor `config.e`.
pub fn kkt_verify(
    tree: &ScenarioTree,
    book: &ContractBook,
    config: &ConstraintConfig,
    eta: &Portfolio,
    mult: &MultiplierSet,
    form: Form,
    tol: f64,
) -> Result<KktReport> {
    tree.check_portfolio(eta)?;
    tree.check_portfolio(&mult.nu)?;
    config.validate(tree.horizon())?;
    if mult.lambda.len() != tree.horizon() {
        return Err(Error::Shape("profitability multiplier count".into()));
    }
    let reps = representers(tree, book, config);
    Ok(kkt_with(tree, book, config, &reps, form, eta, mult, tol))
}

#[allow(clippy::too_many_arguments)]
fn kkt_with(
    tree: &ScenarioTree,
    book: &ContractBook,
    config: &ConstraintConfig,
    reps: &Representers,
    form: Form,
    eta: &Portfolio,
    mult: &MultiplierSet,
    tol: f64,
) -> KktReport {
    let c_eta = apply(form.kind(), tree, book, eta);
    let levels = mult.levels();
    let mut rhs = mult.nu.clone();
    for (l, x) in reps.functionals().into_iter().zip(&levels) {
        rhs.axpy(*x, l);
    }
    let mut r = c_eta.clone();
    r.axpy(-1.0, &rhs);
    let stationarity = tree.norm(&r) / (1.0 + tree.norm(&c_eta) + tree.norm(&rhs));

    let e = config.levels();
    let h = tree.horizon();
    let mut slacks: Vec<f64> = reps.l.iter().zip(&e).map(|(l, et)| tree.inner_unchecked(l, eta) - et).collect();
    slacks.push(mean_functional(tree, book, eta) - config.e);
    let complementarity: Vec<f64> = levels.iter().zip(&slacks).map(|(x, s)| (x * s).abs()).collect();

    let mean_free = form == Form::FixedMean;
    let mut primal = slacks[..h].iter().fold(0.0f64, |m, s| m.max(-s));
    primal = primal.max(if mean_free { slacks[h].abs() } else { -slacks[h] });
    primal = primal.max(-eta.min_component());
    let mut dual = mult.lambda.iter().fold(0.0f64, |m, x| m.max(-x));
    if !mean_free {
        dual = dual.max(-mult.mu);
    }
    dual = dual.max(-mult.nu.min_component());

    let bound_complementarity = eta
        .stages()
        .iter()
        .zip(mult.nu.stages())
        .flat_map(|(a, b)| a.values().iter().zip(b.values()).map(|(x, y)| (x * y).abs()))
        .fold(0.0, f64::max);

    // f64::max drops NaN; a non-finite part must poison the total
    let max_residual = complementarity
        .iter()
        .copied()
        .chain([stationarity, bound_complementarity, primal, dual])
        .chain(eta.stages().iter().chain(mult.nu.stages()).flat_map(|a| a.values().iter().map(|v| 0.0 * v)))
        .chain(levels.iter().map(|v| 0.0 * v))
        .fold(0.0, |m: f64, x| if m.is_nan() || x.is_nan() { f64::INFINITY } else { m.max(x) });
    let finite = max_residual.is_finite();
    KktReport {
        stationarity,
        complementarity,
        bound_complementarity,
        slacks,
        primal_infeasibility: primal,
        dual_infeasibility: dual,
        max_residual,
        tol,
        converged: finite && max_residual <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::oracle;
    use approx::assert_abs_diff_eq;

    fn ctx(m: &crate::Model, form: Form) -> Context<'_> {
        Context::new(&m.tree, &m.book, &m.config, form).unwrap()
    }

    #[test]
    fn trivial_kkt() {
        let mut m = fixtures::coin2();
        m.config.e = 0.0;
        let z = Portfolio::zeros(&m.tree);
        let rep = kkt_verify(&m.tree, &m.book, &m.config, &z, &MultiplierSet::zeros(&m.tree), Form::MinVariance, TOL_KKT).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn coin2_gram_matches_dense_inverse() {
        let m = fixtures::coin2();
        let c = ctx(&m, Form::MinVariance);
        let gram = l_gram(&c).unwrap();
        // l_0 vanishes (no interim utilities), l_1 coincides with m
        assert_eq!(gram.active, vec![false, true, true]);
        assert!(gram.near_singular);
        let g = operators::dense_matrix(OperatorKind::B, &m.tree, &m.book, DENSE_CAP).unwrap();
        let q = operators::to_weighted(&m.tree, &c.reps.m);
        let ginv_q = g.clone().lu().solve(&DVector::from_vec(q.clone())).unwrap();
        let expected = linalg::dot(&q, ginv_q.as_slice());
        for (t, s) in [(1, 1), (1, 2), (2, 2)] {
            assert_abs_diff_eq!(gram.l_inv[(t, s)], expected, epsilon = 1e-12);
        }
        assert_eq!(gram.r(&m.tree, &Portfolio::zeros(&m.tree)), vec![0.0; 3]);
    }

    #[test]
    fn primal_and_dual_routes_agree() {
        let m = fixtures::coin2();
        let c = ctx(&m, Form::MinVariance);
        let gram = l_gram(&c).unwrap();
        let nu = Portfolio::from_flat(&m.tree, &[0.2, 0.0, 0.7]).unwrap();
        let r = gram.r(&m.tree, &nu);
        let e = m.config.levels();
        let (lam, _) = gram.solve_levels(&e, &r, false).unwrap();
        // λ = F⁻_L(L(r − e)) with L the inverse of the reduced matrix
        let (idx, mi) = gram.reduced();
        let l = mi.clone().try_inverse().unwrap();
        let x: Vec<f64> = idx.iter().map(|t| r[*t] - e[*t]).collect();
        let lx = linalg::mat_vec(&l, &x);
        let dual = nonneg_qp(&l, &lx).unwrap();
        for (i, t) in idx.iter().enumerate() {
            assert_abs_diff_eq!(lam[*t], dual.minus[i], epsilon = 1e-6 * (1.0 + lam[*t].abs()));
        }
    }

    #[test]
    fn deterministic_trivial_and_single_constraint() {
        let mut m = fixtures::coin2();
        m.config.e = 0.0;
        let d = deterministic_solution(&ctx(&m, Form::MinVariance)).unwrap();
        assert_eq!(d.eta.max_abs(), 0.0);
        assert_eq!(d.multipliers.levels(), vec![0.0; 3]);

        // only the mean constraint matters: x = μ G⁻¹ m^D with G = I, m^D = (2, 1)
        m.config.e = 3.0;
        let d = deterministic_solution(&ctx(&m, Form::MinVariance)).unwrap();
        assert_abs_diff_eq!(d.levels[0][0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(d.levels[1][0], 0.6, epsilon = 1e-12);
        let lm = d.multipliers.lambda[1] + d.multipliers.mu;
        assert_abs_diff_eq!(lm, 0.6, epsilon = 1e-12);
        assert_eq!(d.multipliers.nu.max_abs(), 0.0);
    }

    #[test]
    fn theta_trivial() {
        let m = fixtures::coin2();
        let c = ctx(&m, Form::MinVariance);
        let z = Portfolio::zeros(&m.tree);
        let (p, n) = theta_all(&c, &[0.0; 3], &z).unwrap();
        assert_eq!(p.max_abs(), 0.0);
        assert_eq!(n.max_abs(), 0.0);
        assert!(theta(&c, 2, Sign::Plus, &[0.0; 3], &z).is_err());
    }

    #[test]
    fn theta_fixed_point_at_optimum() {
        let m = fixtures::coin2();
        let c = ctx(&m, Form::MinVariance);
        let cert = oracle::solve(&m.tree, &m.book, &m.config, Form::MinVariance).unwrap();
        let (p, n) = theta_all(&c, &cert.multipliers.levels(), &cert.eta).unwrap();
        let mut d = p.clone();
        d.axpy(-1.0, &cert.eta);
        assert!(d.max_abs() <= 1e-10, "{:?}", d);
        let mut d = n.clone();
        d.axpy(-1.0, &cert.multipliers.nu);
        assert!(d.max_abs() <= 1e-10);
    }

    #[test]
    fn assemble_examples() {
        let m = fixtures::coin2();
        let c = ctx(&m, Form::MinVariance);
        let zero = MultiplierSet::zeros(&m.tree);
        assert_eq!(assemble_solution(&c, &zero).unwrap().max_abs(), 0.0);

        let mut one = zero.clone();
        one.mu = 1.0;
        let eta = assemble_solution(&c, &one).unwrap();
        let reference = oracle::dense_solve_linear(OperatorKind::B, &m.tree, &m.book, &c.reps.m, 0.0, DENSE_CAP).unwrap();
        let mut d = eta.clone();
        d.axpy(-1.0, &reference);
        assert!(d.max_abs() <= 1e-10);

        let mut two = one.clone();
        two.lambda[1] = 0.3;
        two.nu.stage_mut(1).values_mut()[0] = 0.25;
        let a = assemble_solution(&c, &two).unwrap();
        let b = assemble_solution(&c, &two.scaled(2.0)).unwrap();
        let mut d = a.scaled(2.0);
        d.axpy(-1.0, &b);
        assert!(d.max_abs() <= 1e-12);
    }

    #[test]
    fn kkt_detects_perturbation() {
        let m = fixtures::coin2();
        let cert = oracle::solve(&m.tree, &m.book, &m.config, Form::MinVariance).unwrap();
        let rep = kkt_verify(&m.tree, &m.book, &m.config, &cert.eta, &cert.multipliers, Form::MinVariance, TOL_KKT).unwrap();
        assert!(rep.converged, "{:?}", rep);
        let mut eta = cert.eta.clone();
        eta.stage_mut(0).values_mut()[0] += 1e-3;
        let rep = kkt_verify(&m.tree, &m.book, &m.config, &eta, &cert.multipliers, Form::MinVariance, TOL_KKT).unwrap();
        assert!(rep.stationarity >= 1e-4, "{}", rep.stationarity);
        assert!(!rep.converged);
    }

    #[test]
    fn first_approximation_trivial() {
        let mut m = fixtures::coin2();
        m.config.e = 0.0;
        let c = ctx(&m, Form::MinVariance);
        let gram = l_gram(&c).unwrap();
        let a = first_approximation(&c, &gram, &Portfolio::zeros(&m.tree)).unwrap();
        assert_eq!(a.eta.max_abs(), 0.0);
        assert_eq!(a.multipliers.levels(), vec![0.0; 3]);
    }

    #[test]
    fn iterate_coin2() {
        let m = fixtures::coin2();
        let c = ctx(&m, Form::MinVariance);
        let out = iterate(&c, 0, TOL_KKT).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.history.len(), 1);
        assert!(out.eta.min_component() >= 0.0);

        let out = iterate(&c, 200, TOL_KKT).unwrap();
        assert_eq!(out.kkt.converged, out.stop == StopReason::Converged);
        if !out.monotone {
            let rises = out.history.windows(2).filter(|w| w[1] > w[0]).count();
            assert!(rises > 0);
        }
        if out.kkt.converged {
            let cert = oracle::solve(&m.tree, &m.book, &m.config, Form::MinVariance).unwrap();
            let mut d = out.eta.clone();
            d.axpy(-1.0, &cert.eta);
            assert!(m.tree.norm(&d) <= 1e-6);
        }
    }

    #[test]
    fn iterate_already_converged() {
        let mut m = fixtures::coin2();
        m.config.e = 0.0;
        let out = iterate(&ctx(&m, Form::MinVariance), 10, TOL_KKT).unwrap();
        assert_eq!(out.stop, StopReason::Converged);
        assert_eq!(out.iterations, 0);
    }
}
