//! Structured solve of `(C − λ)η = ξ` by block elimination over issue times.
//!
//! Eliminating the stages `t_bar, t_bar-1, …, 1` in turn leaves a lower
//! block-triangular system. Under the independence hypotheses every
//! intermediate block is described by three scalars `d_n, f_n, g_n` and the
//! `N × N` matrices `D_n(k)`: off-diagonal blocks are `f_n C(k, l)`, diagonal
//! blocks act as `x ↦ D_n(k) x` (kind `A`) or
//! `x ↦ D_n(k) x − (1 − g_n) m_k m_kᵀ E(x)` (kind `B`). Only `N × N` linear
//! algebra and conditional expectations on the tree are needed.
//!
//! On instances violating the hypotheses the elimination is not exact; the
//! residual check in [`Solver::solve`] catches that.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contracts::{ContractBook, MomentTables};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{self, mat_vec, outer, pivot_inverse};
use crate::operators::{apply, block_apply_unchecked, OperatorKind};
use crate::tree::{Adapted, Portfolio, ScenarioTree};

/// Relative residual accepted from a structured solve.
pub const RESIDUAL_LIMIT: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct EliminationCoefficients {
    pub lambda: f64,
    pub d: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `big_d[n][k] = D_n(k)` for `k ≤ n`.
    pub big_d: Vec<Vec<DMatrix<f64>>>,
    inv_a: Vec<DMatrix<f64>>,
}

impl EliminationCoefficients {
    /// Mean-part pivot of kind `B` at level `n`, node depth `k ≤ n`:
    /// `D_n(k) − (1 − g_n) m_k m_kᵀ`.
    pub fn mean_pivot(&self, moments: &MomentTables, n: usize, k: usize) -> DMatrix<f64> {
        let m = &moments.mean[k];
        &self.big_d[n][k] - outer(m, m) * (1.0 - self.g[n])
    }
}

/// Runs the coefficient recursion from `t_bar` down to 0 at shift `λ`.
pub fn elimination_coefficients(moments: &MomentTables, lambda: f64) -> Result<EliminationCoefficients> {
    let tb = moments.t_bar();
    let n_c = moments.n();
    let shift = DMatrix::identity(n_c, n_c) * lambda;
    let mut d = vec![0.0; tb + 1];
    let mut f = vec![0.0; tb + 1];
    let mut g = vec![0.0; tb + 1];
    let mut big_d: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); tb + 1];
    let mut inv_a = vec![DMatrix::zeros(0, 0); tb + 1];

    f[tb] = 1.0;
    g[tb] = 0.0;
    big_d[tb] = (0..=tb).map(|k| &moments.m_a[k] - &shift).collect();
    for n in (0..=tb).rev() {
        let inv = pivot_inverse(&big_d[n][n], n)?;
        let m = &moments.mean[n];
        d[n] = linalg::dot(m, &mat_vec(&inv, m));
        inv_a[n] = inv;
        if n > 0 {
            let w = d[n] * f[n] * f[n];
            f[n - 1] = f[n] * (1.0 - d[n] * f[n]);
            g[n - 1] = g[n] + w;
            big_d[n - 1] = (0..n).map(|k| &big_d[n][k] - &moments.n_a[n][k] * w).collect();
        }
    }
    Ok(EliminationCoefficients {
        lambda,
        d,
        f,
        g,
        big_d,
        inv_a,
    })
}

/// Level pivots `D_n(n)` and, for kind `B`, the mean pivot, evaluated at `λ`.
/// `None` when a higher level is singular at `λ` (a pole of the recursion).
fn level_pivots(moments: &MomentTables, lambda: f64, level: usize) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let tb = moments.t_bar();
    let n_c = moments.n();
    let shift = DMatrix::identity(n_c, n_c) * lambda;
    let mut dk: Vec<DMatrix<f64>> = (0..=tb).map(|k| &moments.m_a[k] - &shift).collect();
    let (mut f, mut g) = (1.0, 0.0);
    for n in (level + 1..=tb).rev() {
        let inv = dk[n].clone().try_inverse()?;
        let m = &moments.mean[n];
        let d = linalg::dot(m, &mat_vec(&inv, m));
        let w = d * f * f;
        f *= 1.0 - d * f;
        g += w;
        for k in 0..n {
            dk[k] = &dk[k] - &moments.n_a[n][k] * w;
        }
    }
    let m = &moments.mean[level];
    let pb = &dk[level] - outer(m, m) * (1.0 - g);
    Some((dk.swap_remove(level), pb))
}

/// Shifts at which some level pivot is singular, evaluated self-consistently
/// (the recursion is run at the candidate shift itself).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SpectralSets {
    /// Union over levels of the `A`-pivot members; sorted.
    pub sigma_a: Vec<f64>,
    /// `sigma_a` together with the mean-pivot members; sorted.
    pub sigma_b: Vec<f64>,
    /// Members contributed by the `A` pivot at each level `n`.
    pub levels_a: Vec<Vec<f64>>,
    /// Members contributed by the mean pivot at each level `n`.
    pub levels_b: Vec<Vec<f64>>,
    /// Scanned interval `[-radius, radius]`.
    pub radius: f64,
}

impl SpectralSets {
    /// `σ_n` for a kind: members from levels `n..=t_bar`.
    pub fn level_set(&self, kind: OperatorKind, n: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self.levels_a[n..].iter().flatten().copied().collect();
        if kind == OperatorKind::B {
            out.extend(self.levels_b[n..].iter().flatten());
        }
        sort_dedup(out)
    }

    pub fn set(&self, kind: OperatorKind) -> &[f64] {
        match kind {
            OperatorKind::A => &self.sigma_a,
            OperatorKind::B => &self.sigma_b,
        }
    }

    /// Distance from `x` to the nearest member of the set for `kind`.
    pub fn distance(&self, kind: OperatorKind, x: f64) -> f64 {
        self.set(kind).iter().fold(f64::INFINITY, |m, s| m.min((s - x).abs()))
    }
}

fn sort_dedup(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    v
}

const GRID: usize = 64;

pub fn spectral_sets(moments: &MomentTables) -> SpectralSets {
    spectral_sets_with(moments, Exec::default())
}

pub fn spectral_sets_with(moments: &MomentTables, exec: Exec) -> SpectralSets {
    let tb = moments.t_bar();
    let radius = (tb + 1) as f64 * moments.m_a.iter().map(|m| m.trace()).fold(0.0, f64::max) + 1.0;
    let mut levels_a = vec![Vec::new(); tb + 1];
    let mut levels_b = vec![Vec::new(); tb + 1];
    let mut poles: Vec<f64> = Vec::new();
    for level in (0..=tb).rev() {
        let mut cuts = vec![-radius];
        cuts.extend(poles.iter().copied().filter(|p| p.abs() < radius));
        cuts.push(radius);
        let mut found_a = Vec::new();
        let mut found_b = Vec::new();
        for w in cuts.windows(2) {
            let gap = 1e-9 * (1.0 + w[0].abs().max(w[1].abs()));
            let (lo, hi) = (w[0] + gap, w[1] - gap);
            if hi <= lo {
                continue;
            }
            for (which, out) in [(0usize, &mut found_a), (1, &mut found_b)] {
                let count = |x: f64| level_pivots(moments, x, level).map(|p| linalg::negative_count(if which == 0 { &p.0 } else { &p.1 }));
                let xs: Vec<f64> = (0..=GRID).map(|i| lo + (hi - lo) * i as f64 / GRID as f64).collect();
                let cs: Vec<Option<usize>> = exec.map_range(xs.len(), |i| count(xs[i]));
                for i in 0..GRID {
                    if let (Some(a), Some(b)) = (cs[i], cs[i + 1]) {
                        bisect_changes(&count, xs[i], xs[i + 1], a, b, out);
                    }
                }
            }
        }
        levels_a[level] = sort_dedup(found_a);
        levels_b[level] = sort_dedup(found_b);
        poles.extend(levels_a[level].iter().copied());
        poles = sort_dedup(poles);
    }
    let sigma_a = sort_dedup(levels_a.iter().flatten().copied().collect());
    let sigma_b = sort_dedup(levels_a.iter().chain(&levels_b).flatten().copied().collect());
    SpectralSets {
        sigma_a,
        sigma_b,
        levels_a,
        levels_b,
        radius,
    }
}

fn bisect_changes(
    count: &dyn Fn(f64) -> Option<usize>,
    a: f64,
    b: f64,
    ca: usize,
    cb: usize,
    out: &mut Vec<f64>,
) {
    if ca == cb {
        return;
    }
    let mid = 0.5 * (a + b);
    if b - a <= 1e-13 * (1.0 + a.abs().max(b.abs())) || mid <= a || mid >= b {
        out.push(mid);
        return;
    }
    match count(mid) {
        Some(cm) => {
            bisect_changes(count, a, mid, ca, cm, out);
            bisect_changes(count, mid, b, cm, cb, out);
        }
        None => out.push(mid),
    }
}

/// `(C^n(k, k))^{-1} x` for `x` at depth `k ≤ n`.
pub fn diag_block_inverse(
    kind: OperatorKind,
    tree: &ScenarioTree,
    coeffs: &EliminationCoefficients,
    moments: &MomentTables,
    n: usize,
    k: usize,
    x: &Adapted,
) -> Result<Adapted> {
    if k > n || n >= coeffs.big_d.len() {
        return Err(Error::OutOfRange(format!("pivot ({}, {})", n, k)));
    }
    if x.depth() != k || x.n_nodes() != tree.layer_len(k) || x.width() != moments.n() {
        return Err(Error::Shape(format!("pivot argument must live on depth {}", k)));
    }
    let inv = if k == n {
        coeffs.inv_a[n].clone()
    } else {
        pivot_inverse(&coeffs.big_d[n][k], n)?
    };
    let mean_inv = match kind {
        OperatorKind::A => None,
        OperatorKind::B => Some(pivot_inverse(&coeffs.mean_pivot(moments, n, k), n)?),
    };
    Ok(apply_pivot_inverse(&inv, mean_inv.as_ref(), x, tree.layer_probs(k)))
}

/// Applies `D⁻¹` nodewise, replacing the mean by `P⁻¹ E(x)` when `mean_inv` is given.
fn apply_pivot_inverse(inv: &DMatrix<f64>, mean_inv: Option<&DMatrix<f64>>, x: &Adapted, probs: &[f64]) -> Adapted {
    let w = x.width();
    let mut out = x.clone();
    for pos in 0..x.n_nodes() {
        let y = mat_vec(inv, x.at(pos));
        out.at_mut(pos).copy_from_slice(&y);
    }
    if let Some(pinv) = mean_inv {
        let p = probs;
        let mut ex = vec![0.0; w];
        for (pos, pr) in p.iter().enumerate() {
            for (e, v) in ex.iter_mut().zip(x.at(pos)) {
                *e += pr * v;
            }
        }
        // y = D⁻¹(x − Ex) + P⁻¹ Ex
        let shift: Vec<f64> = mat_vec(pinv, &ex)
            .iter()
            .zip(mat_vec(inv, &ex))
            .map(|(a, b)| a - b)
            .collect();
        for pos in 0..x.n_nodes() {
            out.at_mut(pos).iter_mut().zip(&shift).for_each(|(o, s)| *o += s);
        }
    }
    out
}

/// A prepared structured solver for one kind and one shift.
#[derive(Clone, Debug)]
pub struct Solver<'a> {
    pub kind: OperatorKind,
    tree: &'a ScenarioTree,
    book: &'a ContractBook,
    moments: MomentTables,
    coeffs: EliminationCoefficients,
    mean_inv: Vec<Option<DMatrix<f64>>>,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub eta: Portfolio,
    /// `‖(C − λ)η − ξ‖_H / ‖ξ‖_H` (absolute when `ξ = 0`).
    pub residual: f64,
}

impl<'a> Solver<'a> {
    pub fn new(kind: OperatorKind, tree: &'a ScenarioTree, book: &'a ContractBook, lambda: f64) -> Result<Self> {
        book.check_shape(tree)?;
        let moments = MomentTables::new(tree, book);
        Self::with_moments(kind, tree, book, moments, lambda)
    }

    pub fn with_moments(
        kind: OperatorKind,
        tree: &'a ScenarioTree,
        book: &'a ContractBook,
        moments: MomentTables,
        lambda: f64,
    ) -> Result<Self> {
        let coeffs = elimination_coefficients(&moments, lambda)?;
        let mean_inv = (0..=tree.t_bar())
            .map(|n| match kind {
                OperatorKind::A => Ok(None),
                OperatorKind::B => pivot_inverse(&coeffs.mean_pivot(&moments, n, n), n).map(Some),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            tree,
            book,
            moments,
            coeffs,
            mean_inv,
        })
    }

    pub fn coefficients(&self) -> &EliminationCoefficients {
        &self.coeffs
    }

    pub fn moments(&self) -> &MomentTables {
        &self.moments
    }

    pub fn lambda(&self) -> f64 {
        self.coeffs.lambda
    }

    /// `(C^n(n, n))^{-1} x` for `x` at depth `n`.
    pub fn pivot_solve(&self, n: usize, x: &Adapted) -> Adapted {
        apply_pivot_inverse(&self.coeffs.inv_a[n], self.mean_inv[n].as_ref(), x, self.tree.layer_probs(n))
    }

    /// `(C^n(k, k))^{-1} x` for `x` at depth `k ≤ n`.
    pub fn diag_block_inverse(&self, n: usize, k: usize, x: &Adapted) -> Result<Adapted> {
        diag_block_inverse(self.kind, self.tree, &self.coeffs, &self.moments, n, k, x)
    }

    /// `C^n(k, k) x` for `x` at depth `k ≤ n`.
    pub fn diag_block_apply(&self, n: usize, k: usize, x: &Adapted) -> Adapted {
        let dm = &self.coeffs.big_d[n][k];
        let mut out = x.clone();
        for pos in 0..x.n_nodes() {
            out.at_mut(pos).copy_from_slice(&mat_vec(dm, x.at(pos)));
        }
        if self.kind == OperatorKind::B {
            let ex = self.tree.expect_unchecked(x);
            let m = &self.moments.mean[k];
            let s = (1.0 - self.coeffs.g[n]) * linalg::dot(m, &ex);
            for pos in 0..x.n_nodes() {
                out.at_mut(pos).iter_mut().zip(m).for_each(|(o, mi)| *o -= s * mi);
            }
        }
        out
    }

    /// Returns `ξ⁰`, whose stage `k` is the right-hand side of row `k` after
    /// all stages above `k` have been eliminated.
    pub fn forward_eliminate(&self, xi: &Portfolio) -> Result<Portfolio> {
        self.tree.check_portfolio(xi)?;
        let mut cur = xi.clone();
        for n in (1..=self.tree.t_bar()).rev() {
            let y = self.pivot_solve(n, cur.stage(n));
            let f = self.coeffs.f[n];
            for k in 0..n {
                let c = block_apply_unchecked(self.kind, self.tree, self.book, k, n, &y);
                cur.stage_mut(k).axpy(-f, &c);
            }
        }
        Ok(cur)
    }

    pub fn back_substitute(&self, xi0: &Portfolio) -> Result<Portfolio> {
        self.tree.check_portfolio(xi0)?;
        let mut eta = Portfolio::zeros(self.tree);
        for k in 0..=self.tree.t_bar() {
            let mut rhs = xi0.stage(k).clone();
            let f = self.coeffs.f[k];
            for l in 0..k {
                let c = block_apply_unchecked(self.kind, self.tree, self.book, k, l, eta.stage(l));
                rhs.axpy(-f, &c);
            }
            *eta.stage_mut(k) = self.pivot_solve(k, &rhs);
        }
        Ok(eta)
    }

    /// Elimination plus back-substitution, without the residual check.
    pub fn solve_unchecked(&self, xi: &Portfolio) -> Result<SolveOutcome> {
        let eta = self.back_substitute(&self.forward_eliminate(xi)?)?;
        let residual = self.residual(&eta, xi);
        Ok(SolveOutcome { eta, residual })
    }

    /// Solves `(C − λ)η = ξ`; fails with [`Error::ResidualTooLarge`] if the
    /// structure assumptions do not hold well enough on this instance.
    pub fn solve(&self, xi: &Portfolio) -> Result<SolveOutcome> {
        let out = self.solve_unchecked(xi)?;
        if !(out.residual <= RESIDUAL_LIMIT) {
            return Err(Error::ResidualTooLarge {
                residual: out.residual,
                limit: RESIDUAL_LIMIT,
            });
        }
        Ok(out)
    }

    pub fn residual(&self, eta: &Portfolio, xi: &Portfolio) -> f64 {
        let mut r = apply(self.kind, self.tree, self.book, eta);
        r.axpy(-self.coeffs.lambda, eta);
        r.axpy(-1.0, xi);
        let nx = self.tree.norm(xi);
        let nr = self.tree.norm(&r);
        if nx > 0.0 {
            nr / nx
        } else {
            nr
        }
    }
}

/// One-shot `(C − λ)η = ξ`.
pub fn solve(
    kind: OperatorKind,
    tree: &ScenarioTree,
    book: &ContractBook,
    xi: &Portfolio,
    lambda: f64,
) -> Result<SolveOutcome> {
    Solver::new(kind, tree, book, lambda)?.solve(xi)
}

/// Convenience for tests and benches: `DVector` view of a portfolio's flat coordinates.
pub fn flat_vector(p: &Portfolio) -> DVector<f64> {
    DVector::from_vec(p.to_flat())
}
