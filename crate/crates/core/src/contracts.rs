//! Unit-contract utilities, hypothesis checks and moment tables.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tree::{Adapted, ScenarioTree};

/// Absolute tolerance on moment identities.
pub const TOL_MOM: f64 = 1e-8;
/// Positive-definiteness threshold, relative to `trace(M_b[k])`.
pub const TOL_PD_REL: f64 = 1e-9;

/// `u_i(k, t)` for every issue time `k ≤ t_bar` and every depth `t ≤ horizon`.
///
/// Entries with `t ≤ k` are identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractBook {
    n: usize,
    t_bar: usize,
    horizon: usize,
    u: Vec<Vec<Adapted>>,
}

impl ContractBook {
    pub fn zeros(tree: &ScenarioTree) -> Self {
        let n = tree.n_contracts();
        let u = (0..=tree.t_bar())
            .map(|_| (0..=tree.horizon()).map(|t| Adapted::zeros(tree, t, n)).collect())
            .collect();
        Self {
            n,
            t_bar: tree.t_bar(),
            horizon: tree.horizon(),
            u,
        }
    }

    /// Builds a book from `f(k, t, pos, i)`; only called for `t > k`.
    pub fn from_fn(tree: &ScenarioTree, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut book = Self::zeros(tree);
        for k in 0..=book.t_bar {
            for t in k + 1..=book.horizon {
                book.u[k][t] = Adapted::from_fn(tree, t, book.n, |pos, i| f(k, t, pos, i));
            }
        }
        book
    }

    /// Sets `u_i(k, depth(node))` at `node`.
    pub fn set(&mut self, tree: &ScenarioTree, k: usize, i: usize, node: i64, value: f64) -> Result<()> {
        if k > self.t_bar {
            return Err(Error::OutOfRange(format!("issue time {} > {}", k, self.t_bar)));
        }
        if i >= self.n {
            return Err(Error::OutOfRange(format!("contract {} >= {}", i, self.n)));
        }
        if !value.is_finite() {
            return Err(Error::Input(format!("non-finite utility at node {}", node)));
        }
        let (t, pos) = tree.locate(node)?;
        if t <= k {
            if value != 0.0 {
                return Err(Error::Input(format!(
                    "utility of a contract issued at {} must vanish at depth {} (node {})",
                    k, t, node
                )));
            }
            return Ok(());
        }
        self.u[k][t].at_mut(pos)[i] = value;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_bar(&self) -> usize {
        self.t_bar
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `u(k, t)` as an `R^N`-valued variable at depth `t`.
    pub fn utility(&self, k: usize, t: usize) -> &Adapted {
        &self.u[k][t]
    }

    pub fn utility_mut(&mut self, k: usize, t: usize) -> &mut Adapted {
        &mut self.u[k][t]
    }

    /// `u^∞(k) = u(k, horizon)`.
    pub fn final_utility(&self, k: usize) -> Result<&Adapted> {
        if k > self.t_bar {
            return Err(Error::OutOfRange(format!("issue time {} > {}", k, self.t_bar)));
        }
        Ok(&self.u[k][self.horizon])
    }

    pub(crate) fn fin(&self, k: usize) -> &Adapted {
        &self.u[k][self.horizon]
    }

    pub fn check_shape(&self, tree: &ScenarioTree) -> Result<()> {
        if self.n != tree.n_contracts() || self.t_bar != tree.t_bar() || self.horizon != tree.horizon() {
            return Err(Error::Shape("contract book does not match tree dimensions".into()));
        }
        Ok(())
    }
}

/// Second moments and means of the final utilities.
#[derive(Clone, Debug)]
pub struct MomentTables {
    pub m_a: Vec<DMatrix<f64>>,
    pub m_b: Vec<DMatrix<f64>>,
    pub mean: Vec<Vec<f64>>,
    /// `n_a[n][k]` for `k < n`; empty below that.
    pub n_a: Vec<Vec<DMatrix<f64>>>,
    pub n_b: Vec<Vec<DMatrix<f64>>>,
}

/// `E(x xᵀ)` for a vector variable.
fn second_moment(tree: &ScenarioTree, x: &Adapted) -> DMatrix<f64> {
    let w = x.width();
    let mut m = DMatrix::zeros(w, w);
    for (pos, p) in tree.layer_probs(x.depth()).iter().enumerate() {
        let v = x.at(pos);
        for i in 0..w {
            for j in 0..w {
                m[(i, j)] += p * v[i] * v[j];
            }
        }
    }
    linalg::symmetrize(&mut m);
    m
}

impl MomentTables {
    pub fn new(tree: &ScenarioTree, book: &ContractBook) -> Self {
        let tb = book.t_bar;
        let mut m_a = Vec::with_capacity(tb + 1);
        let mut m_b = Vec::with_capacity(tb + 1);
        let mut mean = Vec::with_capacity(tb + 1);
        for k in 0..=tb {
            let u = book.fin(k);
            let ma = second_moment(tree, u);
            let mu = tree.expect_unchecked(u);
            m_b.push(&ma - linalg::outer(&mu, &mu));
            m_a.push(ma);
            mean.push(mu);
        }
        let mut n_a = vec![Vec::new(); tb + 1];
        let mut n_b = vec![Vec::new(); tb + 1];
        for n in 1..=tb {
            for k in 0..n {
                let c = tree.condition_unchecked(book.fin(k), n);
                let na = second_moment(tree, &c);
                n_b[n].push(&na - linalg::outer(&mean[k], &mean[k]));
                n_a[n].push(na);
            }
        }
        Self {
            m_a,
            m_b,
            mean,
            n_a,
            n_b,
        }
    }

    pub fn t_bar(&self) -> usize {
        self.m_a.len() - 1
    }

    pub fn n(&self) -> usize {
        self.mean[0].len()
    }
}

/// Outcome of one hypothesis check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CheckResult {
    pub ok: bool,
    /// Largest deviation found (for the positivity check: the smallest eigenvalue).
    pub worst: f64,
    pub location: Option<String>,
}

impl CheckResult {
    fn pass() -> Self {
        Self {
            ok: true,
            worst: 0.0,
            location: None,
        }
    }

    fn absorb(&mut self, dev: f64, tol: f64, loc: impl FnOnce() -> String) {
        if dev > self.worst || dev.is_nan() {
            self.worst = dev;
            self.location = Some(loc());
        }
        if !(dev <= tol) {
            self.ok = false;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct HypothesisReport {
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub h3_ok: bool,
    /// Per issue time.
    pub h1: Vec<CheckResult>,
    /// Per issue time.
    pub h2: Vec<CheckResult>,
    pub h3: CheckResult,
}

impl HypothesisReport {
    pub fn all_ok(&self) -> bool {
        self.h1_ok && self.h2_ok && self.h3_ok
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, ok, detail) in [
            ("H1", self.h1_ok, self.h1.iter().find(|c| !c.ok)),
            ("H2", self.h2_ok, self.h2.iter().find(|c| !c.ok)),
            ("H3", self.h3_ok, Some(&self.h3).filter(|c| !c.ok)),
        ] {
            if !ok {
                let d = detail.map(|c| format!(" (worst {:.3e} at {})", c.worst, c.location.as_deref().unwrap_or("?")));
                out.push(format!("{} violated{}", name, d.unwrap_or_default()));
            }
        }
        out
    }
}

/// Products `x_i y_j` as a width-`N²` variable on the layer both live on.
fn products(x: &Adapted, y: &Adapted) -> Vec<f64> {
    let (wx, wy) = (x.width(), y.width());
    let mut out = Vec::with_capacity(x.n_nodes() * wx * wy);
    for pos in 0..x.n_nodes() {
        let (a, b) = (x.at(pos), y.at(pos));
        for ai in a {
            for bj in b {
                out.push(ai * bj);
            }
        }
    }
    out
}

/// Conditional first and second moments of `u^∞(k)` must not depend on the depth-`k` node.
pub fn check_h1(tree: &ScenarioTree, book: &ContractBook, tol_mom: f64) -> Vec<CheckResult> {
    let h = tree.horizon();
    (0..=book.t_bar)
        .map(|k| {
            let mut res = CheckResult::pass();
            let u = book.fin(k);
            let mean = tree.expect_unchecked(u);
            let cm = tree.condition_unchecked(u, k);
            let sq = Adapted::from_values(tree, h, u.width() * u.width(), products(u, u)).expect("shape");
            let msq = tree.expect_unchecked(&sq);
            let csq = tree.condition_unchecked(&sq, k);
            let ids = tree.layer_ids(k);
            for pos in 0..tree.layer_len(k) {
                let d1 = cm.at(pos).iter().zip(&mean).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                let d2 = csq.at(pos).iter().zip(&msq).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                res.absorb(d1.max(d2), tol_mom, || format!("k={} node={}", k, ids[pos]));
            }
            res
        })
        .collect()
}

/// Covariance of every `u^∞(k)` must be positive definite.
pub fn check_h2(tree: &ScenarioTree, book: &ContractBook, tol_pd_rel: f64) -> Vec<CheckResult> {
    let mom = MomentTables::new(tree, book);
    mom.m_b
        .iter()
        .enumerate()
        .map(|(k, mb)| {
            let min_eig = linalg::min_eigenvalue(mb);
            // absolute floor so that an all-zero covariance never passes
            let thr = (tol_pd_rel * mb.trace()).max(1e-12 * (1.0 + mom.m_a[k].trace()));
            CheckResult {
                ok: min_eig >= thr,
                worst: min_eig,
                location: Some(format!("k={}", k)),
            }
        })
        .collect()
}

/// Mixed products of final utilities of distinct issue times must factorize
/// conditionally on every `F_n`, `n ≤ t_bar`.
pub fn check_h3(tree: &ScenarioTree, book: &ContractBook, tol_mom: f64) -> CheckResult {
    let h = tree.horizon();
    let n = book.n;
    let mut res = CheckResult::pass();
    for k in 0..=book.t_bar {
        for l in 0..=book.t_bar {
            if k == l {
                continue;
            }
            let (uk, ul) = (book.fin(k), book.fin(l));
            let prod = Adapted::from_values(tree, h, n * n, products(uk, ul)).expect("shape");
            for depth in 0..=book.t_bar {
                let cp = tree.condition_unchecked(&prod, depth);
                let ck = tree.condition_unchecked(uk, depth);
                let cl = tree.condition_unchecked(ul, depth);
                let ids = tree.layer_ids(depth);
                for pos in 0..tree.layer_len(depth) {
                    let (a, b, c) = (cp.at(pos), ck.at(pos), cl.at(pos));
                    let mut dev = 0.0f64;
                    for i in 0..n {
                        for j in 0..n {
                            dev = dev.max((a[i * n + j] - b[i] * c[j]).abs());
                        }
                    }
                    res.absorb(dev, tol_mom, || format!("k={} l={} n={} node={}", k, l, depth, ids[pos]));
                }
            }
        }
    }
    res
}

pub fn check_hypotheses(tree: &ScenarioTree, book: &ContractBook, tol_mom: f64, tol_pd_rel: f64) -> HypothesisReport {
    let h1 = check_h1(tree, book, tol_mom);
    let h2 = check_h2(tree, book, tol_pd_rel);
    let h3 = check_h3(tree, book, tol_mom);
    HypothesisReport {
        h1_ok: h1.iter().all(|c| c.ok),
        h2_ok: h2.iter().all(|c| c.ok),
        h3_ok: h3.ok,
        h1,
        h2,
        h3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tree::Dims;

    #[test]
    fn coin2_final_utilities() {
        let m = fixtures::coin2();
        assert_eq!(m.book.final_utility(0).unwrap().values(), &[3.0, 3.0, 1.0, 1.0]);
        assert_eq!(m.book.final_utility(1).unwrap().values(), &[2.0, 0.0, 2.0, 0.0]);
        assert!(m.book.final_utility(2).is_err());
        let zero = ContractBook::zeros(&m.tree);
        assert_eq!(zero.final_utility(1).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn coin2_moments() {
        let m = fixtures::coin2();
        let mom = MomentTables::new(&m.tree, &m.book);
        assert_eq!(mom.m_a[0][(0, 0)], 5.0);
        assert_eq!(mom.m_a[1][(0, 0)], 2.0);
        assert_eq!(mom.mean, vec![vec![2.0], vec![1.0]]);
        assert_eq!(mom.m_b[0][(0, 0)], 1.0);
        assert_eq!(mom.m_b[1][(0, 0)], 1.0);
        // u^∞(0) is F_1-measurable
        assert_eq!(mom.n_a[1][0][(0, 0)], 5.0);
        assert_eq!(mom.n_b[1][0][(0, 0)], 1.0);
    }

    #[test]
    fn coin2_hypotheses_hold() {
        let m = fixtures::coin2();
        let rep = check_hypotheses(&m.tree, &m.book, TOL_MOM, TOL_PD_REL);
        assert!(rep.all_ok(), "{:?}", rep);
        assert!((rep.h2[0].worst - 1.0).abs() < 1e-15);
        assert!((rep.h2[1].worst - 1.0).abs() < 1e-15);
    }

    #[test]
    fn h1_detects_subtree_dependence() {
        let mut m = fixtures::coin2();
        // 4/0 in subtree b instead of 2/0
        m.book.set(&m.tree, 1, 0, 5, 4.0).unwrap();
        let h1 = check_h1(&m.tree, &m.book, TOL_MOM);
        assert!(h1[0].ok);
        assert!(!h1[1].ok);
        assert!(h1[1].worst >= 1.0);
    }

    #[test]
    fn h2_detects_degenerate_covariance() {
        let m = fixtures::coin2();
        let mut book = m.book.clone();
        for leaf in [3, 4, 5, 6] {
            book.set(&m.tree, 1, 0, leaf, 1.5).unwrap();
        }
        let h2 = check_h2(&m.tree, &book, TOL_PD_REL);
        assert!(h2[0].ok && !h2[1].ok);

        // two identical contract types
        let tree = ScenarioTree::new(&fixtures::coin2_nodes(), Dims::new(2, 1, 1)).unwrap();
        let book = ContractBook::from_fn(&tree, |k, t, pos, _| {
            if t == 2 {
                fixtures::coin2_book_value(k, pos)
            } else {
                0.0
            }
        });
        let h2 = check_h2(&tree, &book, TOL_PD_REL);
        assert!(h2.iter().all(|c| !c.ok));
    }

    #[test]
    fn h3_detects_correlation() {
        let m = fixtures::coin2();
        assert!(check_h3(&m.tree, &m.book, TOL_MOM).ok);
        let mut book = m.book.clone();
        let u0 = book.final_utility(0).unwrap().clone();
        *book.utility_mut(1, 2) = u0;
        assert!(!check_h3(&m.tree, &book, TOL_MOM).ok);
    }

    #[test]
    fn h3_vacuous_for_single_issue_time() {
        let nodes = fixtures::coin2_nodes();
        let tree = ScenarioTree::new(&nodes, Dims::new(1, 0, 2)).unwrap();
        let book = ContractBook::from_fn(&tree, |_, _, pos, _| pos as f64);
        assert!(check_h3(&tree, &book, TOL_MOM).ok);
    }

    #[test]
    fn setting_before_issue_is_rejected() {
        let m = fixtures::coin2();
        let mut book = m.book.clone();
        assert!(book.set(&m.tree, 1, 0, 1, 2.0).is_err());
        assert!(book.set(&m.tree, 1, 0, 1, 0.0).is_ok());
        assert!(book.set(&m.tree, 0, 1, 3, 1.0).is_err());
        assert!(matches!(book.set(&m.tree, 0, 0, 42, 1.0), Err(Error::UnknownNode(42))));
    }
}
