//! Dense reference implementation.
//!
//! `H` is materialized as `R^D` in probability-weighted coordinates
//! (`z = √p·η`), where the inner product is Euclidean and the forms are plain
//! Gram matrices. Everything here is brute force and independent of the
//! structured elimination.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contracts::ContractBook;
use crate::error::{Error, Result};
use crate::linalg;
use crate::multipliers::{kkt_verify, KktReport, MultiplierSet, TOL_KKT};
use crate::operators::{dense_matrix, from_weighted, to_weighted, OperatorKind, DENSE_CAP};
use crate::portfolio::{utility_unchecked, variance_b, ConstraintConfig, Form};
use crate::qp::{DenseQp, Normal, QpSolution};
use crate::tree::{Portfolio, ScenarioTree};

/// Relative backward error accepted from a dense linear solve.
pub const DENSE_RESIDUAL: f64 = 1e-12;
const BISECTION_STEPS: usize = 200;

/// `1/√p` per weighted coordinate.
fn inv_sqrt_weights(tree: &ScenarioTree) -> Vec<f64> {
    let n = tree.n_contracts();
    (0..=tree.t_bar())
        .flat_map(|k| tree.layer_probs(k).iter().flat_map(move |p| std::iter::repeat_n(1.0 / p.sqrt(), n)))
        .collect()
}

/// Solves `(C − λ)η = ξ` by LU factorization of the dense Gram matrix.
pub fn dense_solve_linear(
    kind: OperatorKind,
    tree: &ScenarioTree,
    book: &ContractBook,
    xi: &Portfolio,
    lambda: f64,
    cap: usize,
) -> Result<Portfolio> {
    tree.check_portfolio(xi)?;
    let mut g = dense_matrix(kind, tree, book, cap)?;
    let size = linalg::max_abs_mat(&g) + lambda.abs();
    for i in 0..g.nrows() {
        g[(i, i)] -= lambda;
    }
    let b = DVector::from_vec(to_weighted(tree, xi));
    let lu = g.clone().lu();
    // crude reciprocal condition estimate from the pivots of U
    let piv = lu.u().diagonal();
    let (lo, hi) = piv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x.abs()), hi.max(x.abs())));
    if !(lo > 1e-14 * hi.max(size)) {
        return Err(Error::SingularSystem);
    }
    let z = lu.solve(&b).ok_or(Error::SingularSystem)?;
    let res = (&g * &z - &b).amax();
    let scale = linalg::max_abs_mat(&g) * z.amax() + b.amax();
    if !(res <= DENSE_RESIDUAL * scale.max(f64::MIN_POSITIVE)) || z.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem);
    }
    from_weighted(tree, z.as_slice())
}

/// Eigenvalues of `A` or `B`, ascending.
pub fn dense_spectrum(kind: OperatorKind, tree: &ScenarioTree, book: &ContractBook, cap: usize) -> Result<Vec<f64>> {
    Ok(linalg::sym_eigenvalues(&dense_matrix(kind, tree, book, cap)?))
}

/// The constrained problem in weighted coordinates.
#[derive(Clone, Debug)]
pub struct DenseProblem<'a> {
    pub tree: &'a ScenarioTree,
    pub book: &'a ContractBook,
    pub config: ConstraintConfig,
    pub g_a: DMatrix<f64>,
    pub g_b: DMatrix<f64>,
    /// Weighted coordinates of `l_0, …, l_{H-1}, m`.
    pub rows: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
}

impl<'a> DenseProblem<'a> {
    pub fn new(tree: &'a ScenarioTree, book: &'a ContractBook, config: &ConstraintConfig, cap: usize) -> Result<Self> {
        book.check_shape(tree)?;
        config.validate(tree.horizon())?;
        let g_a = dense_matrix(OperatorKind::A, tree, book, cap)?;
        let g_b = dense_matrix(OperatorKind::B, tree, book, cap)?;
        Ok(Self {
            tree,
            book,
            config: config.clone(),
            g_a,
            g_b,
            rows: functional_rows(tree, book, config),
            levels: config.levels(),
        })
    }

    pub fn dim(&self) -> usize {
        self.g_a.nrows()
    }

    pub fn gram(&self, kind: OperatorKind) -> &DMatrix<f64> {
        match kind {
            OperatorKind::A => &self.g_a,
            OperatorKind::B => &self.g_b,
        }
    }

    fn qp(&self, form: Form, e: f64) -> DenseQp {
        let kind = form.kind();
        let mut qp = DenseQp::new(self.gram(kind).clone(), vec![0.0; self.dim()]);
        let last = self.rows.len() - 1;
        for (t, row) in self.rows.iter().enumerate() {
            let normal = Normal::Dense(row.clone());
            qp = if t == last {
                if form == Form::FixedMean {
                    qp.eq(normal, e)
                } else {
                    qp.ge(normal, e)
                }
            } else {
                qp.ge(normal, self.levels[t])
            };
        }
        qp.nonnegative()
    }
}

/// Weighted coordinates of the constraint functionals, obtained by evaluating
/// each functional on unit portfolios (no representer algebra involved).
fn functional_rows(tree: &ScenarioTree, book: &ContractBook, config: &ConstraintConfig) -> Vec<Vec<f64>> {
    let dim = tree.portfolio_dim();
    let h = tree.horizon();
    let w = inv_sqrt_weights(tree);
    let mut rows = vec![vec![0.0; dim]; h + 1];
    let mut flat = vec![0.0; dim];
    for j in 0..dim {
        flat[j] = 1.0;
        let eta = Portfolio::from_flat(tree, &flat).expect("shape");
        flat[j] = 0.0;
        let us: Vec<f64> = (0..=h)
            .map(|t| tree.expect_unchecked(&utility_unchecked(tree, book, &eta, t))[0])
            .collect();
        for t in 0..h {
            rows[t][j] = (us[t + 1] - (1.0 + config.c[t]) * us[t]) * w[j];
        }
        rows[h][j] = us[h] * w[j];
    }
    rows
}

/// Dense optimum together with its own certificate.
#[derive(Clone, Debug)]
pub struct DenseCertificate {
    pub form: Form,
    pub eta: Portfolio,
    /// For the max-mean form: the multipliers of the equivalent min-variance
    /// problem at floor `e_used`.
    pub multipliers: MultiplierSet,
    /// Weighted coordinates of the optimum.
    pub coords: Vec<f64>,
    pub kkt: KktReport,
    /// Residual of the QP's own optimality conditions in weighted coordinates.
    pub qp_residual: f64,
    pub mean: f64,
    pub variance: f64,
    /// Mean floor of the last QP solved (the bisection result for max-mean).
    pub e_used: f64,
    pub active_constraints: Vec<usize>,
    pub active_bounds: usize,
    pub iterations: usize,
    pub bisection_steps: usize,
}

/// Summary of a certificate suitable for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CertificateSummary {
    pub qp_residual: f64,
    pub e_used: f64,
    pub active_constraints: Vec<usize>,
    pub active_bounds: usize,
    pub qp_iterations: usize,
    pub bisection_steps: usize,
}

impl DenseCertificate {
    pub fn summary(&self) -> CertificateSummary {
        CertificateSummary {
            qp_residual: self.qp_residual,
            e_used: self.e_used,
            active_constraints: self.active_constraints.clone(),
            active_bounds: self.active_bounds,
            qp_iterations: self.iterations,
            bisection_steps: self.bisection_steps,
        }
    }
}

fn certificate(p: &DenseProblem, form: Form, e: f64, qp: &DenseQp, sol: QpSolution, steps: usize) -> Result<DenseCertificate> {
    let tree = p.tree;
    let s = p.rows.len();
    let w = inv_sqrt_weights(tree);
    let eta = from_weighted(tree, &sol.z)?;
    let nu_flat: Vec<f64> = sol.multipliers[s..].iter().zip(&w).map(|(v, wi)| v * wi).collect();
    let multipliers = MultiplierSet::from_levels(&sol.multipliers[..s], Portfolio::from_flat(tree, &nu_flat)?);
    let check_form = if form == Form::MaxMean { Form::MinVariance } else { form };
    let cfg = ConstraintConfig { e, ..p.config.clone() };
    let kkt = kkt_verify(tree, p.book, &cfg, &eta, &multipliers, check_form, TOL_KKT)?;
    Ok(DenseCertificate {
        form,
        mean: linalg::dot(&p.rows[s - 1], &sol.z),
        variance: variance_b(tree, p.book, &eta),
        qp_residual: qp.kkt_residual(&sol.z, &sol.multipliers),
        active_constraints: sol.active.iter().copied().filter(|i| *i < s).collect(),
        active_bounds: sol.active.iter().filter(|i| **i >= s).count(),
        iterations: sol.iterations,
        coords: sol.z,
        eta,
        multipliers,
        kkt,
        e_used: e,
        bisection_steps: steps,
    })
}

/// Solves one of the three problem forms. The max-mean form bisects on the
/// mean floor of the min-variance problem for the largest floor whose optimal
/// variance stays within `config.sigma2`.
pub fn dense_qp(p: &DenseProblem, form: Form) -> Result<DenseCertificate> {
    match form {
        Form::MinVariance | Form::FixedMean => {
            let qp = p.qp(form, p.config.e);
            let sol = qp.solve()?;
            certificate(p, form, p.config.e, &qp, sol, 0)
        }
        Form::MaxMean => max_mean(p),
    }
}

fn max_mean(p: &DenseProblem) -> Result<DenseCertificate> {
    let sigma2 = p
        .config
        .sigma2
        .ok_or_else(|| Error::Input("max-mean form needs a variance cap".into()))?;
    // centred evaluation: zᵀG_B z loses digits when the variance is small
    let within = |sol: &QpSolution| match from_weighted(p.tree, &sol.z) {
        Ok(eta) => variance_b(p.tree, p.book, &eta) <= sigma2 * (1.0 + 1e-14),
        Err(_) => false,
    };
    let attempt = |e: f64| -> Result<Option<QpSolution>> {
        match p.qp(Form::MinVariance, e).solve() {
            Ok(s) => Ok(Some(s)),
            Err(Error::Infeasible) => Ok(None),
            Err(err) => Err(err),
        }
    };
    let base = attempt(0.0)?.ok_or(Error::Infeasible)?;
    if !within(&base) {
        return Err(Error::Infeasible);
    }
    let mut lo = linalg::dot(&p.rows[p.rows.len() - 1], &base.z).max(0.0);
    let mut best = (lo, base);
    let mut hi = 2.0 * lo.max(1.0);
    let mut steps = 0;
    loop {
        steps += 1;
        if steps > BISECTION_STEPS {
            return Err(Error::Input("mean unbounded under the variance cap".into()));
        }
        match attempt(hi)? {
            Some(s) if within(&s) => {
                lo = hi;
                best = (hi, s);
                hi *= 2.0;
            }
            _ => break,
        }
    }
    for _ in 0..BISECTION_STEPS {
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
        steps += 1;
        let mid = 0.5 * (lo + hi);
        match attempt(mid)? {
            Some(s) if within(&s) => {
                lo = mid;
                best = (mid, s);
            }
            _ => hi = mid,
        }
    }
    let (e, sol) = best;
    let qp = p.qp(Form::MinVariance, e);
    certificate(p, Form::MaxMean, e, &qp, sol, steps)
}

/// Convenience: assemble the dense problem and solve one form.
pub fn solve(tree: &ScenarioTree, book: &ContractBook, config: &ConstraintConfig, form: Form) -> Result<DenseCertificate> {
    dense_qp(&DenseProblem::new(tree, book, config, DENSE_CAP)?, form)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::operators::{apply, representers};
    use crate::tree::{Dims, NodeSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_case() {
        let nodes = vec![
            NodeSpec { id: 0, parent: None, depth: 0, prob: 1.0 },
            NodeSpec { id: 1, parent: Some(0), depth: 1, prob: 0.25 },
            NodeSpec { id: 2, parent: Some(0), depth: 1, prob: 0.75 },
        ];
        let tree = ScenarioTree::new(&nodes, Dims::new(1, 0, 1)).unwrap();
        let book = ContractBook::from_fn(&tree, |_, _, pos, _| [2.0, 4.0][pos]);
        // M_a = 0.25·4 + 0.75·16 = 13
        let spec = dense_spectrum(OperatorKind::A, &tree, &book, DENSE_CAP).unwrap();
        assert_eq!(spec.len(), 1);
        assert_abs_diff_eq!(spec[0], 13.0, epsilon = 1e-13);
        let xi = Portfolio::from_flat(&tree, &[26.0]).unwrap();
        let eta = dense_solve_linear(OperatorKind::A, &tree, &book, &xi, 0.0, DENSE_CAP).unwrap();
        assert_abs_diff_eq!(eta.to_flat()[0], 2.0, epsilon = 1e-14);
        let eta = dense_solve_linear(OperatorKind::A, &tree, &book, &xi, 3.0, DENSE_CAP).unwrap();
        assert_abs_diff_eq!(eta.to_flat()[0], 2.6, epsilon = 1e-14);
        assert!(matches!(
            dense_solve_linear(OperatorKind::A, &tree, &book, &xi, 13.0, DENSE_CAP),
            Err(Error::SingularSystem)
        ));
    }

    #[test]
    fn coin2_round_trip_and_spectrum() {
        let m = fixtures::coin2();
        let eta = Portfolio::from_flat(&m.tree, &[0.3, -1.0, 2.0]).unwrap();
        for kind in [OperatorKind::A, OperatorKind::B] {
            let xi = apply(kind, &m.tree, &m.book, &eta);
            let back = dense_solve_linear(kind, &m.tree, &m.book, &xi, 0.0, DENSE_CAP).unwrap();
            let mut d = back.clone();
            d.axpy(-1.0, &eta);
            assert!(d.max_abs() <= 1e-12);
        }
        let a = dense_spectrum(OperatorKind::A, &m.tree, &m.book, DENSE_CAP).unwrap();
        let b = dense_spectrum(OperatorKind::B, &m.tree, &m.book, DENSE_CAP).unwrap();
        let r = 29f64.sqrt();
        for (x, y) in a.iter().zip([(7.0 - r) / 2.0, 2.0, (7.0 + r) / 2.0]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
        assert!(b[0] > 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert!(x + 1e-12 >= *y);
        }
    }

    #[test]
    fn rows_match_representers() {
        let mut m = fixtures::coin2();
        m.config.c = vec![0.1, 0.3];
        let p = DenseProblem::new(&m.tree, &m.book, &m.config, DENSE_CAP).unwrap();
        let reps = representers(&m.tree, &m.book, &m.config);
        for (row, l) in p.rows.iter().zip(reps.functionals()) {
            let z = to_weighted(&m.tree, l);
            for (a, b) in row.iter().zip(&z) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_floor_gives_zero() {
        let mut m = fixtures::coin2();
        m.config.e = 0.0;
        let c = solve(&m.tree, &m.book, &m.config, Form::MinVariance).unwrap();
        assert_eq!(c.eta.max_abs(), 0.0);
        assert!(c.kkt.converged);
    }

    #[test]
    fn coin2_optimum() {
        let m = fixtures::coin2();
        let c = solve(&m.tree, &m.book, &m.config, Form::MinVariance).unwrap();
        let expect = [21.0 / 17.0, 0.0, 18.0 / 17.0];
        for (a, b) in c.eta.to_flat().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(c.mean, 3.0, epsilon = 1e-12);
        assert!(c.qp_residual <= 1e-10);
        assert!(c.kkt.converged);

        // grid search over the three coordinates, then compare objective values
        let mut best = f64::INFINITY;
        let steps = 60;
        for i in 0..=steps {
            for j in 0..=steps {
                for k in 0..=steps {
                    let x = [i as f64 * 2.0 / steps as f64, j as f64 * 2.0 / steps as f64, k as f64 * 2.0 / steps as f64];
                    let eta = Portfolio::from_flat(&m.tree, &x).unwrap();
                    if crate::portfolio::mean_functional(&m.tree, &m.book, &eta) >= 3.0 {
                        best = best.min(variance_b(&m.tree, &m.book, &eta));
                    }
                }
            }
        }
        assert!(c.variance <= best + 1e-12);
        assert!(best - c.variance <= 0.05);
    }

    #[test]
    fn equality_and_inequality_agree_when_binding() {
        let m = fixtures::coin2();
        let p = DenseProblem::new(&m.tree, &m.book, &m.config, DENSE_CAP).unwrap();
        let a = dense_qp(&p, Form::MinVariance).unwrap();
        // min-variance and fixed-mean use different forms; the fixed-mean
        // problem minimizes a = b + mean², identical on the mean-pinned set
        let f = dense_qp(&p, Form::FixedMean).unwrap();
        for (x, y) in a.coords.iter().zip(&f.coords) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert!(f.kkt.converged);
    }

    #[test]
    fn infeasible_floor() {
        let mut m = fixtures::coin2();
        m.config.c = vec![0.5, 0.0];
        m.config.k0 = 1.0;
        // l_0 = 0 but its level is 0.5
        assert!(matches!(solve(&m.tree, &m.book, &m.config, Form::MinVariance), Err(Error::Infeasible)));
    }

    #[test]
    fn max_mean_round_trip() {
        let m = fixtures::coin2();
        let mv = solve(&m.tree, &m.book, &m.config, Form::MinVariance).unwrap();
        let cfg = ConstraintConfig { sigma2: Some(mv.variance), ..m.config.clone() };
        let mm = solve(&m.tree, &m.book, &cfg, Form::MaxMean).unwrap();
        let mut d = mm.eta.clone();
        d.axpy(-1.0, &mv.eta);
        assert!(m.tree.norm(&d) <= 1e-6 * m.tree.norm(&mv.eta));
        assert!((mm.variance - mv.variance).abs() <= 1e-8 * mv.variance);
        assert!(mm.kkt.converged);
    }

    #[test]
    fn constraint_order_does_not_matter() {
        let m = fixtures::coin2();
        let p = DenseProblem::new(&m.tree, &m.book, &m.config, DENSE_CAP).unwrap();
        let base = dense_qp(&p, Form::MinVariance).unwrap();
        let qp = p.qp(Form::MinVariance, m.config.e);
        for shift in 1..qp.constraints.len() {
            let mut q = qp.clone();
            q.constraints.rotate_left(shift);
            let s = q.solve().unwrap();
            for (x, y) in s.z.iter().zip(&base.coords) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }
}
