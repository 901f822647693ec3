//! Small dense quadratic programs.
//!
//! * [`nonneg_qp`] — `min ½ y·my − x·y` over `y ≥ 0` (some coordinates may be
//!   declared free), returning the pair `F⁺, F⁻` with `m F⁺ = x + F⁻`. Primal
//!   active set with lowest-index entering rule.
//! * [`DenseQp`] — general strictly convex QP with equality and inequality
//!   constraints, solved by the Goldfarb–Idnani dual active-set method. It
//!   starts from the unconstrained minimizer and detects infeasibility on the
//!   way, so no separate feasibility phase is needed.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Solution of the nonnegative QP.
#[derive(Clone, Debug, PartialEq)]
pub struct NonnegSplit {
    /// The minimizer `F⁺ ≥ 0`.
    pub plus: Vec<f64>,
    /// Bound multipliers `F⁻ = m F⁺ − x ≥ 0`.
    pub minus: Vec<f64>,
    /// Coordinates not held at their bound (free coordinates always included).
    pub passive: Vec<bool>,
    pub pivots: usize,
}

pub fn nonneg_qp(m: &DMatrix<f64>, x: &[f64]) -> Result<NonnegSplit> {
    nonneg_qp_masked(m, x, &vec![false; x.len()])
}

fn solve_sub(m: &DMatrix<f64>, x: &[f64], set: &[bool]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..x.len()).filter(|i| set[*i]).collect();
    let mut out = vec![0.0; x.len()];
    if idx.is_empty() {
        return Ok(out);
    }
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])]);
    let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|i| x[*i]));
    let sol = match Cholesky::new(sub.clone()) {
        Some(ch) => ch.solve(&rhs),
        None => sub.lu().solve(&rhs).ok_or(Error::SingularSystem)?,
    };
    for (k, i) in idx.iter().enumerate() {
        out[*i] = sol[k];
    }
    Ok(out)
}

/// As [`nonneg_qp`], with `free[i]` marking coordinates without a sign constraint
/// (their `F⁻` entry is zero).
pub fn nonneg_qp_masked(m: &DMatrix<f64>, x: &[f64], free: &[bool]) -> Result<NonnegSplit> {
    let n = x.len();
    if m.nrows() != n || m.ncols() != n || free.len() != n {
        return Err(Error::Shape("nonnegative QP dimensions".into()));
    }
    if n == 0 {
        return Ok(NonnegSplit {
            plus: vec![],
            minus: vec![],
            passive: vec![],
            pivots: 0,
        });
    }
    let min_eig = linalg::min_eigenvalue(m);
    let scale = linalg::max_abs_mat(m);
    if !(min_eig > 1e-13 * scale) {
        return Err(Error::NotSpd { min_eig });
    }

    let mut passive: Vec<bool> = free.to_vec();
    let mut y = solve_sub(m, x, &passive)?;
    let cap = 50 * n + 100;
    let mut pivots = 0;
    let xs = linalg::max_abs(x);
    loop {
        let my = linalg::mat_vec(m, &y);
        let tol = 1e-13 * (1.0 + xs + scale * linalg::max_abs(&y));
        let entering = (0..n).find(|&j| !passive[j] && x[j] - my[j] > tol);
        let Some(j) = entering else { break };
        passive[j] = true;
        loop {
            pivots += 1;
            if pivots > cap {
                return Err(Error::MaxPivotsExceeded(cap));
            }
            let z = solve_sub(m, x, &passive)?;
            let blocking: Vec<usize> = (0..n).filter(|&i| passive[i] && !free[i] && z[i] <= 0.0).collect();
            if blocking.is_empty() {
                y = z;
                break;
            }
            let alpha = blocking
                .iter()
                .map(|&i| if y[i] - z[i] > 0.0 { y[i] / (y[i] - z[i]) } else { 0.0 })
                .fold(f64::INFINITY, f64::min);
            for i in 0..n {
                y[i] += alpha * (z[i] - y[i]);
            }
            for i in 0..n {
                if passive[i] && !free[i] && y[i] <= 1e-15 * (1.0 + linalg::max_abs(&y)) {
                    passive[i] = false;
                    y[i] = 0.0;
                }
            }
        }
    }
    // exact complementarity: recompute on the final passive set
    let plus = solve_sub(m, x, &passive)?;
    let plus: Vec<f64> = plus
        .iter()
        .enumerate()
        .map(|(i, v)| if passive[i] && !free[i] { v.max(0.0) } else { *v })
        .collect();
    let mp = linalg::mat_vec(m, &plus);
    let minus: Vec<f64> = (0..n)
        .map(|i| if passive[i] { 0.0 } else { (mp[i] - x[i]).max(0.0) })
        .collect();
    Ok(NonnegSplit {
        plus,
        minus,
        passive,
        pivots,
    })
}

/// Constraint normal: dense vector or a unit coordinate vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Normal {
    Dense(Vec<f64>),
    Unit(usize),
}

impl Normal {
    fn dot(&self, z: &[f64]) -> f64 {
        match self {
            Normal::Dense(v) => linalg::dot(v, z),
            Normal::Unit(i) => z[*i],
        }
    }

    fn norm(&self) -> f64 {
        match self {
            Normal::Dense(v) => linalg::norm(v),
            Normal::Unit(_) => 1.0,
        }
    }

    /// `Jᵀ n`.
    fn project(&self, j: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Normal::Dense(v) => j.tr_mul(&DVector::from_column_slice(v)),
            Normal::Unit(i) => j.row(*i).transpose(),
        }
    }
}

/// `nᵀz = b` (equality) or `nᵀz ≥ b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub normal: Normal,
    pub rhs: f64,
    pub equality: bool,
}

/// `min ½ zᵀGz + aᵀz` subject to linear constraints; `G` must be SPD.
#[derive(Clone, Debug)]
pub struct DenseQp {
    pub g: DMatrix<f64>,
    pub a: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// One multiplier per constraint, in input order; inactive ones are 0.
    /// Stationarity: `Gz + a = Σ multipliers[i] · normal[i]`.
    pub multipliers: Vec<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

impl DenseQp {
    pub fn new(g: DMatrix<f64>, a: Vec<f64>) -> Self {
        Self {
            g,
            a,
            constraints: Vec::new(),
        }
    }

    pub fn ge(mut self, normal: Normal, rhs: f64) -> Self {
        self.constraints.push(Constraint {
            normal,
            rhs,
            equality: false,
        });
        self
    }

    pub fn eq(mut self, normal: Normal, rhs: f64) -> Self {
        self.constraints.push(Constraint {
            normal,
            rhs,
            equality: true,
        });
        self
    }

    /// Adds `z_i ≥ 0` for every coordinate.
    pub fn nonnegative(mut self) -> Self {
        for i in 0..self.a.len() {
            self = self.ge(Normal::Unit(i), 0.0);
        }
        self
    }

    pub fn solve(&self) -> Result<QpSolution> {
        goldfarb_idnani(self)
    }

    /// Largest violation of stationarity, sign, feasibility and complementarity
    /// conditions for a candidate primal–dual pair, each scaled by the data.
    pub fn kkt_residual(&self, z: &[f64], mult: &[f64]) -> f64 {
        let mut grad = linalg::mat_vec(&self.g, z);
        grad.iter_mut().zip(&self.a).for_each(|(g, a)| *g += a);
        let scale = 1.0 + linalg::max_abs(&grad);
        let mut res: f64 = 0.0;
        for (c, u) in self.constraints.iter().zip(mult) {
            match &c.normal {
                Normal::Dense(v) => grad.iter_mut().zip(v).for_each(|(g, n)| *g -= u * n),
                Normal::Unit(i) => grad[*i] -= u,
            }
            let s = c.normal.dot(z) - c.rhs;
            let cs = 1.0 + c.rhs.abs() + c.normal.norm() * linalg::max_abs(z);
            if c.equality {
                res = res.max(s.abs() / cs);
            } else {
                res = res.max((-s).max(0.0) / cs);
                res = res.max((-u).max(0.0) / scale);
                res = res.max((u * s).abs() / (scale * cs));
            }
        }
        res.max(linalg::max_abs(&grad) / scale)
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let r = a.hypot(b);
    if r == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / r, b / r, r)
    }
}

fn rotate_cols(j: &mut DMatrix<f64>, c1: usize, c2: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (x, y) = (j[(row, c1)], j[(row, c2)]);
        j[(row, c1)] = c * x + s * y;
        j[(row, c2)] = -s * x + c * y;
    }
}

fn goldfarb_idnani(qp: &DenseQp) -> Result<QpSolution> {
    let n = qp.a.len();
    let mc = qp.constraints.len();
    if qp.g.nrows() != n || qp.g.ncols() != n {
        return Err(Error::Shape("QP Hessian dimension".into()));
    }
    for c in &qp.constraints {
        match &c.normal {
            Normal::Dense(v) if v.len() != n => return Err(Error::Shape("constraint normal dimension".into())),
            Normal::Unit(i) if *i >= n => return Err(Error::Shape("bound index".into())),
            _ => {}
        }
    }
    let chol = Cholesky::new(qp.g.clone()).ok_or_else(|| Error::NotSpd {
        min_eig: linalg::min_eigenvalue(&qp.g),
    })?;
    let l = chol.l();
    // J = L^{-T}
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::SingularSystem)?;
    let mut jm = linv.transpose();
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut z: Vec<f64> = chol.solve(&DVector::from_column_slice(&qp.a)).iter().map(|v| -v).collect();

    let mut active: Vec<usize> = Vec::new();
    let mut sign: Vec<f64> = vec![1.0; mc];
    let mut u: Vec<f64> = Vec::new();
    let cap = 20 * (n + mc) + 200;
    let mut iterations = 0;

    let slack = |i: usize, z: &[f64], sign: &[f64]| sign[i] * (qp.constraints[i].normal.dot(z) - qp.constraints[i].rhs);
    let tol_of = |i: usize, z: &[f64]| {
        let c = &qp.constraints[i];
        1e-12 * (1.0 + c.rhs.abs() + c.normal.norm() * linalg::max_abs(z))
    };

    loop {
        // choose the next constraint to enforce
        let mut p = None;
        for i in 0..mc {
            if qp.constraints[i].equality && !active.contains(&i) {
                p = Some(i);
                break;
            }
        }
        if p.is_none() {
            let mut worst = 0.0;
            for i in 0..mc {
                if active.contains(&i) || qp.constraints[i].equality {
                    continue;
                }
                let s = slack(i, &z, &sign);
                let tol = tol_of(i, &z);
                if s < -tol && s / tol < worst {
                    worst = s / tol;
                    p = Some(i);
                }
            }
        }
        let Some(p) = p else { break };
        if qp.constraints[p].equality {
            sign[p] = if qp.constraints[p].normal.dot(&z) - qp.constraints[p].rhs > 0.0 { -1.0 } else { 1.0 };
        }
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > cap {
                return Err(Error::MaxPivotsExceeded(cap));
            }
            let q = active.len();
            let d = qp.constraints[p].normal.project(&jm) * sign[p];
            let d2 = d.rows(q, n - q);
            let zstep: DVector<f64> = if q < n { jm.columns(q, n - q) * d2 } else { DVector::zeros(n) };
            let rvec: DVector<f64> = if q > 0 {
                r.view((0, 0), (q, q))
                    .into_owned()
                    .solve_upper_triangular(&d.rows(0, q).into_owned())
                    .ok_or(Error::SingularSystem)?
            } else {
                DVector::zeros(0)
            };

            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (pos, &ci) in active.iter().enumerate() {
                if qp.constraints[ci].equality || rvec[pos] <= 0.0 {
                    continue;
                }
                let t = u[pos] / rvec[pos];
                if t < t1 {
                    t1 = t;
                    drop_at = Some(pos);
                }
            }
            let d2n = d2.norm_squared();
            let full_ok = d2n > 1e-26 * (1.0 + d.norm_squared());
            let s_p = slack(p, &z, &sign);
            let t2 = if full_ok { (-s_p / d2n).max(0.0) } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Infeasible);
            }

            for (pos, ui) in u.iter_mut().enumerate() {
                *ui -= t * rvec[pos];
            }
            up += t;
            if full_ok {
                for (zi, st) in z.iter_mut().zip(zstep.iter()) {
                    *zi += t * st;
                }
            }

            if full_ok && t2 <= t1 {
                // add p
                let mut d = d.clone();
                for jj in (q + 1..n).rev() {
                    let (c, s, rho) = givens(d[jj - 1], d[jj]);
                    d[jj - 1] = rho;
                    d[jj] = 0.0;
                    rotate_cols(&mut jm, jj - 1, jj, c, s);
                }
                if d[q] < 0.0 {
                    d[q] = -d[q];
                    for row in 0..n {
                        jm[(row, q)] = -jm[(row, q)];
                    }
                }
                for row in 0..=q {
                    r[(row, q)] = d[row];
                }
                active.push(p);
                u.push(up);
                break;
            }

            // drop the blocking constraint and retry p
            let k = drop_at.expect("partial step has a blocking constraint");
            active.remove(k);
            u.remove(k);
            let q_old = q;
            for col in k..q_old - 1 {
                for row in 0..q_old {
                    r[(row, col)] = r[(row, col + 1)];
                }
            }
            for row in 0..n {
                r[(row, q_old - 1)] = 0.0;
            }
            for col in k..q_old - 1 {
                let (c, s, rho) = givens(r[(col, col)], r[(col + 1, col)]);
                r[(col, col)] = rho;
                r[(col + 1, col)] = 0.0;
                for cc in col + 1..q_old - 1 {
                    let (x, y) = (r[(col, cc)], r[(col + 1, cc)]);
                    r[(col, cc)] = c * x + s * y;
                    r[(col + 1, cc)] = -s * x + c * y;
                }
                rotate_cols(&mut jm, col, col + 1, c, s);
            }
        }
    }

    let mut multipliers = vec![0.0; mc];
    for (pos, &ci) in active.iter().enumerate() {
        multipliers[ci] = u[pos] * sign[ci];
    }
    Ok(QpSolution {
        z,
        multipliers,
        active,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    #[test]
    fn nonneg_examples() {
        let s = nonneg_qp(&DMatrix::identity(2, 2), &[1.0, -1.0]).unwrap();
        assert_eq!(s.plus, vec![1.0, 0.0]);
        assert_eq!(s.minus, vec![0.0, 1.0]);

        let m = mat(2, &[2.0, 0.0, 0.0, 4.0]);
        let s = nonneg_qp(&m, &[1.0, 2.0]).unwrap();
        approx::assert_relative_eq!(s.plus[0], 0.5, epsilon = 1e-15);
        approx::assert_relative_eq!(s.plus[1], 0.5, epsilon = 1e-15);
        assert_eq!(s.minus, vec![0.0, 0.0]);

        let m = mat(2, &[2.0, 1.0, 1.0, 2.0]);
        let s = nonneg_qp(&m, &[1.0, -2.0]).unwrap();
        assert_eq!(s.passive, vec![true, false]);
        approx::assert_relative_eq!(s.plus[0], 0.5, epsilon = 1e-15);
        assert_eq!(s.plus[1], 0.0);
        assert_eq!(s.minus[0], 0.0);
        approx::assert_relative_eq!(s.minus[1], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn nonneg_rejects_indefinite() {
        let m = mat(2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(nonneg_qp(&m, &[1.0, 1.0]), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn free_coordinates() {
        let m = mat(2, &[2.0, 1.0, 1.0, 2.0]);
        let s = nonneg_qp_masked(&m, &[-3.0, 1.0], &[true, false]).unwrap();
        // y0 free: stationarity in y0 always holds
        let my = linalg::mat_vec(&m, &s.plus);
        assert!((my[0] + 3.0).abs() < 1e-14);
        assert_eq!(s.minus[0], 0.0);
        assert!(s.plus[1] >= 0.0);
    }

    #[test]
    fn dense_qp_simple() {
        // min ½|z|² s.t. z0 + z1 ≥ 2 → (1, 1), multiplier 1
        let qp = DenseQp::new(DMatrix::identity(2, 2), vec![0.0, 0.0]).ge(Normal::Dense(vec![1.0, 1.0]), 2.0);
        let s = qp.solve().unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-14 && (s.z[1] - 1.0).abs() < 1e-14);
        assert!((s.multipliers[0] - 1.0).abs() < 1e-14);
        assert!(qp.kkt_residual(&s.z, &s.multipliers) < 1e-14);
    }

    #[test]
    fn dense_qp_with_bounds_and_equality() {
        // min ½(z0² + z1²) − 2 z1  s.t. z0 + z1 = 1, z ≥ 0 → z = (0, 1)
        let qp = DenseQp::new(DMatrix::identity(2, 2), vec![0.0, -2.0])
            .eq(Normal::Dense(vec![1.0, 1.0]), 1.0)
            .nonnegative();
        let s = qp.solve().unwrap();
        assert!(s.z[0].abs() < 1e-14 && (s.z[1] - 1.0).abs() < 1e-14);
        assert!(qp.kkt_residual(&s.z, &s.multipliers) < 1e-13);
        // equality multiplier is negative here (pushes the mean down)
        assert!((s.multipliers[0] + 1.0).abs() < 1e-13);
    }

    #[test]
    fn dense_qp_infeasible() {
        let qp = DenseQp::new(DMatrix::identity(1, 1), vec![0.0])
            .ge(Normal::Dense(vec![1.0]), 1.0)
            .ge(Normal::Dense(vec![-1.0]), 0.0);
        assert!(matches!(qp.solve(), Err(Error::Infeasible)));
    }

    /// Reference minimizer by enumerating all active sets.
    fn enumerate(m: &DMatrix<f64>, x: &[f64]) -> Vec<bool> {
        let n = x.len();
        for mask in 0..(1u32 << n) {
            let set: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let y = solve_sub(m, x, &set).unwrap();
            let my = linalg::mat_vec(m, &y);
            let ok = (0..n).all(|i| if set[i] { y[i] >= 0.0 } else { my[i] - x[i] >= 0.0 });
            if ok {
                return set;
            }
        }
        panic!("no complementary set");
    }

    fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()] * ((i + 2 * j + 1) as f64).sin());
        a.transpose() * &a + DMatrix::identity(n, n) * 0.1
    }

    proptest! {
        #[test]
        fn nonneg_matches_enumeration(n in 1usize..5, seed in prop::collection::vec(-2.0f64..2.0, 16), x in prop::collection::vec(-3.0f64..3.0, 4)) {
            let m = spd(n, &seed);
            let x = &x[..n];
            let s = nonneg_qp(&m, x).unwrap();
            prop_assert_eq!(linalg::dot(&s.plus, &s.minus), 0.0);
            let mp = linalg::mat_vec(&m, &s.plus);
            for i in 0..n {
                prop_assert!((mp[i] - s.minus[i] - x[i]).abs() <= 1e-10);
                prop_assert!(s.plus[i] >= 0.0 && s.minus[i] >= 0.0);
            }
            prop_assert_eq!(s.passive, enumerate(&m, x));
        }

        #[test]
        fn dense_qp_matches_nonneg(n in 1usize..6, seed in prop::collection::vec(-2.0f64..2.0, 25), x in prop::collection::vec(-3.0f64..3.0, 5)) {
            let m = spd(n, &seed);
            let x = &x[..n];
            let s = nonneg_qp(&m, x).unwrap();
            let qp = DenseQp::new(m.clone(), x.iter().map(|v| -v).collect()).nonnegative();
            let d = qp.solve().unwrap();
            for i in 0..n {
                prop_assert!((d.z[i] - s.plus[i]).abs() <= 1e-9);
                prop_assert!((d.multipliers[i] - s.minus[i]).abs() <= 1e-9);
            }
        }
    }
}
