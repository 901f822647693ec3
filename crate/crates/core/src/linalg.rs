//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivot matrices with a 2-norm condition estimate above this are treated as singular.
pub const COND_MAX: f64 = 1e12;

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

/// 2-norm condition number of a symmetric matrix.
pub fn cond_sym(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let hi = ev.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let lo = ev.iter().fold(f64::INFINITY, |a, x| a.min(x.abs()));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric pivot, rejecting numerically singular ones.
pub fn pivot_inverse(m: &DMatrix<f64>, level: usize) -> Result<DMatrix<f64>> {
    let cond = cond_sym(m);
    if !cond.is_finite() || cond > COND_MAX {
        return Err(Error::SingularPivot { level, cond });
    }
    let inv = m
        .clone()
        .try_inverse()
        .ok_or(Error::SingularPivot { level, cond })?;
    // keep the inverse exactly symmetric
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Number of eigenvalues below zero.
pub fn negative_count(m: &DMatrix<f64>) -> usize {
    sym_eigenvalues(m).iter().filter(|x| **x < 0.0).count()
}

pub fn outer(a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

pub fn mat_vec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(x)).as_slice().to_vec()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs_mat(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
