//! The operators `A`, `B` on `H`, their blocks, and the representers `m`, `l_t`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contracts::ContractBook;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::portfolio::{final_utility_rv, ConstraintConfig};
use crate::tree::{Adapted, Portfolio, ScenarioTree};

/// Default refusal threshold for dense materialization.
pub const DENSE_CAP: usize = 5000;

/// `A` is the form `a(η) = E(U∞²)`, `B` the variance `b(η) = Var(U∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum OperatorKind {
    A,
    B,
}

/// Multiplies an `R^N`-valued variable by a scalar one on the same layer, componentwise.
fn scale_rows(v: &Adapted, s: &[f64]) -> Vec<f64> {
    let w = v.width();
    let mut out = v.values().to_vec();
    for (pos, sc) in s.iter().enumerate() {
        out[pos * w..(pos + 1) * w].iter_mut().for_each(|x| *x *= sc);
    }
    out
}

/// `(Cη)(k)` for every `k`.
pub fn apply(kind: OperatorKind, tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio) -> Portfolio {
    let h = tree.horizon();
    let mut u = final_utility_rv(tree, book, eta);
    if kind == OperatorKind::B {
        let mean = tree.expect_unchecked(&u)[0];
        u.values_mut().iter_mut().for_each(|x| *x -= mean);
    }
    let n = tree.n_contracts();
    let stages = (0..=tree.t_bar())
        .map(|k| {
            let prod = Adapted::from_values(tree, h, n, scale_rows(book.fin(k), u.values())).expect("shape");
            tree.condition_unchecked(&prod, k)
        })
        .collect();
    Portfolio::from_stages(tree, stages).expect("shape")
}

/// `C(k, l) x` for `x` adapted at depth `l`.
pub fn block_apply(
    kind: OperatorKind,
    tree: &ScenarioTree,
    book: &ContractBook,
    k: usize,
    l: usize,
    x: &Adapted,
) -> Result<Adapted> {
    if k > tree.t_bar() || l > tree.t_bar() {
        return Err(Error::OutOfRange(format!("block ({}, {}) beyond {}", k, l, tree.t_bar())));
    }
    if x.depth() != l || x.width() != tree.n_contracts() || x.n_nodes() != tree.layer_len(l) {
        return Err(Error::Shape(format!("block argument must live on depth {}", l)));
    }
    Ok(block_apply_unchecked(kind, tree, book, k, l, x))
}

pub(crate) fn block_apply_unchecked(
    kind: OperatorKind,
    tree: &ScenarioTree,
    book: &ContractBook,
    k: usize,
    l: usize,
    x: &Adapted,
) -> Adapted {
    let h = tree.horizon();
    let n = tree.n_contracts();
    let ul = book.fin(l);
    let anc = tree.ancestor_map(h, l);
    let s: Vec<f64> = anc
        .iter()
        .enumerate()
        .map(|(pos, a)| crate::linalg::dot(ul.at(pos), x.at(*a)))
        .collect();
    let uk = book.fin(k);
    let prod = Adapted::from_values(tree, h, n, scale_rows(uk, &s)).expect("shape");
    let mut out = tree.condition_unchecked(&prod, k);
    if kind == OperatorKind::B {
        let es: f64 = tree.layer_probs(h).iter().zip(&s).map(|(p, v)| p * v).sum();
        let cu = tree.condition_unchecked(uk, k);
        out.axpy(-es, &cu);
    }
    out
}

/// Riesz representers of the mean functional and the profitability functionals.
#[derive(Clone, Debug, PartialEq)]
pub struct Representers {
    /// `(m, η) = E(U(∞, η))`.
    pub m: Portfolio,
    /// `(l_t, η) = E(ΔU(t+1, η)) − c(t) E(U(t, η))`, `t = 0..horizon-1`.
    pub l: Vec<Portfolio>,
}

impl Representers {
    /// `l_0, …, l_{horizon-1}, m`: the constraint functionals in level order.
    pub fn functionals(&self) -> Vec<&Portfolio> {
        self.l.iter().chain(std::iter::once(&self.m)).collect()
    }
}

pub fn representers(tree: &ScenarioTree, book: &ContractBook, config: &ConstraintConfig) -> Representers {
    let n = tree.n_contracts();
    let m = Portfolio::from_stages(
        tree,
        (0..=tree.t_bar())
            .map(|k| tree.condition_unchecked(book.fin(k), k))
            .collect(),
    )
    .expect("shape");
    let l = (0..tree.horizon())
        .map(|t| {
            let stages = (0..=tree.t_bar())
                .map(|k| {
                    if k > t {
                        return Adapted::zeros(tree, k, n);
                    }
                    let mut a = tree.condition_unchecked(book.utility(k, t + 1), k);
                    let b = tree.condition_unchecked(book.utility(k, t), k);
                    a.axpy(-(1.0 + config.c[t]), &b);
                    a
                })
                .collect();
            Portfolio::from_stages(tree, stages).expect("shape")
        })
        .collect();
    Representers { m, l }
}

/// Weighted coordinates `z = √p · η` in canonical order; `(η, η')_H = z·z'`.
pub fn to_weighted(tree: &ScenarioTree, eta: &Portfolio) -> Vec<f64> {
    let n = tree.n_contracts();
    let mut out = Vec::with_capacity(tree.portfolio_dim());
    for s in eta.stages() {
        for (pos, p) in tree.layer_probs(s.depth()).iter().enumerate() {
            let w = p.sqrt();
            out.extend(s.at(pos).iter().take(n).map(|x| x * w));
        }
    }
    out
}

pub fn from_weighted(tree: &ScenarioTree, z: &[f64]) -> Result<Portfolio> {
    let mut eta = Portfolio::from_flat(tree, z)?;
    for k in 0..=tree.t_bar() {
        let probs = tree.layer_probs(k);
        let st = eta.stage_mut(k);
        for (pos, p) in probs.iter().enumerate() {
            let w = p.sqrt();
            st.at_mut(pos).iter_mut().for_each(|x| *x /= w);
        }
    }
    Ok(eta)
}

/// Per-leaf sparse rows of the weighted design matrix `Φ`, with
/// `U∞(η)(ω)·√p_ω = Σ_j Φ[ω, j] z_j`.
fn design_rows(tree: &ScenarioTree, book: &ContractBook) -> Vec<Vec<(usize, f64)>> {
    let h = tree.horizon();
    let n = tree.n_contracts();
    let leaf_p = tree.layer_probs(h);
    let ancs: Vec<Vec<usize>> = (0..=tree.t_bar()).map(|k| tree.ancestor_map(h, k)).collect();
    (0..tree.layer_len(h))
        .map(|leaf| {
            let sp = leaf_p[leaf].sqrt();
            let mut row = Vec::with_capacity((tree.t_bar() + 1) * n);
            for k in 0..=tree.t_bar() {
                let a = ancs[k][leaf];
                let sv = tree.layer_probs(k)[a].sqrt();
                let base = tree.stage_offset(k) + a * n;
                for (i, u) in book.fin(k).at(leaf).iter().enumerate() {
                    row.push((base + i, sp * u / sv));
                }
            }
            row
        })
        .collect()
}

/// Weighted coordinates of the mean representer: `q = √p · m`.
pub fn weighted_mean(tree: &ScenarioTree, book: &ContractBook) -> Vec<f64> {
    let dim = tree.portfolio_dim();
    let mut q = vec![0.0; dim];
    let leaf_p = tree.layer_probs(tree.horizon());
    for (leaf, row) in design_rows(tree, book).iter().enumerate() {
        let sp = leaf_p[leaf].sqrt();
        for (j, v) in row {
            q[*j] += sp * v;
        }
    }
    q
}

/// Gram matrix of the form `a` or `b` in weighted coordinates, so that
/// `(ξ, Cη)_H = z_ξᵀ G z_η` and the eigenvalues of `G` are those of `C`.
pub fn dense_matrix(kind: OperatorKind, tree: &ScenarioTree, book: &ContractBook, cap: usize) -> Result<DMatrix<f64>> {
    dense_matrix_with(kind, tree, book, cap, Exec::default())
}

pub fn dense_matrix_with(
    kind: OperatorKind,
    tree: &ScenarioTree,
    book: &ContractBook,
    cap: usize,
    exec: Exec,
) -> Result<DMatrix<f64>> {
    let dim = tree.portfolio_dim();
    if dim > cap {
        return Err(Error::DimensionOverflow { dim, cap });
    }
    let rows = design_rows(tree, book);
    let n = tree.n_contracts();
    let h = tree.horizon();

    // leaves below each coordinate's node
    let mut leaves_of: Vec<Vec<usize>> = vec![Vec::new(); dim];
    for k in 0..=tree.t_bar() {
        for (leaf, a) in tree.ancestor_map(h, k).into_iter().enumerate() {
            let base = tree.stage_offset(k) + a * n;
            leaves_of[base..base + n].iter_mut().for_each(|v| v.push(leaf));
        }
    }
    let q = if kind == OperatorKind::B {
        Some(weighted_mean(tree, book))
    } else {
        None
    };

    let cols: Vec<Vec<f64>> = exec.map_range(dim, |j| {
        let mut col = vec![0.0; dim];
        for &leaf in &leaves_of[j] {
            let row = &rows[leaf];
            let phi_j = row.iter().find(|(c, _)| *c == j).map(|(_, v)| *v).unwrap_or(0.0);
            if phi_j == 0.0 {
                continue;
            }
            for (c, v) in row {
                col[*c] += phi_j * v;
            }
        }
        if let Some(q) = &q {
            for (c, qc) in col.iter_mut().zip(q) {
                *c -= qc * q[j];
            }
        }
        col
    });
    let mut g = DMatrix::from_fn(dim, dim, |i, j| cols[j][i]);
    crate::linalg::symmetrize(&mut g);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::portfolio::{mean_functional, variance_b};

    fn pf(m: &crate::Model, v: &[f64]) -> Portfolio {
        Portfolio::from_flat(&m.tree, v).unwrap()
    }

    #[test]
    fn apply_examples() {
        let m = fixtures::coin2();
        let e0 = pf(&m, &[1.0, 0.0, 0.0]);
        assert_eq!(apply(OperatorKind::A, &m.tree, &m.book, &e0).to_flat(), vec![5.0, 3.0, 1.0]);
        assert_eq!(apply(OperatorKind::B, &m.tree, &m.book, &e0).to_flat(), vec![1.0, 1.0, -1.0]);
        let z = Portfolio::zeros(&m.tree);
        assert_eq!(apply(OperatorKind::A, &m.tree, &m.book, &z).to_flat(), vec![0.0; 3]);
    }

    #[test]
    fn block_examples() {
        let m = fixtures::coin2();
        let y = Adapted::from_values(&m.tree, 1, 1, vec![1.0, 0.0]).unwrap();
        let r = block_apply(OperatorKind::A, &m.tree, &m.book, 0, 1, &y).unwrap();
        assert_eq!(r.values(), &[1.5]);
        let x = Adapted::from_values(&m.tree, 0, 1, vec![1.0]).unwrap();
        let r = block_apply(OperatorKind::B, &m.tree, &m.book, 1, 0, &x).unwrap();
        assert_eq!(r.values(), &[1.0, -1.0]);
        // diagonal blocks reduce to M_a under independence
        let r = block_apply(OperatorKind::A, &m.tree, &m.book, 1, 1, &y).unwrap();
        assert_eq!(r.values(), &[2.0, 0.0]);
        assert!(block_apply(OperatorKind::A, &m.tree, &m.book, 0, 1, &x).is_err());
        assert!(block_apply(OperatorKind::A, &m.tree, &m.book, 2, 1, &y).is_err());
    }

    #[test]
    fn blocks_sum_to_apply() {
        let m = fixtures::coin2();
        let eta = pf(&m, &[0.3, -1.2, 2.5]);
        for kind in [OperatorKind::A, OperatorKind::B] {
            let full = apply(kind, &m.tree, &m.book, &eta);
            for k in 0..=1 {
                let mut acc = Adapted::zeros(&m.tree, k, 1);
                for l in 0..=1 {
                    acc.axpy(1.0, &block_apply(kind, &m.tree, &m.book, k, l, eta.stage(l)).unwrap());
                }
                for (a, b) in acc.values().iter().zip(full.stage(k).values()) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn representer_examples() {
        let m = fixtures::coin2();
        let rep = representers(&m.tree, &m.book, &m.config);
        assert_eq!(rep.m.to_flat(), vec![2.0, 1.0, 1.0]);
        assert_eq!(rep.l[1].to_flat(), vec![2.0, 1.0, 1.0]);
        // l_0(1) = 0 since the contract issued at 1 has no flow before depth 2
        assert_eq!(rep.l[0].stage(1).max_abs(), 0.0);
        let eta = pf(&m, &[0.7, 1.1, 0.4]);
        let mean = mean_functional(&m.tree, &m.book, &eta);
        assert!((m.tree.inner_product(&rep.m, &eta).unwrap() - mean).abs() < 1e-14);
    }

    #[test]
    fn dense_coin2() {
        let m = fixtures::coin2();
        let g = dense_matrix(OperatorKind::A, &m.tree, &m.book, DENSE_CAP).unwrap();
        // column 0 is the weighted image of the unit basis portfolio at the root
        let e0 = pf(&m, &[1.0, 0.0, 0.0]);
        let ae0 = to_weighted(&m.tree, &apply(OperatorKind::A, &m.tree, &m.book, &e0));
        for i in 0..3 {
            assert!((g[(i, 0)] - ae0[i]).abs() < 1e-14);
        }
        assert_eq!(g, g.transpose());
        let gb = dense_matrix(OperatorKind::B, &m.tree, &m.book, DENSE_CAP).unwrap();
        let z = to_weighted(&m.tree, &pf(&m, &[1.0, 1.0, 1.0]));
        let zv = nalgebra::DVector::from_vec(z);
        let quad = (zv.transpose() * &gb * &zv)[(0, 0)];
        assert!((quad - variance_b(&m.tree, &m.book, &pf(&m, &[1.0, 1.0, 1.0]))).abs() < 1e-13);
        assert!(matches!(
            dense_matrix(OperatorKind::A, &m.tree, &m.book, 2),
            Err(Error::DimensionOverflow { dim: 3, cap: 2 })
        ));
    }

    #[test]
    fn dense_single_node() {
        let nodes = vec![crate::tree::NodeSpec { id: 0, parent: None, depth: 0, prob: 1.0 }];
        let tree = ScenarioTree::new(&nodes, crate::tree::Dims::new(1, 0, 0)).unwrap();
        let mut book = ContractBook::zeros(&tree);
        // horizon 0 leaves no room for flows; the book is identically zero
        assert!(book.set(&tree, 0, 0, 0, 1.0).is_err());
        let g = dense_matrix(OperatorKind::A, &tree, &book, 10).unwrap();
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn weighted_round_trip() {
        let m = fixtures::coin2();
        let eta = pf(&m, &[0.3, 1.7, 2.9]);
        let back = from_weighted(&m.tree, &to_weighted(&m.tree, &eta)).unwrap();
        for (a, b) in back.to_flat().iter().zip(eta.to_flat()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
    }
}
