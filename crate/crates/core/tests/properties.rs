//! Structural invariants on random instances.

use proptest::prelude::*;
use reinsqp::gen::{model_from_seed, GenParams};
use reinsqp::operators::{apply, from_weighted, representers, to_weighted, OperatorKind};
use reinsqp::portfolio::{evaluate_constraints, mean_functional, ConstraintConfig};
use reinsqp::solver::Solver;
use reinsqp::{Adapted, Model, Portfolio, ScenarioTree};

fn model(seed: u64) -> Model {
    model_from_seed(seed, &GenParams::default())
}

fn portfolio(tree: &ScenarioTree, coords: &[f64]) -> Portfolio {
    let flat: Vec<f64> = (0..tree.portfolio_dim())
        .map(|i| coords[i % coords.len()] + 0.1 * ((i * 7) % 5) as f64)
        .collect();
    Portfolio::from_flat(tree, &flat).unwrap()
}

fn coords() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..12)
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tower_property(seed in 0u64..10_000, vals in coords(), s in 0usize..4, t in 0usize..4) {
        let m = model(seed);
        let h = m.tree.horizon();
        let (s, t) = (s.min(h), t.min(h));
        let (s, t) = (s.min(t), s.max(t));
        let x = Adapted::from_fn(&m.tree, h, 2, |pos, i| vals[(pos + i) % vals.len()] * (pos as f64 + 1.0).ln());
        let inner = m.tree.conditional_expectation(&x, t).unwrap();
        let twice = m.tree.conditional_expectation(&inner, s).unwrap();
        let once = m.tree.conditional_expectation(&x, s).unwrap();
        for (a, b) in twice.values().iter().zip(once.values()) {
            prop_assert!(close(*a, *b, b.abs()));
        }
        // expectations agree at every level
        let e0 = m.tree.expectation(&x).unwrap();
        let e1 = m.tree.expectation(&inner).unwrap();
        for (a, b) in e0.iter().zip(&e1) {
            prop_assert!(close(*a, *b, b.abs()));
        }
    }

    #[test]
    fn operators_symmetric_and_ordered(seed in 0u64..10_000, a in coords(), b in coords()) {
        let m = model(seed);
        let x = portfolio(&m.tree, &a);
        let y = portfolio(&m.tree, &b);
        for kind in [OperatorKind::A, OperatorKind::B] {
            let xy = m.tree.inner_product(&x, &apply(kind, &m.tree, &m.book, &y)).unwrap();
            let yx = m.tree.inner_product(&y, &apply(kind, &m.tree, &m.book, &x)).unwrap();
            prop_assert!(close(xy, yx, xy.abs()));
        }
        let qa = m.tree.inner_product(&x, &apply(OperatorKind::A, &m.tree, &m.book, &x)).unwrap();
        let qb = m.tree.inner_product(&x, &apply(OperatorKind::B, &m.tree, &m.book, &x)).unwrap();
        let mean = mean_functional(&m.tree, &m.book, &x);
        // A − B is the squared mean
        prop_assert!(close(qa - qb, mean * mean, qa.abs()));
    }

    #[test]
    fn representers_match_functionals(seed in 0u64..10_000, a in coords()) {
        let m = model(seed);
        let eta = portfolio(&m.tree, &a);
        let reps = representers(&m.tree, &m.book, &m.config);
        let mean = mean_functional(&m.tree, &m.book, &eta);
        let via_rep = m.tree.inner_product(&reps.m, &eta).unwrap();
        prop_assert!(close(mean, via_rep, mean.abs()));
        let rep = evaluate_constraints(&m.tree, &m.book, &eta, &m.config);
        for (t, l) in reps.l.iter().enumerate() {
            // slack = (l_t, η) − c(t)·K0
            let v = m.tree.inner_product(l, &eta).unwrap() - m.config.c[t] * m.config.k0;
            prop_assert!(close(v, rep.profitability_slack[t], v.abs()));
        }
    }

    #[test]
    fn profitability_slack_scales_without_equity(seed in 0u64..10_000, a in coords(), scale in 1.0f64..5.0) {
        let m = model(seed);
        let cfg = ConstraintConfig { k0: 0.0, ..m.config.clone() };
        let eta = portfolio(&m.tree, &a);
        let r1 = evaluate_constraints(&m.tree, &m.book, &eta, &cfg);
        let r2 = evaluate_constraints(&m.tree, &m.book, &eta.scaled(scale), &cfg);
        for (x, y) in r1.profitability_slack.iter().zip(&r2.profitability_slack) {
            prop_assert!(close(scale * x, *y, y.abs()));
        }
    }

    #[test]
    fn weighted_coordinates_round_trip(seed in 0u64..10_000, a in coords()) {
        let m = model(seed);
        let eta = portfolio(&m.tree, &a);
        let z = to_weighted(&m.tree, &eta);
        let n2: f64 = z.iter().map(|v| v * v).sum();
        prop_assert!(close(n2, m.tree.norm(&eta).powi(2), n2));
        let back = from_weighted(&m.tree, &z).unwrap();
        for (x, y) in back.to_flat().iter().zip(eta.to_flat()) {
            prop_assert!(close(*x, y, y.abs()));
        }
    }

    #[test]
    fn solve_inverts_apply(seed in 0u64..10_000, a in coords(), shift in -2.0f64..0.0) {
        let m = model(seed);
        let eta = portfolio(&m.tree, &a);
        for kind in [OperatorKind::A, OperatorKind::B] {
            let mut xi = apply(kind, &m.tree, &m.book, &eta);
            xi.axpy(-shift, &eta);
            let out = Solver::new(kind, &m.tree, &m.book, shift).unwrap().solve(&xi).unwrap();
            let mut d = out.eta.clone();
            d.axpy(-1.0, &eta);
            prop_assert!(m.tree.norm(&d) <= 1e-8 * m.tree.norm(&eta));
        }
    }
}
