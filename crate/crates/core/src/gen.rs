//! Random instances for tests, benches and the CLI's randomized checks.
//!
//! Trees are products of independent per-level moves. The final utility of
//! the contracts issued at `k` depends only on the moves of a set of levels
//! strictly after `k`, the sets being disjoint across issue times; this makes
//! the independence hypotheses hold exactly. Interim utilities interpolate the
//! conditional final utility and add a little adapted noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contracts::{check_h2, ContractBook, MomentTables, TOL_PD_REL};
use crate::linalg::min_eigenvalue;
use crate::operators::representers;
use crate::portfolio::{mean_functional, ConstraintConfig};
use crate::scenario::Model;
use crate::tree::{Dims, NodeSpec, Portfolio, ScenarioTree};

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub max_n: usize,
    pub max_t_bar: usize,
    pub max_t: usize,
    pub max_branching: usize,
    /// Upper bound on the portfolio dimension.
    pub max_dim: usize,
    /// Amplitude of the noise added to interim utilities.
    pub noise: f64,
    /// Draw final utilities freely per leaf instead of from the move structure
    /// (the independence hypotheses then generally fail).
    pub unstructured: bool,
    /// Largest profitability rate.
    pub max_c: f64,
    /// Floor on the smallest covariance eigenvalue of each final utility,
    /// relative to its second moment; keeps random instances away from
    /// near-singular operators.
    pub pd_margin: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_n: 3,
            max_t_bar: 3,
            max_t: 2,
            max_branching: 3,
            max_dim: 200,
            noise: 0.05,
            unstructured: false,
            max_c: 0.1,
            pd_margin: 1e-2,
        }
    }
}

pub fn model_from_seed(seed: u64, params: &GenParams) -> Model {
    random_model(&mut ChaCha8Rng::seed_from_u64(seed), params)
}

struct Shape {
    n: usize,
    t_bar: usize,
    t: usize,
    branching: Vec<usize>,
    /// Levels (1-based depths) driving the final utility of each issue time.
    drivers: Vec<Vec<usize>>,
}

fn layer_sizes(branching: &[usize]) -> Vec<usize> {
    let mut sizes = vec![1];
    for b in branching {
        sizes.push(sizes.last().unwrap() * b);
    }
    sizes
}

fn draw_shape(rng: &mut impl Rng, p: &GenParams) -> Option<Shape> {
    let n = rng.random_range(1..=p.max_n.max(1));
    let t_bar = rng.random_range(0..=p.max_t_bar);
    let t = rng.random_range(1..=p.max_t.max(1));
    let h = t_bar + t;
    let branching: Vec<usize> = (0..h).map(|_| rng.random_range(2..=p.max_branching.max(2))).collect();
    let sizes = layer_sizes(&branching);
    let dim: usize = n * sizes[..=t_bar].iter().sum::<usize>();
    if dim > p.max_dim || sizes[h] > 20 * p.max_dim {
        return None;
    }
    // later issue times have fewer levels to choose from, so they pick first
    let mut used = vec![false; h + 1];
    let mut drivers = vec![Vec::new(); t_bar + 1];
    for k in (0..=t_bar).rev() {
        let mut outcomes = 1;
        for s in k + 1..=h {
            if outcomes > n {
                break;
            }
            if !used[s] {
                used[s] = true;
                drivers[k].push(s);
                outcomes *= branching[s - 1];
            }
        }
        if outcomes <= n {
            return None;
        }
    }
    Some(Shape {
        n,
        t_bar,
        t,
        branching,
        drivers,
    })
}

fn level_probs(rng: &mut impl Rng, b: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..b).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Draws one instance; shapes that cannot satisfy the positivity hypothesis
/// or the dimension cap are redrawn.
pub fn random_model(rng: &mut impl Rng, p: &GenParams) -> Model {
    loop {
        let Some(shape) = draw_shape(rng, p) else { continue };
        if let Some(m) = build(rng, p, &shape) {
            return m;
        }
    }
}

fn build(rng: &mut impl Rng, p: &GenParams, s: &Shape) -> Option<Model> {
    let h = s.t_bar + s.t;
    let probs: Vec<Vec<f64>> = s.branching.iter().map(|b| level_probs(rng, *b)).collect();
    let sizes = layer_sizes(&s.branching);
    let total: usize = sizes.iter().sum();

    // moves[d][pos]: the move sequence of node `pos` on layer d (mixed radix)
    let mut moves: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new()]];
    for d in 1..=h {
        let prev = &moves[d - 1];
        let mut layer = Vec::with_capacity(sizes[d]);
        for m in prev {
            for c in 0..s.branching[d - 1] {
                let mut v = m.clone();
                v.push(c);
                layer.push(v);
            }
        }
        moves.push(layer);
    }

    // scrambled ids, parents listed by id
    let mut ids: Vec<i64> = (0..total as i64).map(|i| 3 * i + 10).collect();
    ids.shuffle(rng);
    let mut nodes = Vec::with_capacity(total);
    let mut next = 0;
    let mut layer_ids: Vec<Vec<i64>> = Vec::new();
    for d in 0..=h {
        let mut lid = Vec::with_capacity(sizes[d]);
        for pos in 0..sizes[d] {
            let id = ids[next];
            next += 1;
            let (parent, prob) = if d == 0 {
                (None, 1.0)
            } else {
                let b = s.branching[d - 1];
                (Some(layer_ids[d - 1][pos / b]), probs[d - 1][pos % b])
            };
            nodes.push(NodeSpec {
                id,
                parent,
                depth: d,
                prob,
            });
            lid.push(id);
        }
        layer_ids.push(lid);
    }
    nodes.shuffle(rng);
    let tree = ScenarioTree::new(&nodes, Dims::new(s.n, s.t_bar, s.t)).ok()?;

    // canonical position of each generated node
    let mut canon: Vec<Vec<usize>> = Vec::new();
    for (d, lid) in layer_ids.iter().enumerate() {
        canon.push(lid.iter().map(|id| tree.locate(*id).expect("node").1).collect());
        debug_assert!(canon[d].len() == sizes[d]);
    }

    // final utility tables: per issue time, a value per driver outcome
    let mut fin: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; s.n]; sizes[h]]; s.t_bar + 1];
    for k in 0..=s.t_bar {
        let outcomes: usize = s.drivers[k].iter().map(|l| s.branching[l - 1]).product();
        let table: Vec<Vec<f64>> = (0..outcomes)
            .map(|_| (0..s.n).map(|_| rng.random_range(-1.0..3.0)).collect())
            .collect();
        for (gen_pos, mv) in moves[h].iter().enumerate() {
            let leaf = canon[h][gen_pos];
            fin[k][leaf] = if p.unstructured {
                (0..s.n).map(|_| rng.random_range(-1.0..3.0)).collect()
            } else {
                let mut idx = 0;
                for l in &s.drivers[k] {
                    idx = idx * s.branching[l - 1] + mv[l - 1];
                }
                table[idx].clone()
            };
        }
    }

    let mut book = ContractBook::from_fn(&tree, |k, t, pos, i| if t == h { fin[k][pos][i] } else { 0.0 });
    for k in 0..=s.t_bar {
        for t in k + 1..h {
            let cond = tree
                .conditional_expectation(book.final_utility(k).ok()?, t)
                .ok()?;
            let w = (t - k) as f64 / (h - k) as f64;
            let u = book.utility_mut(k, t);
            for (v, c) in u.values_mut().iter_mut().zip(cond.values()) {
                *v = w * c + p.noise * rng.random_range(-1.0..1.0);
            }
        }
    }
    if !p.unstructured {
        if check_h2(&tree, &book, TOL_PD_REL).iter().any(|r| !r.ok) {
            return None;
        }
        // spread relative to the second moment, not just the covariance itself
        let mom = MomentTables::new(&tree, &book);
        if mom.m_b.iter().zip(&mom.m_a).any(|(b, a)| min_eigenvalue(b) < p.pd_margin * a.trace()) {
            return None;
        }
    }

    let config = draw_config(rng, p, &tree, &book);
    Some(Model { tree, book, config })
}

fn draw_config(rng: &mut impl Rng, p: &GenParams, tree: &ScenarioTree, book: &ContractBook) -> ConstraintConfig {
    let h = tree.horizon();
    let c: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..=p.max_c)).collect();
    let mut cfg = ConstraintConfig {
        c,
        e: 0.0,
        sigma2: None,
        k0: 0.0,
    };
    let ones = Portfolio::deterministic(tree, &vec![vec![1.0; tree.n_contracts()]; tree.t_bar() + 1]).expect("shape");
    let reps = representers(tree, book, &cfg);
    // equity small enough that the all-ones portfolio keeps half its profitability margin
    let k0 = reps
        .l
        .iter()
        .zip(&cfg.c)
        .filter(|(_, c)| **c > 0.0)
        .map(|(l, c)| 0.5 * tree.inner_unchecked(l, &ones) / c)
        .fold(10.0, f64::min)
        .max(0.0);
    cfg.k0 = k0 * rng.random_range(0.0..1.0);
    let mean = mean_functional(tree, book, &ones).max(0.0);
    cfg.e = mean * rng.random_range(0.3..1.2);
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{check_hypotheses, TOL_MOM};

    #[test]
    fn instances_satisfy_hypotheses() {
        let p = GenParams::default();
        for seed in 0..30 {
            let m = model_from_seed(seed, &p);
            assert!(m.tree.portfolio_dim() <= p.max_dim);
            let rep = check_hypotheses(&m.tree, &m.book, TOL_MOM, TOL_PD_REL);
            assert!(rep.all_ok(), "seed {}: {:?}", seed, rep.failures());
            assert!(m.config.validate(m.tree.horizon()).is_ok());
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let p = GenParams::default();
        let a = model_from_seed(7, &p).to_scenario();
        let b = model_from_seed(7, &p).to_scenario();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn unstructured_instances_parse() {
        let p = GenParams {
            unstructured: true,
            ..GenParams::default()
        };
        for seed in 0..5 {
            let m = model_from_seed(seed, &p);
            assert!(m.to_scenario().into_model().is_ok());
        }
    }
}
