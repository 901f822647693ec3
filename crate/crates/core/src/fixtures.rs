//! The two-coin fixture used throughout the tests and docs.
//!
//! One contract, issue times 0 and 1, horizon 2. The first coin decides the
//! subtree (`a` = 1, `b` = 2); the second decides up/down within it. The
//! contract issued at 0 pays 3 on subtree `a` and 1 on `b`; the one issued at 1
//! pays 2 after an up move and 0 after a down move. Interim utilities vanish.
//!
//! Node ids: root 0; `a` 1, `b` 2; `a`-up 3, `a`-down 4, `b`-up 5, `b`-down 6.

use crate::contracts::ContractBook;
use crate::portfolio::ConstraintConfig;
use crate::scenario::Model;
use crate::tree::{Dims, NodeSpec, ScenarioTree};

pub fn coin2_nodes() -> Vec<NodeSpec> {
    let node = |id, parent, depth, prob| NodeSpec { id, parent, depth, prob };
    vec![
        node(0, None, 0, 1.0),
        node(1, Some(0), 1, 0.5),
        node(2, Some(0), 1, 0.5),
        node(3, Some(1), 2, 0.5),
        node(4, Some(1), 2, 0.5),
        node(5, Some(2), 2, 0.5),
        node(6, Some(2), 2, 0.5),
    ]
}

/// Final utility of the contract issued at `k` on the leaf at canonical position `leaf`.
pub fn coin2_book_value(k: usize, leaf: usize) -> f64 {
    match k {
        0 => [3.0, 3.0, 1.0, 1.0][leaf],
        _ => [2.0, 0.0, 2.0, 0.0][leaf],
    }
}

/// coin2 with `c ≡ 0`, `K0 = 0`, `e = 3`.
pub fn coin2() -> Model {
    let tree = ScenarioTree::new(&coin2_nodes(), Dims::new(1, 1, 1)).expect("coin2 tree");
    let book = ContractBook::from_fn(&tree, |k, t, pos, _| if t == 2 { coin2_book_value(k, pos) } else { 0.0 });
    Model {
        config: ConstraintConfig {
            c: vec![0.0, 0.0],
            e: 3.0,
            sigma2: None,
            k0: 0.0,
        },
        tree,
        book,
    }
}
