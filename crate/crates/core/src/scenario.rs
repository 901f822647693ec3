//! Scenario files.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contracts::ContractBook;
use crate::error::{Error, Result};
use crate::portfolio::ConstraintConfig;
use crate::tree::{Dims, NodeSpec, ScenarioTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct UtilityEntry {
    pub issue_time: usize,
    /// Zero-based contract index.
    pub contract: usize,
    pub node: i64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSpec {
    pub c: Vec<f64>,
    pub e: f64,
    #[serde(default)]
    pub sigma2: Option<f64>,
}

/// On-disk scenario format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T_bar")]
    pub t_bar: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K0")]
    pub k0: f64,
    pub nodes: Vec<NodeSpec>,
    pub utilities: Vec<UtilityEntry>,
    pub constraints: ConstraintsSpec,
}

/// A validated problem instance.
#[derive(Clone, Debug)]
pub struct Model {
    pub tree: ScenarioTree,
    pub book: ContractBook,
    pub config: ConstraintConfig,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.n, self.t_bar, self.t)
    }

    pub fn into_model(&self) -> Result<Model> {
        let tree = ScenarioTree::new(&self.nodes, self.dims())?;
        let mut book = ContractBook::zeros(&tree);
        let mut seen = HashSet::new();
        for u in &self.utilities {
            if !seen.insert((u.issue_time, u.contract, u.node)) {
                return Err(Error::Input(format!(
                    "duplicate utility entry (issue_time {}, contract {}, node {})",
                    u.issue_time, u.contract, u.node
                )));
            }
            book.set(&tree, u.issue_time, u.contract, u.node, u.value)?;
        }
        let config = ConstraintConfig {
            c: self.constraints.c.clone(),
            e: self.constraints.e,
            sigma2: self.constraints.sigma2,
            k0: self.k0,
        };
        config.validate(tree.horizon())?;
        Ok(Model { tree, book, config })
    }
}

impl Model {
    /// Serializes back to the file format, listing only nonzero utilities.
    pub fn to_scenario(&self) -> Scenario {
        let tree = &self.tree;
        let dims = tree.dims();
        let mut nodes = Vec::with_capacity(tree.n_nodes());
        for t in 0..=dims.horizon {
            for (pos, id) in tree.layer_ids(t).iter().enumerate() {
                nodes.push(NodeSpec {
                    id: *id,
                    parent: tree.parent_id(*id).expect("known id"),
                    depth: t,
                    prob: tree.cond_probs(t)[pos],
                });
            }
        }
        let mut utilities = Vec::new();
        for k in 0..=dims.t_bar {
            for t in k + 1..=dims.horizon {
                let u = self.book.utility(k, t);
                for (pos, id) in tree.layer_ids(t).iter().enumerate() {
                    for (i, v) in u.at(pos).iter().enumerate() {
                        if *v != 0.0 {
                            utilities.push(UtilityEntry {
                                issue_time: k,
                                contract: i,
                                node: *id,
                                value: *v,
                            });
                        }
                    }
                }
            }
        }
        Scenario {
            n: dims.n,
            t_bar: dims.t_bar,
            t: dims.t(),
            k0: self.config.k0,
            nodes,
            utilities,
            constraints: ConstraintsSpec {
                c: self.config.c.clone(),
                e: self.config.e,
                sigma2: self.config.sigma2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn round_trip() {
        let m = fixtures::coin2();
        let s = m.to_scenario();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let m2 = back.into_model().unwrap();
        assert_eq!(m2.book, m.book);
        assert_eq!(m2.config, m.config);
    }

    #[test]
    fn rejects_bad_input() {
        let m = fixtures::coin2();
        let mut s = m.to_scenario();
        s.utilities.push(s.utilities[0].clone());
        assert!(matches!(s.into_model(), Err(Error::Input(_))));

        let mut s = m.to_scenario();
        s.constraints.c.pop();
        assert!(s.into_model().is_err());

        let mut s = m.to_scenario();
        s.nodes[1].prob = 0.6;
        assert!(matches!(s.into_model(), Err(Error::InvalidTree(_))));

        assert!(Scenario::from_json("{\"N\": 1}").is_err());
    }
}
