//! Multiperiod mean–variance underwriting on finite scenario trees.
//!
//! The crate is organised bottom-up:
//!
//! * [`tree`] — scenario trees, adapted variables, the portfolio space `H`;
//! * [`contracts`] — unit-contract utilities, hypothesis checks, moment tables;
//! * [`portfolio`] — utilities of a portfolio and constraint evaluation;
//! * [`operators`] — the operators `A`, `B`, their blocks and the representers `m`, `l_t`;
//! * [`solver`] — structured elimination for `(C - λ)η = ξ`, spectral sets;
//! * [`qp`] — small dense QP engines (nonnegative projections, dual active set);
//! * [`multipliers`] — deterministic and first approximations, iteration, KKT checks;
//! * [`oracle`] — dense brute-force reference;
//! * [`pipeline`] — end-to-end solves with fallbacks and serializable reports.

pub mod contracts;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod gen;
pub mod linalg;
pub mod multipliers;
pub mod operators;
pub mod oracle;
pub mod pipeline;
pub mod portfolio;
pub mod qp;
pub mod scenario;
pub mod solver;
pub mod tree;

pub use contracts::{ContractBook, HypothesisReport, MomentTables};
pub use error::{Error, Result};
pub use operators::{OperatorKind, Representers};
pub use portfolio::{ConstraintConfig, ConstraintReport};
pub use scenario::{Model, Scenario};
pub use tree::{Adapted, Dims, NodeSpec, Portfolio, ScenarioTree};
