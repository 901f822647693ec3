//! Portfolio accounting: utilities, period results, constraint evaluation.

use serde::{Deserialize, Serialize};

use crate::contracts::ContractBook;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::tree::{Adapted, Portfolio, ScenarioTree};

/// Which optimization problem is being solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    /// Minimize the variance subject to a floor on the expected final utility.
    MinVariance,
    /// Minimize the second moment with the expected final utility pinned.
    FixedMean,
    /// Maximize the expected final utility under a variance cap.
    MaxMean,
}

impl Form {
    /// The quadratic form minimized (directly or inside the bisection).
    pub fn kind(self) -> crate::operators::OperatorKind {
        match self {
            Form::FixedMean => crate::operators::OperatorKind::A,
            _ => crate::operators::OperatorKind::B,
        }
    }
}

/// Absolute tolerance on constraint slacks.
pub const TOL_FEAS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ConstraintConfig {
    /// Profitability rates `c(t)`, `t = 0..horizon-1`.
    pub c: Vec<f64>,
    /// Floor on the expected final utility.
    pub e: f64,
    /// Variance cap for the max-mean form.
    pub sigma2: Option<f64>,
    /// Initial equity.
    pub k0: f64,
}

impl ConstraintConfig {
    /// No profitability requirement, zero floor, zero equity.
    pub fn relaxed(horizon: usize) -> Self {
        Self {
            c: vec![0.0; horizon],
            e: 0.0,
            sigma2: None,
            k0: 0.0,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.c.len() != horizon {
            return Err(Error::Input(format!(
                "expected {} profitability rates, got {}",
                horizon,
                self.c.len()
            )));
        }
        if self.c.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Input("profitability rates must be finite and nonnegative".into()));
        }
        if !self.e.is_finite() || self.e < 0.0 {
            return Err(Error::Input("expected-utility floor must be nonnegative".into()));
        }
        if !self.k0.is_finite() || self.k0 < 0.0 {
            return Err(Error::Input("initial equity must be nonnegative".into()));
        }
        if let Some(s) = self.sigma2 {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Input("variance cap must be positive".into()));
            }
        }
        Ok(())
    }

    /// Right-hand sides `e_t` of `(l_t, η) ≥ e_t`: `c(t)·K0` for `t < horizon`, then `e`.
    pub fn levels(&self) -> Vec<f64> {
        self.c.iter().map(|c| c * self.k0).chain(std::iter::once(self.e)).collect()
    }
}

/// `U(t, η)` at depth `t`.
pub fn utility(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio, t: usize) -> Result<Adapted> {
    if t > tree.horizon() {
        return Err(Error::OutOfRange(format!("time {} beyond horizon {}", t, tree.horizon())));
    }
    tree.check_portfolio(eta)?;
    Ok(utility_unchecked(tree, book, eta, t))
}

pub(crate) fn utility_unchecked(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio, t: usize) -> Adapted {
    let mut out = Adapted::zeros(tree, t, 1);
    if t == 0 {
        return out;
    }
    for k in 0..t.min(tree.t_bar() + 1) {
        let anc = tree.ancestor_map(t, k);
        let (u, x) = (book.utility(k, t), eta.stage(k));
        let vals = out.values_mut();
        for (pos, a) in anc.iter().enumerate() {
            vals[pos] += dot(x.at(*a), u.at(pos));
        }
    }
    out
}

/// `U(∞, η) = U(horizon, η)` on the leaves.
pub fn final_utility_rv(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio) -> Adapted {
    utility_unchecked(tree, book, eta, tree.horizon())
}

/// `(ΔU)(t+1, η) = U(t+1, η) − U(t, η)` at depth `t + 1`.
pub fn delta_utility(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio, t: usize) -> Result<Adapted> {
    if t >= tree.horizon() {
        return Err(Error::OutOfRange(format!("period {} has no successor", t)));
    }
    let mut next = utility(tree, book, eta, t + 1)?;
    let prev = tree.lift_unchecked(&utility_unchecked(tree, book, eta, t), t + 1);
    next.axpy(-1.0, &prev);
    Ok(next)
}

pub fn mean_functional(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio) -> f64 {
    tree.expect_unchecked(&final_utility_rv(tree, book, eta))[0]
}

/// `a(η) = E(U(∞,η)²)`.
pub fn second_moment_a(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio) -> f64 {
    let u = final_utility_rv(tree, book, eta);
    tree.layer_probs(tree.horizon())
        .iter()
        .zip(u.values())
        .map(|(p, x)| p * x * x)
        .sum()
}

/// `b(η) = Var(U(∞,η))`, computed two-pass.
pub fn variance_b(tree: &ScenarioTree, book: &ContractBook, eta: &Portfolio) -> f64 {
    let u = final_utility_rv(tree, book, eta);
    let probs = tree.layer_probs(tree.horizon());
    let mean: f64 = probs.iter().zip(u.values()).map(|(p, x)| p * x).sum();
    probs.iter().zip(u.values()).map(|(p, x)| p * (x - mean).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ConstraintReport {
    /// `E(ΔU(t+1)) − c(t)(K0 + E U(t))` for `t = 0..horizon-1`.
    pub profitability_slack: Vec<f64>,
    pub mean: f64,
    /// `E U(∞) − e`.
    pub mean_slack: f64,
    pub variance: f64,
    /// `σ² − b(η)` when a cap is configured.
    pub variance_slack: Option<f64>,
    /// Smallest underwriting level over all stages, nodes and contracts.
    pub min_eta: f64,
    pub feasible_min_variance: bool,
    pub feasible_fixed_mean: bool,
    pub feasible_max_mean: bool,
}

pub fn evaluate_constraints(
    tree: &ScenarioTree,
    book: &ContractBook,
    eta: &Portfolio,
    config: &ConstraintConfig,
) -> ConstraintReport {
    evaluate_constraints_tol(tree, book, eta, config, TOL_FEAS)
}

/// [`evaluate_constraints`] with an explicit absolute feasibility tolerance.
pub fn evaluate_constraints_tol(
    tree: &ScenarioTree,
    book: &ContractBook,
    eta: &Portfolio,
    config: &ConstraintConfig,
    tol_feas: f64,
) -> ConstraintReport {
    let h = tree.horizon();
    let us: Vec<f64> = (0..=h)
        .map(|t| tree.expect_unchecked(&utility_unchecked(tree, book, eta, t))[0])
        .collect();
    let profitability_slack: Vec<f64> = (0..h)
        .map(|t| (us[t + 1] - us[t]) - config.c[t] * (config.k0 + us[t]))
        .collect();
    let mean = us[h];
    let variance = variance_b(tree, book, eta);
    let mean_slack = mean - config.e;
    let variance_slack = config.sigma2.map(|s| s - variance);
    let min_eta = eta.min_component();

    let c3 = profitability_slack.iter().all(|s| *s >= -tol_feas);
    let c6 = min_eta >= -tol_feas;
    ConstraintReport {
        feasible_min_variance: c3 && c6 && mean_slack >= -tol_feas,
        feasible_fixed_mean: c3 && c6 && mean_slack.abs() <= tol_feas,
        feasible_max_mean: c3
            && c6
            && variance_slack.is_some_and(|s| s >= -tol_feas * config.sigma2.unwrap_or(1.0).max(1.0)),
        profitability_slack,
        mean,
        mean_slack,
        variance,
        variance_slack,
        min_eta,
    }
}
