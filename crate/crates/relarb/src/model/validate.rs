use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::markets::builtin_market;
use super::oracle::{Coefficients, MarketOracle, MarketState};
use crate::error::Result;

/// Outcome of a single check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub name: String,
    pub hard: bool,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub message: String,
}

/// Nondegeneracy and diversity diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_market_weight: f64,
    pub alpha_min_eigenvalue: f64,
    pub alpha_max_eigenvalue: f64,
    pub sigma_condition: f64,
}

impl Diagnostics {
    pub fn empty() -> Self {
        Diagnostics {
            max_market_weight: 0.0,
            alpha_min_eigenvalue: f64::INFINITY,
            alpha_max_eigenvalue: 0.0,
            sigma_condition: 1.0,
        }
    }

    /// Folds one evaluated state into the running bounds.
    pub fn observe(&mut self, x: &[f64], coef: &Coefficients) {
        let total: f64 = x.iter().sum();
        for &xi in x {
            self.max_market_weight = self.max_market_weight.max(xi / total);
        }
        let eig = SymmetricEigen::new(coef.alpha()).eigenvalues;
        self.alpha_min_eigenvalue = self.alpha_min_eigenvalue.min(eig.min());
        self.alpha_max_eigenvalue = self.alpha_max_eigenvalue.max(eig.max());
        self.sigma_condition = self.sigma_condition.max(coef.sigma_condition());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub feasible: bool,
    pub checks: Vec<CheckVerdict>,
    pub diagnostics: Diagnostics,
    pub messages: Vec<String>,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&CheckVerdict> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Preference sum (1−δ)·(1/N)·Σ e^{c_ℓ}/v^ℓ, or without 1/N when `literal`.
pub fn preference_sum(delta: f64, c: &[f64], v0: &[f64], literal: bool) -> f64 {
    let s: f64 = c.iter().zip(v0).map(|(c, v)| c.exp() / v).sum();
    let norm = if literal { 1.0 } else { 1.0 / c.len() as f64 };
    (1.0 - delta) * norm * s
}

/// Runs the hard preference check, the no-arbitrage advisory and the
/// initial-state diagnostics. Structural errors abort before any check.
pub fn validate_scenario(config: &ScenarioConfig) -> Result<ValidationReport> {
    let resolved = config.resolve()?;
    let oracle = builtin_market(&config.market, config.n)?;
    validate_with(config, oracle.as_ref(), &resolved.c, &resolved.v0, &resolved.y0)
}

pub fn validate_with(
    config: &ScenarioConfig,
    oracle: &dyn MarketOracle,
    c: &[f64],
    v0: &[f64],
    y0: &[f64],
) -> Result<ValidationReport> {
    let literal = config.solver.ccond_literal;
    let mut checks = Vec::new();
    let mut messages = Vec::new();

    let s = preference_sum(config.delta, c, v0, literal);
    let form = if literal { "(1-δ)·Σ e^c/v" } else { "(1-δ)·(1/N)·Σ e^c/v" };
    checks.push(CheckVerdict {
        name: "preference_condition".into(),
        hard: true,
        passed: s < 1.0,
        value: s,
        threshold: 1.0,
        message: format!("preference condition {form} = {s:.6} must be < 1"),
    });

    let total: f64 = config.x0.iter().sum();
    let level = |v: f64| v.ln() - (config.delta * total + 1.0 - config.delta).ln();
    let satisfied = c.iter().zip(v0).filter(|(c, v)| **c >= level(**v)).count();
    let worst = c
        .iter()
        .zip(v0)
        .map(|(c, v)| c - level(*v))
        .fold(f64::INFINITY, f64::min);
    checks.push(CheckVerdict {
        name: "martingale_no_arbitrage_regime".into(),
        hard: false,
        passed: satisfied == c.len(),
        value: worst,
        threshold: 0.0,
        message: format!(
            "{satisfied}/{} investors satisfy c ≥ log v − log(δ·x + 1 − δ) with x the total initial capitalization {total}",
            c.len()
        ),
    });
    messages.push("total initial capitalization stands in for the level v of the no-arbitrage bound".into());

    let mut diagnostics = Diagnostics::empty();
    let mut coef = Coefficients::zeros(config.n);
    let state = MarketState { t: 0.0, x: &config.x0, y: y0, m: 1.0 };
    match oracle.evaluate(&state, &mut coef) {
        Ok(()) => {
            diagnostics.observe(&config.x0, &coef);
            let cond = diagnostics.sigma_condition;
            checks.push(CheckVerdict {
                name: "nondegeneracy_at_start".into(),
                hard: false,
                passed: cond.is_finite() && cond < super::oracle::COND_LIMIT,
                value: diagnostics.alpha_min_eigenvalue,
                threshold: 0.0,
                message: format!("σ condition estimate {cond:.3e} at x0"),
            });
        }
        Err(e) => messages.push(format!("coefficients undefined at x0: {e}")),
    }
    let feasible = checks.iter().filter(|c| c.hard).all(|c| c.passed);
    if !feasible {
        messages.push(format!("infeasible: preference condition {form} = {s:.6} is not below 1"));
    }
    Ok(ValidationReport { feasible, checks, diagnostics, messages })
}
