#![allow(dead_code)]

use relarb::model::{Law, MarketSpec, PerInvestor, ScenarioConfig, SolverConfig, StrategySpec, YMode};

pub fn diag(n: usize, s: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { s } else { 0.0 }).collect()).collect()
}

/// Constant market with β = σ²θ-type drift chosen per stock.
pub fn constant(n: usize, investors: usize, beta: f64, vol: f64, steps: usize) -> ScenarioConfig {
    ScenarioConfig {
        schema_version: 1,
        n,
        investors,
        horizon: 1.0,
        steps,
        delta: 0.5,
        c: PerInvestor::Explicit(vec![0.0]),
        v0: PerInvestor::Explicit(vec![1.0]),
        x0: vec![1.0; n],
        y0: None,
        seed: 1,
        market: MarketSpec::Constant { beta: vec![beta; n], sigma: diag(n, vol), gamma: None, tau: None },
        y_mode: YMode::Endogenous,
        strategy: StrategySpec::Market,
        solver: SolverConfig::default(),
    }
}

/// Volatility-stabilized market with frozen invested capital Z = 1.
/// (1+ζ)·Z·X(0) ≥ 1 keeps stocks away from zero under the real-world measure.
pub fn vsm(n: usize, investors: usize, zeta: f64, steps: usize) -> ScenarioConfig {
    let mut cfg = constant(n, investors, 0.0, 0.0, steps);
    cfg.market = MarketSpec::VolatilityStabilized { zeta };
    cfg.x0 = vec![0.75; n];
    cfg.y0 = Some(vec![1.0; n]);
    cfg.y_mode = YMode::Frozen;
    cfg.solver.log_increment_cap = Some(1.0);
    cfg
}

pub fn uniform(low: f64, high: f64) -> PerInvestor {
    PerInvestor::Law(Law::Uniform { low, high })
}
