use serde::Serialize;

use super::kernel::{run_path, EngineSpec, NodeState};
use super::strategy::StrategyRule;
use crate::error::{Error, Result};
use crate::model::{MarketOracle, ScenarioConfig};

/// One common-noise path together with its conditional inner sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldPathSet {
    pub grid: Vec<f64>,
    pub k_inner: usize,
    pub n: usize,
    /// steps × n common-noise increments.
    pub b: Vec<f64>,
    /// (steps+1) × n
    pub x: Vec<f64>,
    /// (steps+1) × K, inner wealths.
    pub inner: Vec<f64>,
    /// Inner initial wealths and preferences.
    pub v0: Vec<f64>,
    pub c: Vec<f64>,
    /// (steps+1) × n, conditional mean invested amounts.
    pub z: Vec<f64>,
    /// Conditional mean wealth E[V | B].
    pub m: Vec<f64>,
    /// Conditional mean relative wealth E[V/v0 | B].
    pub m_relative: Vec<f64>,
    pub clamps: usize,
}

impl MeanFieldPathSet {
    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn inner_at(&self, k: usize) -> &[f64] {
        &self.inner[k * self.k_inner..(k + 1) * self.k_inner]
    }

    pub fn z_at(&self, k: usize) -> &[f64] {
        &self.z[k * self.n..(k + 1) * self.n]
    }
}

/// Simulates the common-noise system on noise path `path`: every inner
/// investor sees the same increments and differs only through its
/// initial wealth and preference draw.
pub fn simulate_mean_field_path(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    rule: &dyn StrategyRule,
    k_inner: usize,
    seed: u64,
    path: usize,
) -> Result<MeanFieldPathSet> {
    if k_inner < 2 {
        return Err(Error::Config(format!("k_inner = {k_inner}, at least 2 inner paths are required")));
    }
    let inner_cfg = config.with_investors(k_inner);
    let resolved = inner_cfg.resolve()?;
    let spec = EngineSpec { deflator: false, ..EngineSpec::from_config(&inner_cfg) };
    let n = config.n;
    let nodes = config.steps + 1;
    let mut out = MeanFieldPathSet {
        grid: (0..nodes).map(|k| spec.time(k)).collect(),
        k_inner,
        n,
        b: Vec::with_capacity(config.steps * n),
        x: Vec::with_capacity(nodes * n),
        inner: Vec::with_capacity(nodes * k_inner),
        v0: resolved.v0.clone(),
        c: resolved.c.clone(),
        z: Vec::with_capacity(nodes * n),
        m: Vec::with_capacity(nodes),
        m_relative: Vec::with_capacity(nodes),
        clamps: 0,
    };
    let start = NodeState::initial(&config.x0, &resolved.y0, &resolved.v0);
    let end = run_path(oracle, &spec, rule, &resolved.v0, start, config.steps, seed, path, |ev| {
        let s = ev.state;
        out.x.extend_from_slice(&s.x);
        out.inner.extend_from_slice(&s.v);
        out.z.extend_from_slice(&s.y);
        out.m.push(conditional_mean(&s.v));
        out.m_relative.push(s.peer_average(&resolved.v0));
        if let Some(dw) = ev.dw {
            out.b.extend_from_slice(dw);
        }
    })?;
    out.clamps = end.clamps;
    Ok(out)
}

/// Common-noise simulation on the first noise path.
pub fn simulate_mean_field(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    rule: &dyn StrategyRule,
    k_inner: usize,
    seed: u64,
) -> Result<MeanFieldPathSet> {
    simulate_mean_field_path(oracle, config, rule, k_inner, seed, 0)
}

/// Arithmetic mean across inner paths.
pub fn conditional_mean(values: &[f64]) -> f64 {
    crate::stats::mean(values)
}
