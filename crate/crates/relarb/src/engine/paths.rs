use rayon::prelude::*;
use serde::Serialize;

use super::kernel::{run_path, EngineSpec, NodeState};
use super::strategy::StrategyRule;
use crate::error::{Error, Result};
use crate::model::{Diagnostics, MarketOracle, MarketState, Coefficients, ScenarioConfig, YMode};

/// One recorded trajectory of the N-particle system. Arrays are node-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticlePath {
    pub n: usize,
    pub investors: usize,
    /// (steps+1) × n
    pub x: Vec<f64>,
    /// (steps+1) × N
    pub v: Vec<f64>,
    /// (steps+1) × n
    pub y: Vec<f64>,
    /// steps × n
    pub dw: Vec<f64>,
    /// steps × n, empty unless Y is exogenous
    pub dw_y: Vec<f64>,
    /// (steps+1) × N × n
    pub strategies: Vec<f64>,
    pub clamps: usize,
}

impl ParticlePath {
    pub fn nodes(&self) -> usize {
        self.x.len() / self.n
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn v_at(&self, k: usize) -> &[f64] {
        &self.v[k * self.investors..(k + 1) * self.investors]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.n..(k + 1) * self.n]
    }

    pub fn dw_at(&self, k: usize) -> &[f64] {
        &self.dw[k * self.n..(k + 1) * self.n]
    }

    pub fn dw_y_at(&self, k: usize) -> Option<&[f64]> {
        if self.dw_y.is_empty() {
            None
        } else {
            Some(&self.dw_y[k * self.n..(k + 1) * self.n])
        }
    }

    /// Weights of investor `l` at node `k`.
    pub fn weights_at(&self, k: usize, l: usize) -> &[f64] {
        let off = (k * self.investors + l) * self.n;
        &self.strategies[off..off + self.n]
    }

    pub fn total_at(&self, k: usize) -> f64 {
        self.x_at(k).iter().sum()
    }
}

/// Paths of the N-particle system on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticlePathSet {
    pub grid: Vec<f64>,
    pub v0: Vec<f64>,
    pub y_mode: YMode,
    pub paths: Vec<ParticlePath>,
}

impl ParticlePathSet {
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
}

/// Records one path from the initial state.
#[allow(clippy::too_many_arguments)]
pub fn record_path(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    x0: &[f64],
    y0: &[f64],
    v0: &[f64],
    seed: u64,
    path: usize,
) -> Result<ParticlePath> {
    let n = spec.n;
    let nodes = spec.steps + 1;
    let mut rec = ParticlePath {
        n,
        investors: spec.investors,
        x: Vec::with_capacity(nodes * n),
        v: Vec::with_capacity(nodes * spec.investors),
        y: Vec::with_capacity(nodes * n),
        dw: Vec::with_capacity(spec.steps * n),
        dw_y: Vec::new(),
        strategies: Vec::with_capacity(nodes * spec.investors * n),
        clamps: 0,
    };
    let end = run_path(oracle, spec, rule, v0, NodeState::initial(x0, y0, v0), spec.steps, seed, path, |ev| {
        rec.x.extend_from_slice(&ev.state.x);
        rec.v.extend_from_slice(&ev.state.v);
        rec.y.extend_from_slice(&ev.state.y);
        rec.strategies.extend_from_slice(ev.weights);
        if let Some(dw) = ev.dw {
            rec.dw.extend_from_slice(dw);
        }
        if let Some(dw) = ev.dw_y {
            rec.dw_y.extend_from_slice(dw);
        }
    })?;
    rec.clamps = end.clamps;
    Ok(rec)
}

/// Simulates `n_paths` independent trajectories of the N-particle system.
pub fn simulate_n_particle(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    rule: &dyn StrategyRule,
    seed: u64,
    n_paths: usize,
) -> Result<ParticlePathSet> {
    let resolved = config.resolve()?;
    let stored = (config.steps + 1)
        .saturating_mul(config.n * 3 + config.investors * (1 + config.n))
        .saturating_mul(n_paths);
    if stored > config.solver.memory_budget {
        return Err(Error::MemoryBudget { required: stored, budget: config.solver.memory_budget });
    }
    let mut spec = EngineSpec::from_config(config);
    spec.deflator = false;
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|p| record_path(oracle, &spec, rule, &config.x0, &resolved.y0, &resolved.v0, seed, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticlePathSet {
        grid: (0..=config.steps).map(|k| spec.time(k)).collect(),
        v0: resolved.v0,
        y_mode: config.y_mode,
        paths,
    })
}

/// Deflator along one recorded path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeflatorPath {
    /// steps+1 values, L(0) = 1.
    pub l: Vec<f64>,
    /// steps × n
    pub theta: Vec<f64>,
    /// steps × n
    pub lambda: Vec<f64>,
    /// steps values of √(‖θ‖² + ‖λ‖²)
    pub big_theta: Vec<f64>,
    /// steps increments of log L
    pub log_increments: Vec<f64>,
}

/// Rebuilds θ, λ and L from a recorded path and its own increments.
pub fn simulate_deflator(
    paths: &ParticlePathSet,
    index: usize,
    oracle: &dyn MarketOracle,
) -> Result<DeflatorPath> {
    let p = &paths.paths[index];
    let n = p.n;
    let steps = paths.steps();
    let dt = paths.grid[1] - paths.grid[0];
    let mut coef = Coefficients::zeros(n);
    let mut out = DeflatorPath {
        l: Vec::with_capacity(steps + 1),
        theta: Vec::with_capacity(steps * n),
        lambda: Vec::with_capacity(steps * n),
        big_theta: Vec::with_capacity(steps),
        log_increments: Vec::with_capacity(steps),
    };
    let mut log_l = 0.0;
    out.l.push(1.0);
    for k in 0..steps {
        let v = p.v_at(k);
        let m = v.iter().zip(&paths.v0).map(|(a, b)| a / b).sum::<f64>() / v.len() as f64;
        let ms = MarketState { t: paths.grid[k], x: p.x_at(k), y: p.y_at(k), m };
        oracle.evaluate(&ms, &mut coef)?;
        let theta = if coef.diagonal {
            (0..n)
                .map(|i| if coef.beta[i] == 0.0 { 0.0 } else { coef.beta[i] / coef.sigma[(i, i)] })
                .collect::<Vec<_>>()
        } else {
            coef.theta(k)?.iter().copied().collect()
        };
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::SingularSigma { step: k, cond: coef.sigma_condition() });
        }
        let lambda: Vec<f64> = if paths.y_mode == YMode::Exogenous {
            coef.lambda(k)?.iter().copied().collect()
        } else {
            vec![0.0; n]
        };
        let dw = p.dw_at(k);
        let zero = vec![0.0; n];
        let dw_y = p.dw_y_at(k).unwrap_or(&zero);
        let mut inc = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            inc -= theta[i] * dw[i] + lambda[i] * dw_y[i];
            quad += theta[i] * theta[i] + lambda[i] * lambda[i];
        }
        inc -= 0.5 * quad * dt;
        log_l += inc;
        out.l.push(log_l.exp());
        out.log_increments.push(inc);
        out.big_theta.push(quad.sqrt());
        out.theta.extend_from_slice(&theta);
        out.lambda.extend_from_slice(&lambda);
    }
    Ok(out)
}

/// Benchmark δ·X + (1−δ)·(1/N)Σ V/v along one recorded path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkPath {
    pub vbench: Vec<f64>,
    pub market_total: Vec<f64>,
    pub peer_average: Vec<f64>,
    /// log(V^ℓ(T)/Vbench(T)) per investor.
    pub relative_log_performance: Vec<f64>,
}

pub fn benchmark_path(paths: &ParticlePathSet, index: usize, delta: f64) -> Result<BenchmarkPath> {
    let p = paths.paths.get(index).ok_or_else(|| Error::Shape(format!("no path {index}")))?;
    if paths.v0.len() != p.investors {
        return Err(Error::Shape("initial wealths do not match investor count".into()));
    }
    let nodes = p.nodes();
    let mut out = BenchmarkPath {
        vbench: Vec::with_capacity(nodes),
        market_total: Vec::with_capacity(nodes),
        peer_average: Vec::with_capacity(nodes),
        relative_log_performance: Vec::new(),
    };
    for k in 0..nodes {
        let total = p.total_at(k);
        let peer = p.v_at(k).iter().zip(&paths.v0).map(|(v, w)| v / w).sum::<f64>() / p.investors as f64;
        out.market_total.push(total);
        out.peer_average.push(peer);
        out.vbench.push(delta * total + (1.0 - delta) * peer);
    }
    let last = *out.vbench.last().unwrap();
    out.relative_log_performance = p.v_at(nodes - 1).iter().map(|v| (v / last).ln()).collect();
    Ok(out)
}

/// Diversity and nondegeneracy bounds along recorded paths.
pub fn path_diagnostics(paths: &ParticlePathSet, oracle: &dyn MarketOracle) -> Result<Diagnostics> {
    let mut d = Diagnostics::empty();
    let n = paths.paths.first().map_or(0, |p| p.n);
    let mut coef = Coefficients::zeros(n);
    for p in &paths.paths {
        for k in 0..p.nodes() {
            let v = p.v_at(k);
            let m = v.iter().zip(&paths.v0).map(|(a, b)| a / b).sum::<f64>() / v.len() as f64;
            oracle.evaluate(&MarketState { t: paths.grid[k], x: p.x_at(k), y: p.y_at(k), m }, &mut coef)?;
            d.observe(p.x_at(k), &coef);
        }
    }
    Ok(d)
}
