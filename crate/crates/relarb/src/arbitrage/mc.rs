use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{run_path, rule_from_spec, EngineSpec, NodeState, StrategyRule};
use crate::error::{Error, Result};
use crate::model::{MarketOracle, ScenarioConfig};
use crate::stats::Estimate;

/// Fewer paths than this set the `few_paths` flag on an estimate.
pub const MIN_PATHS: usize = 100;

/// Whose preference parameter scales the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Investor(usize),
    C(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArbitrageEstimate {
    /// ũ = e^c û
    pub u_hat: f64,
    pub std_err: f64,
    /// û with û(0-horizon) = 1
    pub u_normalized: f64,
    pub std_err_normalized: f64,
    pub c: f64,
    pub n_paths: usize,
    pub grad_x: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub grad_m: Option<f64>,
    pub normalized: bool,
    pub few_paths: bool,
}

impl ArbitrageEstimate {
    fn from_normalized(est: Estimate, c: f64) -> Self {
        let s = c.exp();
        ArbitrageEstimate {
            u_hat: s * est.mean,
            std_err: s * est.std_err,
            u_normalized: est.mean,
            std_err_normalized: est.std_err,
            c,
            n_paths: est.n,
            grad_x: Vec::new(),
            grad_y: Vec::new(),
            grad_m: None,
            normalized: true,
            few_paths: est.n < MIN_PATHS,
        }
    }
}

/// Samples of Vbench(T) L(T) / Vbench(t) for paths started at `start`.
#[allow(clippy::too_many_arguments)]
pub fn normalized_samples(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    start: &NodeState,
    delta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let bench = |s: &NodeState| delta * s.total() + (1.0 - delta) * s.peer_average(v0);
    let b0 = bench(start);
    let mut origin = start.clone();
    origin.log_l = 0.0;
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let end = run_path(oracle, spec, rule, v0, origin.clone(), spec.steps, seed, p, |_| {})?;
            Ok(bench(&end) * end.log_l.exp() / b0)
        })
        .collect()
}

/// Estimate of û from an arbitrary node state.
#[allow(clippy::too_many_arguments)]
pub fn estimate_from_state(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    start: &NodeState,
    delta: f64,
    c: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ArbitrageEstimate> {
    let samples = normalized_samples(oracle, spec, rule, v0, start, delta, n_paths, seed)?;
    Ok(ArbitrageEstimate::from_normalized(Estimate::from_samples(&samples), c))
}

fn target_c(config: &ScenarioConfig, c: &[f64], target: Target) -> Result<f64> {
    match target {
        Target::C(v) => Ok(v),
        Target::Investor(l) => c
            .get(l)
            .copied()
            .ok_or_else(|| Error::Config(format!("investor {l} out of range (N = {})", config.investors))),
    }
}

/// Monte Carlo estimate of ũ(T) = e^c E[Vbench(T) L(T)] / Vbench(0) at the
/// configured initial state.
pub fn estimate_u_mc(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    target: Target,
    n_paths: usize,
    seed: u64,
) -> Result<ArbitrageEstimate> {
    let r = config.resolve()?;
    let c = target_c(config, &r.c, target)?;
    let rule = rule_from_spec(&config.strategy);
    let spec = EngineSpec::from_config(config);
    let start = NodeState::initial(&config.x0, &r.y0, &r.v0);
    estimate_from_state(oracle, &spec, rule.as_ref(), &r.v0, &start, config.delta, c, n_paths, seed)
}

/// State around which gradients are taken.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasePoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Peer-average normalized wealth.
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BumpSpec {
    pub h_abs: f64,
    pub h_rel: f64,
}

impl BumpSpec {
    pub fn size(&self, coordinate: f64) -> f64 {
        self.h_abs.max(self.h_rel * coordinate.abs())
    }
}

/// Gradient of log ũ at a base point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBlock {
    pub base: ArbitrageEstimate,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
    pub d_m: f64,
    pub se_x: Vec<f64>,
    pub se_y: Vec<f64>,
    pub se_m: f64,
    /// Coordinates (x then y then m) that used a one-sided difference.
    pub one_sided: Vec<bool>,
}

struct Bumped {
    samples: Vec<f64>,
    mean: f64,
}

/// Central (or forward, near zero) differences of log û with common random numbers.
pub fn grad_log_u(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    base: &BasePoint,
    bump: BumpSpec,
    n_paths: usize,
    seed: u64,
) -> Result<GradientBlock> {
    let n = config.n;
    if base.x.len() != n || base.y.len() != n {
        return Err(Error::Shape("base point does not match market dimension".into()));
    }
    if !(base.m > 0.0) {
        return Err(Error::Domain(format!("peer average m = {} must be positive", base.m)));
    }
    let r = config.resolve()?;
    let rule = rule_from_spec(&config.strategy);
    let spec = EngineSpec::from_config(config);
    let sample = |x: &[f64], y: &[f64], m: f64| -> Result<Bumped> {
        let v: Vec<f64> = r.v0.iter().map(|w| w * m).collect();
        let start = NodeState::initial(x, y, &v);
        let samples = normalized_samples(oracle, &spec, rule.as_ref(), &r.v0, &start, config.delta, n_paths, seed)?;
        let mean = crate::stats::mean(&samples);
        if !(mean > 0.0) {
            return Err(Error::Domain("estimate of û is not positive at a bumped point".into()));
        }
        Ok(Bumped { samples, mean })
    };
    let centre = sample(&base.x, &base.y, base.m)?;
    let mut base_est = ArbitrageEstimate::from_normalized(Estimate::from_samples(&centre.samples), r.c[0]);
    base_est.c = r.c[0];

    // derivative of log û along one coordinate, with a paired standard error
    let diff = |up: &Bumped, down: &Bumped, width: f64| -> (f64, f64) {
        let d = (up.mean.ln() - down.mean.ln()) / width;
        let paired: Vec<f64> = up.samples.iter().zip(&down.samples).map(|(a, b)| a / up.mean - b / down.mean).collect();
        (d, Estimate::from_samples(&paired).std_err / width)
    };
    let mut one_sided = Vec::with_capacity(2 * n + 1);
    let mut partial = |value: f64, nonneg: bool, eval: &dyn Fn(f64) -> Result<Bumped>| -> Result<(f64, f64)> {
        let h = bump.size(value);
        if nonneg && value - h < 0.0 {
            one_sided.push(true);
            let up = eval(value + h)?;
            return Ok(diff(&up, &centre, h));
        }
        one_sided.push(false);
        let up = eval(value + h)?;
        let down = eval(value - h)?;
        Ok(diff(&up, &down, 2.0 * h))
    };

    let mut d_x = vec![0.0; n];
    let mut se_x = vec![0.0; n];
    for i in 0..n {
        let (d, se) = partial(base.x[i], true, &|v| {
            let mut x = base.x.clone();
            x[i] = v;
            sample(&x, &base.y, base.m)
        })?;
        d_x[i] = d;
        se_x[i] = se;
    }
    let mut d_y = vec![0.0; n];
    let mut se_y = vec![0.0; n];
    for p in 0..n {
        let (d, se) = partial(base.y[p], true, &|v| {
            let mut y = base.y.clone();
            y[p] = v;
            sample(&base.x, &y, base.m)
        })?;
        d_y[p] = d;
        se_y[p] = se;
    }
    let (d_m, se_m) = partial(base.m, true, &|v| sample(&base.x, &base.y, v))?;
    base_est.grad_x = d_x.clone();
    base_est.grad_y = d_y.clone();
    base_est.grad_m = Some(d_m);
    Ok(GradientBlock { base: base_est, d_x, d_y, d_m, se_x, se_y, se_m, one_sided })
}
