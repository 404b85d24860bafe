//! Mean-field equilibrium under common noise: the peer-average fixed point,
//! the strategy-map iteration, representative strategies and the
//! volatility-stabilized closed form.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::arbitrage::{node_gradient, BumpSpec, NodeGradient};
use crate::engine::{rule_from_spec, EngineSpec, MarketOffsetRule, NodeState, StrategyContext, StrategyRule, TableRule};
use crate::error::{Error, Result};
use crate::model::{
    market_weights, simplex_deviation, Coefficients, MapLoop, MarketOracle, MarketState, ScenarioConfig, YMode,
    SCHEMA_VERSION,
};
use crate::nash::{
    exit_stats, iterate_phi, node_steps, outer_states, phi_maps, sigma_inv, tau_sigma_inv, uniqueness_probability,
    ContractionRegion, FixedPoint, LognormalParams, MomentPlan, PhiMap, StrategyRecord, TauKStats, UniquenessProbability,
};
use crate::rng::derive_seed;
use crate::stats::{mean, sorted_sum, Estimate};

/// Ã = 1 − (1−δ)E[e^c û/v0 | B], D̃ = δ|E[e^c D_mû/v0 | B]|, K̃ = Ã²/D̃.
pub fn contraction_region_mf(e_u: f64, e_dm_u: f64, delta: f64) -> ContractionRegion {
    ContractionRegion::from_parts(1.0 - (1.0 - delta) * e_u, delta * e_dm_u.abs())
}

/// Inputs to the representative strategy at one node.
#[derive(Debug, Clone)]
pub struct MfStrategyInputs<'a> {
    pub x: &'a [f64],
    /// Peer average at the node.
    pub m: f64,
    pub coef: &'a Coefficients,
    pub delta: f64,
    pub y_mode: YMode,
    /// Volatility of L·m per Brownian component, divided by L.
    pub vol_m: &'a [f64],
    pub vol_m_se: &'a [f64],
    pub renormalize: bool,
}

/// π_i = X_i D_i log û + [(τσ⁻¹)ᵀ D_z log û]_i + (δX/𝒱)·m_i + ((1−δ)/𝒱)·[vol σ⁻¹]_i
/// with 𝒱 = δX + (1−δ)m.
pub fn mfe_strategy(step: usize, inp: &MfStrategyInputs<'_>, grad: &NodeGradient) -> Result<StrategyRecord> {
    let n = inp.x.len();
    let mw = market_weights(inp.x)?;
    let x_total: f64 = inp.x.iter().sum();
    let bench = inp.delta * x_total + (1.0 - inp.delta) * inp.m;
    if !(bench > 0.0) {
        return Err(Error::Domain(format!("representative benchmark {bench} is not positive at step {step}")));
    }
    let si = sigma_inv(inp.coef)?;
    let ts = tau_sigma_inv(inp.coef)?;
    let y_active = inp.y_mode == YMode::Exogenous;
    let peer = (1.0 - inp.delta) / bench;
    let mut w = vec![0.0; n];
    let mut se = vec![0.0; n];
    for i in 0..n {
        let mut yterm = 0.0;
        let mut yvar = 0.0;
        if y_active {
            for p in 0..n {
                yterm += ts[(p, i)] * grad.d_y[p];
                yvar += (ts[(p, i)] * grad.se_y[p]).powi(2);
            }
        }
        let mut vterm = 0.0;
        let mut vvar = 0.0;
        for k in 0..n {
            vterm += inp.vol_m[k] * si[(k, i)];
            vvar += (inp.vol_m_se[k] * si[(k, i)]).powi(2);
        }
        w[i] = inp.x[i] * grad.d_x[i] + yterm + inp.delta * x_total / bench * mw.as_slice()[i] + peer * vterm;
        se[i] = ((inp.x[i] * grad.se_x[i]).powi(2) + yvar + peer * peer * vvar).sqrt();
    }
    if inp.renormalize {
        let shift = (w.iter().sum::<f64>() - 1.0) / n as f64;
        w.iter_mut().for_each(|v| *v -= shift);
    }
    Ok(StrategyRecord {
        step,
        sum: w.iter().sum(),
        min: w.iter().copied().fold(f64::INFINITY, f64::min),
        simplex_deviation: simplex_deviation(&w),
        warning: grad.one_sided.then(|| "one-sided difference near the boundary".to_string()),
        weights: w,
        std_err: se,
    })
}

/// Closed-form strategy of the volatility-stabilized market.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedForm {
    pub weights: Vec<f64>,
    pub vol_m: Vec<f64>,
    /// dt-coefficient of the peer average, per component.
    pub drift_m: Vec<f64>,
}

/// State of the volatility-stabilized market at one node.
#[derive(Debug, Clone, Copy)]
pub struct VsmState<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub m: f64,
    /// Deflator level L_t.
    pub deflator: f64,
}

/// σ_i = X_i^{−1/2}, β_i = (1+ζ)Z_i/(2m_i), τ_i = √Z_i, and
///
/// vol_i = [√X_i D_i log û + Z_i^{−1/2} D_{z_i} log û + δ√X_i/𝒱] / (1 − D_m log û),
///
/// π_i = X_i D_i log û + τ_iσ_i⁻¹ D_{z_i} log û + vol_iσ_i⁻¹ D_m log û
///       + [δX m_i + (1−δ)Lσ_i⁻¹(mθ_i + vol_i)]/𝒱.
///
/// Capital-noise terms are dropped unless `capital_noise`.
pub fn vsm_closed_form(state: VsmState<'_>, grad: &NodeGradient, zeta: f64, delta: f64, capital_noise: bool) -> Result<ClosedForm> {
    let VsmState { x, z, m, deflator: l } = state;
    let n = x.len();
    let denom = 1.0 - grad.d_m;
    if denom.abs() < 1e-10 {
        return Err(Error::Singularity(format!("1 − D_m log û = {denom:e}, the peer-average volatility is unbounded")));
    }
    let x_total: f64 = x.iter().sum();
    let bench = delta * x_total + (1.0 - delta) * m;
    if !(bench > 0.0) {
        return Err(Error::Domain(format!("benchmark {bench} is not positive")));
    }
    let mut out = ClosedForm { weights: vec![0.0; n], vol_m: vec![0.0; n], drift_m: vec![0.0; n] };
    for i in 0..n {
        let mi = x[i] / x_total;
        let sx = x[i].sqrt();
        let theta = (1.0 + zeta) * z[i] / (2.0 * mi) * sx;
        let cap = if capital_noise {
            if !(z[i] > 0.0) {
                return Err(Error::Singularity(format!("invested capital Z_{i} is zero")));
            }
            (z[i].powf(-0.5) * grad.d_y[i], z[i].sqrt() * sx * grad.d_y[i])
        } else {
            (0.0, 0.0)
        };
        let vol = (sx * grad.d_x[i] + cap.0 + delta * sx / bench) / denom;
        out.vol_m[i] = vol;
        out.drift_m[i] = (1.0 - delta) / bench * (theta * l + vol);
        out.weights[i] = x[i] * grad.d_x[i]
            + cap.1
            + vol * sx * grad.d_m
            + (delta * x_total * mi + (1.0 - delta) * l * sx * (m * theta + vol)) / bench;
    }
    Ok(out)
}

/// Settings for [`solve_mfe`], defaulting to the scenario's solver block.
#[derive(Debug, Clone, Serialize)]
pub struct MfgSettings {
    pub k_inner: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub map_iters: usize,
    pub map_loop: MapLoop,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub root_paths: usize,
    pub node_stride: usize,
    pub std_normalized: bool,
    pub renormalize: bool,
    /// Off: solve m under the base rule only and skip strategies.
    pub strategies: bool,
    pub bump: BumpSpec,
}

impl MfgSettings {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let s = &cfg.solver;
        MfgSettings {
            k_inner: s.k_inner,
            damping: s.damping,
            tol: s.tol,
            max_iters: s.max_iters,
            map_iters: s.map_iters,
            map_loop: s.map_loop,
            outer_paths: s.outer_paths,
            inner_paths: s.inner_paths,
            root_paths: s.paths,
            node_stride: s.node_stride,
            std_normalized: s.cdf_std_normalized,
            renormalize: s.renormalize_strategy,
            strategies: true,
            bump: BumpSpec { h_abs: s.bump_abs, h_rel: s.bump_rel },
        }
    }
}

/// Everything the representative strategy used at one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MfNodeRecord {
    pub step: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub m: f64,
    pub log_l: f64,
    pub gradient: NodeGradient,
    pub vol_m: Vec<f64>,
    pub vol_m_se: Vec<f64>,
    pub strategy: StrategyRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldEquilibrium {
    pub schema_version: u32,
    pub converged: bool,
    pub converged_m: bool,
    pub converged_phi: bool,
    pub k_inner: usize,
    pub map_loop: MapLoop,
    pub map_iterations: usize,
    pub iterations_m: usize,
    /// sup over nodes of the path-mean |Φ(m) − m|.
    pub residual_m: f64,
    pub residual_m_trace: Vec<f64>,
    /// sup over nodes of the path-mean change of the strategy map.
    pub residual_phi: f64,
    pub residual_phi_trace: Vec<f64>,
    /// max(tol, 3·SE of the proposed map); the map cannot settle below its noise.
    pub phi_tolerance: f64,
    pub tol: f64,
    pub damping: f64,
    pub node_steps: Vec<usize>,
    pub node_times: Vec<f64>,
    /// Peer average per common-noise path and node.
    pub m_path: Vec<Vec<f64>>,
    /// Mean invested capital per path and node.
    pub z_path: Vec<Vec<Vec<f64>>>,
    pub x_path: Vec<Vec<f64>>,
    /// e^{c̄}·û at the mean preference c̄ of the inner sample.
    pub u: Estimate,
    pub u_normalized: Estimate,
    pub c_mean: f64,
    /// Representative strategy along the first path.
    pub strategy_path: Vec<StrategyRecord>,
    pub nodes: Vec<MfNodeRecord>,
    /// Map in force for the final m solve (node × n), absent for the base rule.
    pub strategy_map: Option<Vec<Vec<f64>>>,
    pub a_tilde: Vec<f64>,
    pub d_tilde: Vec<f64>,
    pub k_tilde_upper: Vec<f64>,
    pub tau_k: TauKStats,
    pub uniqueness_probability: UniquenessProbability,
    #[serde(skip)]
    pub maps: Vec<Vec<PhiMap>>,
}

impl MeanFieldEquilibrium {
    /// The returned strategy map as a rule for every investor.
    pub fn strategy_rule(&self, config: &ScenarioConfig) -> Arc<dyn StrategyRule> {
        rule_for(config, self.strategy_map.as_ref(), &self.node_steps, self.map_loop)
    }

    /// e^c·û with the equilibrium flow held fixed.
    pub fn u_for_preference(&self, c: f64) -> f64 {
        c.exp() * self.u_normalized.mean
    }
}

struct Setup {
    spec: EngineSpec,
    v0: Vec<f64>,
    c: Vec<f64>,
    start: NodeState,
    steps: Vec<usize>,
    weight_sum: f64,
}

fn setup(config: &ScenarioConfig, settings: &MfgSettings) -> Result<Setup> {
    if settings.k_inner == 0 || settings.outer_paths == 0 || settings.inner_paths == 0 || settings.root_paths == 0 {
        return Err(Error::Config("k_inner and path counts must be positive".into()));
    }
    let inner_cfg = config.with_investors(settings.k_inner);
    let r = inner_cfg.resolve()?;
    let mut ws: Vec<f64> = r.c.iter().zip(&r.v0).map(|(c, v)| c.exp() / v).collect();
    Ok(Setup {
        spec: EngineSpec::from_config(&inner_cfg),
        start: NodeState::initial(&config.x0, &r.y0, &r.v0),
        steps: node_steps(config.steps, settings.node_stride),
        weight_sum: sorted_sum(&mut ws),
        v0: r.v0,
        c: r.c,
    })
}

/// Expands per-node rows to one row per grid step, holding each node's
/// value until the next node.
fn map_rule(map: &[Vec<f64>], steps: &[usize], total_steps: usize, kind: MapLoop) -> Arc<dyn StrategyRule> {
    let n = map[0].len();
    let mut rows = Vec::with_capacity((total_steps + 1) * n);
    let mut k = 0;
    for s in 0..=total_steps {
        while k + 1 < map.len() && steps[k + 1] <= s {
            k += 1;
        }
        rows.extend_from_slice(&map[k]);
    }
    let table = TableRule::new(n, total_steps + 1, 0, rows);
    match kind {
        MapLoop::Open => Arc::new(table),
        MapLoop::Closed => Arc::new(MarketOffsetRule(table)),
    }
}

fn rule_for(config: &ScenarioConfig, map: Option<&Vec<Vec<f64>>>, steps: &[usize], kind: MapLoop) -> Arc<dyn StrategyRule> {
    match map {
        Some(m) => map_rule(m, steps, config.steps, kind),
        None => rule_from_spec(&config.strategy),
    }
}

/// Map coordinates of a weight vector: the weights themselves, or their
/// offset from the market portfolio.
fn to_map(w: &[f64], x: &[f64], kind: MapLoop) -> Vec<f64> {
    match kind {
        MapLoop::Open => w.to_vec(),
        MapLoop::Closed => {
            let total: f64 = x.iter().sum();
            w.iter().zip(x).map(|(w, x)| w - x / total).collect()
        }
    }
}

/// Solves the mean-field problem: for a given strategy map, the peer average
/// is the fixed point of Φ(m) = δX·w̄û(m)/(1 − (1−δ)w̄û(m)) with
/// w̄ = E[e^c/v0]; the representative strategy at the solution defines the
/// next map, blended with damping.
pub fn solve_mfe(oracle: &dyn MarketOracle, config: &ScenarioConfig, settings: &MfgSettings, seed: u64) -> Result<MeanFieldEquilibrium> {
    let su = setup(config, settings)?;
    let delta = config.delta;
    let n = config.n;
    let last = su.steps.len() - 1;
    let omega_m = if delta == 1.0 { 1.0 } else { settings.damping };
    let plan = MomentPlan {
        inner_paths: settings.inner_paths,
        root_paths: settings.root_paths,
        inner_seed: derive_seed(seed, 2),
        root_seed: derive_seed(seed, 3),
    };
    let grad_seed = derive_seed(seed, 4);

    let mut map: Option<Vec<Vec<f64>>> = None;
    let mut m_warm: Option<Vec<Vec<f64>>> = None;
    let mut residual_m_trace = Vec::new();
    let mut residual_phi_trace = Vec::new();
    let mut map_iterations = 0;
    loop {
        map_iterations += 1;
        let rule = rule_for(config, map.as_ref(), &su.steps, settings.map_loop);
        let states = outer_states(oracle, &su.spec, rule.as_ref(), &su.v0, &su.start, &su.steps, settings.outer_paths, derive_seed(seed, 1))?;
        let maps = phi_maps(oracle, &su.spec, rule.as_ref(), &su.v0, &states, su.weight_sum, delta, plan)?;
        let init = m_warm.take().unwrap_or_else(|| maps.iter().map(|row| row.iter().map(|f| f.moments.m_node).collect()).collect());
        let fp = iterate_phi(&maps, init, omega_m, settings.tol, settings.max_iters)?;
        residual_m_trace.push(fp.residual);
        if !settings.strategies {
            residual_phi_trace.push(f64::NAN);
            let trace = Trace { converged_phi: false, phi_tolerance: settings.tol, map_iterations, residual_m_trace, residual_phi_trace, omega_m };
            return assemble(oracle, config, settings, &su, states, maps, fp, Vec::new(), None, trace);
        }

        let jobs: Vec<(usize, usize)> = (0..settings.outer_paths).flat_map(|p| (0..last).map(move |k| (p, k))).collect();
        let records: Vec<MfNodeRecord> = jobs
            .par_iter()
            .map(|&(p, k)| {
                let s = &states[p][k];
                let f = &maps[p][k];
                let m = fp.m[p][k];
                let g = node_gradient(
                    oracle,
                    &su.spec,
                    rule.as_ref(),
                    &su.v0,
                    s,
                    &f.moments,
                    m,
                    delta,
                    settings.bump,
                    settings.inner_paths,
                    derive_seed(grad_seed, ((p as u64) << 32) | k as u64),
                )?;
                let mut coef = Coefficients::zeros(n);
                oracle.evaluate(&MarketState { t: su.spec.time(s.step), x: &s.x, y: &s.y, m }, &mut coef)?;
                let theta = sigma_inv(&coef)? * &coef.beta;
                let reg = f
                    .moments
                    .growth_regression()
                    .ok_or_else(|| Error::Domain(format!("too few conditional paths to regress at step {}", s.step)))?;
                let vol_m: Vec<f64> = (0..n).map(|i| m * (reg.slope[i] + theta[i])).collect();
                let vol_m_se: Vec<f64> = reg.std_err.iter().map(|e| m * e).collect();
                let inp = MfStrategyInputs {
                    x: &s.x,
                    m,
                    coef: &coef,
                    delta,
                    y_mode: config.y_mode,
                    vol_m: &vol_m,
                    vol_m_se: &vol_m_se,
                    renormalize: settings.renormalize,
                };
                let strategy = mfe_strategy(s.step, &inp, &g)?;
                Ok(MfNodeRecord { step: s.step, x: s.x.clone(), z: s.y.clone(), m, log_l: s.log_l, gradient: g, vol_m, vol_m_se, strategy })
            })
            .collect::<Result<_>>()?;

        // proposed map: path mean of π★ in map coordinates, with its standard error
        let mut proposed = Vec::with_capacity(last);
        let mut current = Vec::with_capacity(last);
        let mut se_max: f64 = 0.0;
        let mut scratch = vec![0.0; n];
        for k in 0..last {
            let mut row = vec![0.0; n];
            for i in 0..n {
                let vals: Vec<f64> = (0..settings.outer_paths)
                    .map(|p| {
                        let r = &records[p * last + k];
                        to_map(&r.strategy.weights, &r.x, settings.map_loop)[i]
                    })
                    .collect();
                let inner_se =
                    (0..settings.outer_paths).map(|p| records[p * last + k].strategy.std_err[i].powi(2)).sum::<f64>().sqrt()
                        / settings.outer_paths as f64;
                let across = Estimate::from_samples(&vals).std_err;
                let se = if across.is_finite() { across.max(inner_se) } else { inner_se };
                se_max = se_max.max(se);
                row[i] = mean(&vals);
            }
            proposed.push(row);
            let cur = match &map {
                Some(mp) => mp[k].clone(),
                None => {
                    let mut acc = vec![0.0; n];
                    for row in states.iter() {
                        let s = &row[k];
                        let ctx = StrategyContext { step: s.step, t: su.spec.time(s.step), x: &s.x, y: &s.y, wealth: &s.v, v0: &su.v0, path: 0 };
                        rule.weights(&ctx, 0, &mut scratch);
                        for (a, v) in acc.iter_mut().zip(to_map(&scratch, &s.x, settings.map_loop)) {
                            *a += v / settings.outer_paths as f64;
                        }
                    }
                    acc
                }
            };
            current.push(cur);
        }
        let residual_phi = proposed
            .iter()
            .zip(&current)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        residual_phi_trace.push(residual_phi);
        let phi_tolerance = settings.tol.max(3.0 * se_max);
        let converged_phi = residual_phi <= phi_tolerance;

        if converged_phi || map_iterations >= settings.map_iters.max(1) {
            let trace = Trace { converged_phi, phi_tolerance, map_iterations, residual_m_trace, residual_phi_trace, omega_m };
            return assemble(oracle, config, settings, &su, states, maps, fp, records, map, trace);
        }
        let mut blended: Vec<Vec<f64>> = current
            .iter()
            .zip(&proposed)
            .map(|(c, p)| c.iter().zip(p).map(|(c, p)| c + settings.damping * (p - c)).collect())
            .collect();
        blended.push(blended[last - 1].clone());
        map = Some(blended);
        m_warm = Some(fp.m);
    }
}

struct Trace {
    converged_phi: bool,
    phi_tolerance: f64,
    map_iterations: usize,
    residual_m_trace: Vec<f64>,
    residual_phi_trace: Vec<f64>,
    omega_m: f64,
}

/// sup over nodes of the path mean of |Φ(m) − m|.
fn residual_m(maps: &[Vec<PhiMap>], m: &[Vec<f64>]) -> Result<f64> {
    let paths = maps.len() as f64;
    let mut sup: f64 = 0.0;
    for k in 0..maps[0].len() {
        let mut acc = 0.0;
        for (row, mrow) in maps.iter().zip(m) {
            acc += (row[k].eval(mrow[k])? - mrow[k]).abs();
        }
        sup = sup.max(acc / paths);
    }
    Ok(sup)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    settings: &MfgSettings,
    su: &Setup,
    states: Vec<Vec<NodeState>>,
    maps: Vec<Vec<PhiMap>>,
    fp: FixedPoint,
    records: Vec<MfNodeRecord>,
    map: Option<Vec<Vec<f64>>>,
    tr: Trace,
) -> Result<MeanFieldEquilibrium> {
    let delta = config.delta;
    let k_inner = settings.k_inner as f64;
    let residual = residual_m(&maps, &fp.m)?;
    let mut residual_m_trace = tr.residual_m_trace;
    if let Some(l) = residual_m_trace.last_mut() {
        *l = residual;
    }
    let root = &maps[0][0].moments;
    let u_normalized = root.u_estimate(fp.m[0][0], delta);
    let c_mean = mean(&su.c);
    let scale = c_mean.exp();
    let u = Estimate { mean: scale * u_normalized.mean, std_err: scale * u_normalized.std_err, ..u_normalized };
    if !(u.mean > 0.0) {
        return Err(Error::Domain(format!("representative proportion u = {} is not positive", u.mean)));
    }

    let regions: Vec<Vec<ContractionRegion>> =
        maps.iter().zip(&fp.m).map(|(row, mrow)| row.iter().zip(mrow).map(|(f, &mk)| f.region(mk)).collect()).collect();
    let tilde: Vec<ContractionRegion> =
        regions[0].iter().map(|g| ContractionRegion::from_parts(g.a / k_inner, g.d / (k_inner * k_inner))).collect();
    let times: Vec<f64> = su.steps.iter().map(|&s| su.spec.time(s)).collect();
    let tau_k = exit_stats(&maps, &regions, &times);
    let params = LognormalParams::at(oracle, 0.0, &config.x0, &su.start.y, 1.0)?;
    let k0 = tilde[0].k_upper;
    let uniq = UniquenessProbability {
        formula: uniqueness_probability(params, k0, su.start.total(), config.horizon, settings.std_normalized),
        std_normalized: settings.std_normalized,
        params,
        k_upper: k0,
        empirical: 1.0 - tau_k.exit_frequency,
        empirical_std_err: tau_k.exit_std_err,
    };

    let last = su.steps.len() - 1;
    let nodes: Vec<MfNodeRecord> = records.into_iter().take(last).collect();
    let converged_m = fp.converged;
    Ok(MeanFieldEquilibrium {
        schema_version: SCHEMA_VERSION,
        converged: converged_m && (tr.converged_phi || !settings.strategies),
        converged_m,
        converged_phi: tr.converged_phi,
        k_inner: settings.k_inner,
        map_loop: settings.map_loop,
        map_iterations: tr.map_iterations,
        iterations_m: fp.iterations,
        residual_m: residual,
        residual_m_trace,
        residual_phi: *tr.residual_phi_trace.last().expect("one map iteration"),
        residual_phi_trace: tr.residual_phi_trace,
        phi_tolerance: tr.phi_tolerance,
        tol: settings.tol,
        damping: tr.omega_m,
        node_times: times,
        node_steps: su.steps.clone(),
        m_path: fp.m,
        z_path: states.iter().map(|row| row.iter().map(|s| s.y.clone()).collect()).collect(),
        x_path: maps.iter().map(|row| row.iter().map(|f| f.x_total).collect()).collect(),
        u,
        u_normalized,
        c_mean,
        strategy_path: nodes.iter().map(|r| r.strategy.clone()).collect(),
        nodes,
        strategy_map: map,
        a_tilde: tilde.iter().map(|g| g.a).collect(),
        d_tilde: tilde.iter().map(|g| g.d).collect(),
        k_tilde_upper: tilde.iter().map(|g| g.k_upper).collect(),
        tau_k,
        uniqueness_probability: uniq,
        maps,
    })
}

/// Outcome of re-estimating Φ at the returned flow with fresh inner samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// Path mean of Φ_new(m) − m per node.
    pub gap: Vec<f64>,
    pub std_err: Vec<f64>,
    /// residual_m + 3·SE per node.
    pub allowed: Vec<f64>,
    pub holds: bool,
}

/// Re-simulates the common-noise paths under the returned strategy map and
/// re-estimates Φ at the equilibrium flow from independent inner samples.
pub fn consistency_check(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    settings: &MfgSettings,
    eq: &MeanFieldEquilibrium,
    solve_seed: u64,
    check_seed: u64,
) -> Result<ConsistencyReport> {
    let su = setup(config, settings)?;
    let delta = config.delta;
    let rule = rule_for(config, eq.strategy_map.as_ref(), &su.steps, settings.map_loop);
    let states = outer_states(oracle, &su.spec, rule.as_ref(), &su.v0, &su.start, &su.steps, settings.outer_paths, derive_seed(solve_seed, 1))?;
    let plan = MomentPlan {
        inner_paths: settings.inner_paths,
        root_paths: settings.root_paths,
        inner_seed: derive_seed(check_seed, 2),
        root_seed: derive_seed(check_seed, 3),
    };
    let maps = phi_maps(oracle, &su.spec, rule.as_ref(), &su.v0, &states, su.weight_sum, delta, plan)?;
    let paths = maps.len() as f64;
    let k_inner = settings.k_inner as f64;
    let mut gap = Vec::new();
    let mut std_err = Vec::new();
    for k in 0..su.steps.len() {
        let mut g = 0.0;
        let mut var = 0.0;
        for (row, mrow) in maps.iter().zip(&eq.m_path) {
            let f = &row[k];
            let m = mrow[k];
            g += f.eval(m)? - m;
            let u = f.moments.u_estimate(m, delta);
            let a = k_inner - (1.0 - delta) * u.mean * f.weight_sum;
            let slope = delta * f.x_total * f.weight_sum * k_inner / (a * a);
            var += (slope * u.std_err).powi(2);
        }
        gap.push(g / paths);
        std_err.push(var.sqrt() / paths);
    }
    let allowed: Vec<f64> = std_err.iter().map(|s| eq.residual_m + 3.0 * s).collect();
    let holds = gap.iter().zip(&allowed).all(|(g, a)| g.abs() <= *a);
    Ok(ConsistencyReport { gap, std_err, allowed, holds })
}
