//! N-player equilibrium: fixed point of Φ on the peer average, equilibrium
//! strategies, and the region where Φ contracts.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::arbitrage::{node_gradient, node_moments, BumpSpec, GradientBlock, NodeGradient, NodeMoments};
use crate::engine::{rule_from_spec, run_path, EngineSpec, NodeState, StrategyRule};
use crate::error::{Error, Result};
use crate::model::{
    market_weights, simplex_deviation, Coefficients, MarketOracle, MarketState, ScenarioConfig, YMode,
    SCHEMA_VERSION,
};
use crate::rng::derive_seed;
use crate::stats::{sorted_sum, std_normal_cdf, Estimate};

/// Φ(m) = δX·S / (N − (1−δ)S) with S = Σ e^{c_ℓ}û^ℓ/v^ℓ, where `u_values`
/// holds û^ℓ evaluated at m.
pub fn phi_map(x_total: f64, u_values: &[f64], c: &[f64], v0: &[f64], delta: f64) -> Result<f64> {
    if u_values.len() != c.len() || c.len() != v0.len() {
        return Err(Error::Shape("u, c and v0 must have one entry per investor".into()));
    }
    let mut terms: Vec<f64> = u_values.iter().zip(c).zip(v0).map(|((u, c), v)| c.exp() * u / v).collect();
    let s = sorted_sum(&mut terms);
    phi_from_sum(x_total, s, c.len(), delta)
}

fn phi_from_sum(x_total: f64, s: f64, investors: usize, delta: f64) -> Result<f64> {
    let a = investors as f64 - (1.0 - delta) * s;
    if !(a > 0.0) {
        return Err(Error::Infeasible(format!(
            "preference condition violated: (1-δ)·(1/N)·Σ e^c û/v = {:.6} is not below 1",
            (1.0 - delta) * s / investors as f64
        )));
    }
    Ok(delta * x_total * s / a)
}

/// Φ at one node, with û(m) given by the node's conditional moments.
#[derive(Debug, Clone)]
pub struct PhiMap {
    pub step: usize,
    pub x_total: f64,
    pub delta: f64,
    pub investors: usize,
    /// Σ_ℓ e^{c_ℓ}/v^ℓ
    pub weight_sum: f64,
    pub moments: NodeMoments,
}

impl PhiMap {
    pub fn eval(&self, m: f64) -> Result<f64> {
        let u = self.moments.u_hat(m, self.delta);
        phi_from_sum(self.x_total, u * self.weight_sum, self.investors, self.delta)
    }

    /// Φ′(m) = NδX·Σe^c D_mû/v / A².
    pub fn derivative(&self, m: f64) -> f64 {
        let r = self.region(m);
        let num = self.investors as f64 * self.delta * self.x_total * self.moments.d_m_u_hat(m, self.delta) * self.weight_sum;
        num / (r.a * r.a)
    }

    pub fn region(&self, m: f64) -> ContractionRegion {
        let u = self.moments.u_hat(m, self.delta);
        let du = self.moments.d_m_u_hat(m, self.delta);
        region_from_sums(u * self.weight_sum, du * self.weight_sum, self.investors, self.delta)
    }
}

/// A_t, D_t and the upper end of K = [0, A²/D).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionRegion {
    pub a: f64,
    pub d: f64,
    /// +∞ when D = 0 (serialized as null).
    pub k_upper: f64,
}

impl ContractionRegion {
    pub fn from_parts(a: f64, d: f64) -> Self {
        let k_upper = if d == 0.0 { f64::INFINITY } else { a * a / d };
        ContractionRegion { a, d, k_upper }
    }

    pub fn contains(&self, x_total: f64) -> bool {
        x_total < self.k_upper
    }
}

fn region_from_sums(s_u: f64, s_du: f64, investors: usize, delta: f64) -> ContractionRegion {
    let nn = investors as f64;
    ContractionRegion::from_parts(nn - (1.0 - delta) * s_u, nn * delta * s_du.abs())
}

/// A_t = N − (1−δ)Σe^c û/v, D_t = Nδ|Σe^c D_mû/v|, K_upper = A²/D.
pub fn contraction_region(u_values: &[f64], dm_u_values: &[f64], c: &[f64], v0: &[f64], delta: f64) -> ContractionRegion {
    let weighted = |vals: &[f64]| {
        let mut t: Vec<f64> = vals.iter().zip(c).zip(v0).map(|((u, c), v)| c.exp() * u / v).collect();
        sorted_sum(&mut t)
    };
    region_from_sums(weighted(u_values), weighted(dm_u_values), c.len(), delta)
}

/// Constant-coefficient approximation of log X: drift m′β − ½m′αm, variance m′αm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LognormalParams {
    pub m_beta: f64,
    pub m_alpha_m: f64,
}

impl LognormalParams {
    pub fn at(oracle: &dyn MarketOracle, t: f64, x: &[f64], y: &[f64], m: f64) -> Result<Self> {
        let mut coef = Coefficients::zeros(x.len());
        oracle.evaluate(&MarketState { t, x, y, m }, &mut coef)?;
        Ok(Self::from_coefficients(&coef, market_weights(x)?.as_slice()))
    }

    pub fn from_coefficients(coef: &Coefficients, w: &[f64]) -> Self {
        let n = w.len();
        let alpha = coef.alpha();
        let m_beta = (0..n).map(|i| w[i] * coef.beta[i]).sum();
        let m_alpha_m = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| w[i] * alpha[(i, j)] * w[j]).sum();
        LognormalParams { m_beta, m_alpha_m }
    }
}

/// 𝒩((log(K/x) − (m′β − ½m′αm)t) / (m′αm·t)), or with √(m′αm·t) in the
/// denominator when `std_normalized`.
pub fn uniqueness_probability(params: LognormalParams, k_upper: f64, x: f64, t: f64, std_normalized: bool) -> f64 {
    if k_upper == f64::INFINITY {
        return 1.0;
    }
    if !(k_upper > 0.0) {
        return 0.0;
    }
    let var = params.m_alpha_m * t;
    let num = (k_upper / x).ln() - (params.m_beta - 0.5 * params.m_alpha_m) * t;
    let den = if std_normalized { var.sqrt() } else { var };
    if den == 0.0 {
        return if num >= 0.0 { 1.0 } else { 0.0 };
    }
    std_normal_cdf(num / den).clamp(0.0, 1.0)
}

/// Inputs to the equilibrium weight formula at one node.
#[derive(Debug, Clone)]
pub struct StrategyInputs<'a> {
    pub x: &'a [f64],
    pub m: f64,
    pub coef: &'a Coefficients,
    pub delta: f64,
    pub y_mode: YMode,
    pub renormalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRecord {
    pub step: usize,
    pub weights: Vec<f64>,
    pub std_err: Vec<f64>,
    pub sum: f64,
    pub min: f64,
    pub simplex_deviation: f64,
    pub warning: Option<String>,
}

impl From<&GradientBlock> for NodeGradient {
    fn from(g: &GradientBlock) -> Self {
        NodeGradient {
            m: f64::NAN,
            log_u: g.base.u_normalized.ln(),
            se_log_u: g.base.std_err_normalized / g.base.u_normalized,
            d_x: g.d_x.clone(),
            d_y: g.d_y.clone(),
            d_m: g.d_m,
            se_x: g.se_x.clone(),
            se_y: g.se_y.clone(),
            one_sided: g.one_sided.iter().any(|&b| b),
        }
    }
}

/// σ⁻¹, failing on a singular σ.
pub fn sigma_inv(coef: &Coefficients) -> Result<DMatrix<f64>> {
    let cond = coef.sigma_condition();
    if !(cond < crate::model::oracle::COND_LIMIT) {
        return Err(Error::SingularSigma { step: 0, cond });
    }
    coef.sigma.clone().try_inverse().ok_or(Error::SingularSigma { step: 0, cond })
}

/// τσ⁻¹, failing on a singular σ.
pub fn tau_sigma_inv(coef: &Coefficients) -> Result<DMatrix<f64>> {
    Ok(&coef.tau * sigma_inv(coef)?)
}

/// π_i = m_i + X_i D_i v̄ + Σ_p (τσ⁻¹)_{pi} D_p v̄ with v̄ = log û · 𝒱/(δX),
/// 𝒱 = δX + (1−δ)m.
pub fn equilibrium_strategies(step: usize, inp: &StrategyInputs<'_>, grad: &NodeGradient) -> Result<StrategyRecord> {
    let n = inp.x.len();
    if !(inp.delta > 0.0) {
        return Err(Error::Domain("equilibrium weights need δ > 0".into()));
    }
    let mw = market_weights(inp.x)?;
    let x_total: f64 = inp.x.iter().sum();
    let dx = inp.delta * x_total;
    let k = (dx + (1.0 - inp.delta) * inp.m) / dx;
    let dk = -(1.0 - inp.delta) * inp.m / (dx * x_total);
    let ts = tau_sigma_inv(inp.coef)?;
    let y_active = inp.y_mode == YMode::Exogenous;
    let mut w = vec![0.0; n];
    let mut se = vec![0.0; n];
    for i in 0..n {
        let dv = k * grad.d_x[i] + grad.log_u * dk;
        let mut yterm = 0.0;
        let mut yvar = 0.0;
        if y_active {
            for p in 0..n {
                yterm += ts[(p, i)] * k * grad.d_y[p];
                yvar += (ts[(p, i)] * k * grad.se_y[p]).powi(2);
            }
        }
        w[i] = mw.as_slice()[i] + inp.x[i] * dv + yterm;
        se[i] = ((inp.x[i] * k * grad.se_x[i]).powi(2) + (inp.x[i] * dk * grad.se_log_u).powi(2) + yvar).sqrt();
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

/// Solver settings, defaulting to the scenario's solver block.
#[derive(Debug, Clone, Serialize)]
pub struct NashSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub root_paths: usize,
    pub node_stride: usize,
    pub std_normalized: bool,
    pub renormalize: bool,
    pub strategies: bool,
    pub bump: BumpSpec,
}

impl NashSettings {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let s = &cfg.solver;
        NashSettings {
            damping: s.damping,
            tol: s.tol,
            max_iters: s.max_iters,
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

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauKStats {
    /// Fraction of outer paths that left K before T.
    pub exit_frequency: f64,
    pub exit_std_err: f64,
    pub mean_exit_time: Option<f64>,
    pub per_path: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessProbability {
    pub formula: f64,
    pub std_normalized: bool,
    pub params: LognormalParams,
    pub k_upper: f64,
    /// Empirical P(τ^K > T).
    pub empirical: f64,
    pub empirical_std_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumResult {
    pub schema_version: u32,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub residual_trace: Vec<f64>,
    /// sup |Φ(m) − m| re-evaluated from per-investor û values.
    pub certificate_residual: f64,
    pub tol: f64,
    pub damping: f64,
    pub node_steps: Vec<usize>,
    pub node_times: Vec<f64>,
    pub m_path: Vec<f64>,
    pub m_paths: Vec<Vec<f64>>,
    pub x_path: Vec<f64>,
    /// Prices of the first outer path at each node.
    pub prices: Vec<Vec<f64>>,
    pub u_normalized: Estimate,
    pub u_per_investor: Vec<f64>,
    pub u_std_err: Vec<f64>,
    /// investor × node
    pub strategies: Vec<Vec<StrategyRecord>>,
    pub a_path: Vec<f64>,
    pub d_path: Vec<f64>,
    pub k_upper: Vec<f64>,
    pub tau_k: TauKStats,
    pub uniqueness_probability: UniquenessProbability,
    /// Φ per outer path and node.
    #[serde(skip)]
    pub maps: Vec<Vec<PhiMap>>,
}

pub(crate) fn node_steps(steps: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=steps).step_by(stride.max(1)).collect();
    if *v.last().unwrap() != steps {
        v.push(steps);
    }
    v
}

/// Node states along `outer` common-noise paths.
#[allow(clippy::too_many_arguments)]
pub(crate) fn outer_states(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    start: &NodeState,
    steps: &[usize],
    outer: usize,
    seed: u64,
) -> Result<Vec<Vec<NodeState>>> {
    let last = *steps.last().expect("non-empty node grid");
    (0..outer)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(steps.len());
            let mut next = 0;
            run_path(oracle, spec, rule, v0, start.clone(), last, seed, p, |ev| {
                if next < steps.len() && ev.state.step == steps[next] {
                    out.push(ev.state.clone());
                    next += 1;
                }
            })?;
            Ok(out)
        })
        .collect()
}

/// Path counts and seeds for the conditional estimates behind Φ.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MomentPlan {
    pub inner_paths: usize,
    pub root_paths: usize,
    pub inner_seed: u64,
    pub root_seed: u64,
}

/// Builds Φ at every node of every outer path. Node 0 is shared.
#[allow(clippy::too_many_arguments)]
pub(crate) fn phi_maps(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    states: &[Vec<NodeState>],
    weight_sum: f64,
    delta: f64,
    plan: MomentPlan,
) -> Result<Vec<Vec<PhiMap>>> {
    let investors = v0.len();
    let root = node_moments(oracle, spec, rule, v0, &states[0][0], plan.root_paths, plan.root_seed)?;
    let jobs: Vec<(usize, usize)> =
        states.iter().enumerate().flat_map(|(p, row)| (1..row.len()).map(move |k| (p, k))).collect();
    let moments: Vec<NodeMoments> = jobs
        .par_iter()
        .map(|&(p, k)| {
            let seed = derive_seed(plan.inner_seed, ((p as u64) << 32) | k as u64);
            node_moments(oracle, spec, rule, v0, &states[p][k], plan.inner_paths, seed)
        })
        .collect::<Result<_>>()?;
    let mut it = moments.into_iter();
    Ok(states
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(k, s)| PhiMap {
                    step: s.step,
                    x_total: s.total(),
                    delta,
                    investors,
                    weight_sum,
                    moments: if k == 0 { root.clone() } else { it.next().expect("one moment per job") },
                })
                .collect()
        })
        .collect())
}

pub(crate) struct FixedPoint {
    pub m: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Damped iteration m ← (1−ω)m + ωΦ(m) at every node, stopping once every
/// node satisfies |Φ(m) − m| ≤ tol·max(1, |m|).
pub(crate) fn iterate_phi(maps: &[Vec<PhiMap>], mut m: Vec<Vec<f64>>, omega: f64, tol: f64, max_iters: usize) -> Result<FixedPoint> {
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for (row, mrow) in maps.iter().zip(m.iter_mut()) {
            for (f, mk) in row.iter().zip(mrow.iter_mut()) {
                *mk = (1.0 - omega) * *mk + omega * f.eval(*mk)?;
            }
        }
        let mut ok = true;
        residual = 0.0;
        for (row, mrow) in maps.iter().zip(&m) {
            for (f, &mk) in row.iter().zip(mrow) {
                let gap = (f.eval(mk)? - mk).abs();
                residual = residual.max(gap);
                ok &= gap <= tol * mk.abs().max(1.0);
            }
        }
        trace.push(residual);
        if ok {
            converged = true;
            break;
        }
    }
    Ok(FixedPoint { m, converged, iterations, residual, trace })
}

/// First exit of the total capitalization from K along each outer path.
pub(crate) fn exit_stats(maps: &[Vec<PhiMap>], regions: &[Vec<ContractionRegion>], times: &[f64]) -> TauKStats {
    let per_path: Vec<Option<f64>> = regions
        .iter()
        .zip(maps)
        .map(|(reg, row)| reg.iter().zip(row).zip(times).find(|((g, f), _)| !g.contains(f.x_total)).map(|(_, &t)| t))
        .collect();
    let exits: Vec<f64> = per_path.iter().map(|e| if e.is_some() { 1.0 } else { 0.0 }).collect();
    let exit_est = Estimate::from_samples(&exits);
    let exit_times: Vec<f64> = per_path.iter().flatten().copied().collect();
    TauKStats {
        exit_frequency: exit_est.mean,
        exit_std_err: exit_est.std_err,
        mean_exit_time: (!exit_times.is_empty()).then(|| exit_times.iter().sum::<f64>() / exit_times.len() as f64),
        per_path,
    }
}

/// Damped fixed-point iteration of Φ along simulated paths.
pub fn solve_nash(oracle: &dyn MarketOracle, config: &ScenarioConfig, settings: &NashSettings, seed: u64) -> Result<EquilibriumResult> {
    let r = config.resolve()?;
    let delta = config.delta;
    let investors = config.investors;
    if settings.outer_paths == 0 || settings.inner_paths == 0 || settings.root_paths == 0 {
        return Err(Error::Config("path counts must be positive".into()));
    }
    let rule = rule_from_spec(&config.strategy);
    let spec = EngineSpec::from_config(config);
    let steps = node_steps(config.steps, settings.node_stride);
    let start = NodeState::initial(&config.x0, &r.y0, &r.v0);

    let outer_spec = EngineSpec { deflator: false, ..spec.clone() };
    let states = outer_states(oracle, &outer_spec, rule.as_ref(), &r.v0, &start, &steps, settings.outer_paths, derive_seed(seed, 1))?;

    let mut ws: Vec<f64> = r.c.iter().zip(&r.v0).map(|(c, v)| c.exp() / v).collect();
    let weight_sum = sorted_sum(&mut ws);
    let plan = MomentPlan {
        inner_paths: settings.inner_paths,
        root_paths: settings.root_paths,
        inner_seed: derive_seed(seed, 2),
        root_seed: derive_seed(seed, 3),
    };
    let maps = phi_maps(oracle, &spec, rule.as_ref(), &r.v0, &states, weight_sum, delta, plan)?;
    let root = maps[0][0].moments.clone();

    let omega = if delta == 1.0 { 1.0 } else { settings.damping };
    let init: Vec<Vec<f64>> = maps.iter().map(|row| row.iter().map(|f| f.moments.m_node).collect()).collect();
    let FixedPoint { m, converged, iterations, residual, trace } = iterate_phi(&maps, init, omega, settings.tol, settings.max_iters)?;

    // independent evaluation through the per-investor form of Φ
    let mut certificate: f64 = 0.0;
    for (row, mrow) in maps.iter().zip(&m) {
        for (f, &mk) in row.iter().zip(mrow) {
            let u = vec![f.moments.u_hat(mk, delta); investors];
            certificate = certificate.max((phi_map(f.x_total, &u, &r.c, &r.v0, delta)? - mk).abs());
        }
    }

    let m0 = m[0][0];
    let u_est = root.u_estimate(m0, delta);
    let u_per_investor: Vec<f64> = r.c.iter().map(|c| c.exp() * u_est.mean).collect();
    let u_std_err: Vec<f64> = r.c.iter().map(|c| c.exp() * u_est.std_err).collect();

    let regions: Vec<Vec<ContractionRegion>> =
        maps.iter().zip(&m).map(|(row, mrow)| row.iter().zip(mrow).map(|(f, &mk)| f.region(mk)).collect()).collect();

    let times: Vec<f64> = steps.iter().map(|&s| spec.time(s)).collect();
    let tau_k = exit_stats(&maps, &regions, &times);
    let params = LognormalParams::at(oracle, 0.0, &config.x0, &r.y0, 1.0)?;
    let k0 = regions[0][0].k_upper;
    let uniq = UniquenessProbability {
        formula: uniqueness_probability(params, k0, start.total(), config.horizon, settings.std_normalized),
        std_normalized: settings.std_normalized,
        params,
        k_upper: k0,
        empirical: 1.0 - tau_k.exit_frequency,
        empirical_std_err: tau_k.exit_std_err,
    };

    let mut strategies = vec![Vec::new(); investors];
    if settings.strategies {
        let grad_seed = derive_seed(seed, 4);
        let records: Vec<StrategyRecord> = (0..steps.len())
            .into_par_iter()
            .map(|k| {
                let s = &states[0][k];
                let f = &maps[0][k];
                let mk = m[0][k];
                let g = node_gradient(
                    oracle,
                    &spec,
                    rule.as_ref(),
                    &r.v0,
                    s,
                    &f.moments,
                    mk,
                    delta,
                    settings.bump,
                    settings.inner_paths,
                    derive_seed(grad_seed, k as u64),
                )?;
                let mut coef = Coefficients::zeros(config.n);
                oracle.evaluate(&MarketState { t: spec.time(s.step), x: &s.x, y: &s.y, m: mk }, &mut coef)?;
                let inp = StrategyInputs { x: &s.x, m: mk, coef: &coef, delta, y_mode: config.y_mode, renormalize: settings.renormalize };
                equilibrium_strategies(s.step, &inp, &g)
            })
            .collect::<Result<_>>()?;
        for row in strategies.iter_mut() {
            row.clone_from(&records);
        }
    }

    Ok(EquilibriumResult {
        schema_version: SCHEMA_VERSION,
        converged,
        iterations,
        residual,
        residual_trace: trace,
        certificate_residual: certificate,
        tol: settings.tol,
        damping: omega,
        node_times: times,
        node_steps: steps,
        m_path: m[0].clone(),
        x_path: maps[0].iter().map(|f| f.x_total).collect(),
        m_paths: m,
        prices: states[0].iter().map(|s| s.x.clone()).collect(),
        u_normalized: u_est,
        u_per_investor,
        u_std_err,
        strategies,
        a_path: regions[0].iter().map(|g| g.a).collect(),
        d_path: regions[0].iter().map(|g| g.d).collect(),
        k_upper: regions[0].iter().map(|g| g.k_upper).collect(),
        tau_k,
        uniqueness_probability: uniq,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_single_investor() {
        let v = phi_map(1.0, &[1.0], &[0.0], &[1.0], 0.5).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn phi_delta_one_ignores_peers() {
        let u = [1.2, 0.8, 1.0];
        let c = [0.1, 0.0, -0.3];
        let v = [1.0, 2.0, 0.5];
        let expect = 2.0 * (0.1f64.exp() * 1.2 + 0.8 / 2.0 + (-0.3f64).exp() * 1.0 / 0.5) / 3.0;
        assert!((phi_map(2.0, &u, &c, &v, 1.0).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn phi_is_symmetric_bitwise() {
        let u = [1.0, 1.0, 1.0];
        let a = phi_map(1.5, &u, &[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0], 0.4).unwrap();
        let b = phi_map(1.5, &u, &[0.3, 0.1, 0.2], &[3.0, 1.0, 2.0], 0.4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn phi_reports_infeasibility() {
        let e = phi_map(1.0, &[1.0], &[3f64.ln()], &[1.0], 0.5).unwrap_err();
        assert!(matches!(e, Error::Infeasible(ref s) if s.contains("preference condition")));
    }

    #[test]
    fn region_arithmetic() {
        let g = ContractionRegion::from_parts(0.5, 0.1);
        assert!((g.k_upper - 2.5).abs() < 1e-15);
        assert_eq!(ContractionRegion::from_parts(0.5, 0.0).k_upper, f64::INFINITY);
        let g = contraction_region(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.5);
        assert_eq!(g.k_upper, f64::INFINITY);
        assert_eq!(g.a, 1.0);
    }

    #[test]
    fn probability_edge_cases() {
        let p = LognormalParams { m_beta: 0.02, m_alpha_m: 0.04 };
        assert_eq!(uniqueness_probability(p, f64::INFINITY, 1.0, 1.0, false), 1.0);
        // argument zero: log K/x equals the drift term
        let k = ((0.02 - 0.02) * 1.0f64).exp();
        assert!((uniqueness_probability(p, k, 1.0, 1.0, false) - 0.5).abs() < 1e-15);
        assert!((uniqueness_probability(p, k, 1.0, 1.0, true) - 0.5).abs() < 1e-15);
    }

    fn flat_coef(n: usize) -> Coefficients {
        let mut c = Coefficients::zeros(n);
        for i in 0..n {
            c.sigma[(i, i)] = 0.2;
        }
        c
    }

    fn zero_grad(n: usize, log_u: f64) -> NodeGradient {
        NodeGradient {
            m: 1.0,
            log_u,
            se_log_u: 0.0,
            d_x: vec![0.0; n],
            d_y: vec![0.0; n],
            d_m: 0.0,
            se_x: vec![0.0; n],
            se_y: vec![0.0; n],
            one_sided: false,
        }
    }

    #[test]
    fn zero_gradients_give_market_weights() {
        let coef = flat_coef(2);
        let inp = StrategyInputs { x: &[3.0, 1.0], m: 1.0, coef: &coef, delta: 0.5, y_mode: YMode::Endogenous, renormalize: false };
        let s = equilibrium_strategies(0, &inp, &zero_grad(2, 0.0)).unwrap();
        assert_eq!(s.weights, vec![0.75, 0.25]);
        assert_eq!(s.simplex_deviation, 0.0);
    }

    #[test]
    fn renormalization_restores_unit_sum() {
        let coef = flat_coef(2);
        let mut g = zero_grad(2, 0.1);
        g.d_x = vec![0.3, -0.1];
        let inp = StrategyInputs { x: &[1.0, 1.0], m: 1.0, coef: &coef, delta: 0.5, y_mode: YMode::Endogenous, renormalize: true };
        let s = equilibrium_strategies(0, &inp, &g).unwrap();
        assert!((s.sum - 1.0).abs() < 1e-15);
        let raw = equilibrium_strategies(0, &StrategyInputs { renormalize: false, ..inp }, &g).unwrap();
        assert!(raw.simplex_deviation > 0.0);
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let coef = Coefficients::zeros(2);
        let inp = StrategyInputs { x: &[1.0, 1.0], m: 1.0, coef: &coef, delta: 0.5, y_mode: YMode::Endogenous, renormalize: false };
        assert!(matches!(equilibrium_strategies(0, &inp, &zero_grad(2, 0.0)), Err(Error::SingularSigma { .. })));
    }
}
