//! Node-started estimates of û as a function of the peer average m.
//!
//! From a node with total capitalization X and peer average m the
//! normalized proportion is
//!
//! û(m) = (δ·E[X_T L_T/L_t] + (1−δ)·m·E[(P_T/P_t) L_T/L_t]) / (δX + (1−δ)m),
//!
//! where P is the peer average under the peers' rule. Both expectations
//! are independent of m, so one conditional run serves every m.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{run_path, EngineSpec, NodeState, StrategyRule};
use crate::error::{Error, Result};
use crate::model::{MarketOracle, YMode};
use crate::stats::{mean, sorted_sum, Estimate};

use super::mc::BumpSpec;

/// Conditional moments at one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeMoments {
    pub x_total: f64,
    /// Peer average at the node.
    pub m_node: f64,
    pub e_x: f64,
    pub e_p: f64,
    #[serde(skip)]
    samples_x: Vec<f64>,
    #[serde(skip)]
    samples_p: Vec<f64>,
    /// First-step stock increments, paths × n.
    #[serde(skip)]
    first_dw: Vec<f64>,
    /// First-step growth of L·P, minus one.
    #[serde(skip)]
    first_growth: Vec<f64>,
}

/// Least-squares slope of one response on the Brownian increments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regression {
    pub slope: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl NodeMoments {
    pub fn n_paths(&self) -> usize {
        self.samples_x.len()
    }

    pub fn benchmark(&self, m: f64, delta: f64) -> f64 {
        delta * self.x_total + (1.0 - delta) * m
    }

    pub fn u_hat(&self, m: f64, delta: f64) -> f64 {
        (delta * self.e_x + (1.0 - delta) * m * self.e_p) / self.benchmark(m, delta)
    }

    /// ∂û/∂m.
    pub fn d_m_u_hat(&self, m: f64, delta: f64) -> f64 {
        (1.0 - delta) * (self.e_p - self.u_hat(m, delta)) / self.benchmark(m, delta)
    }

    /// û(m) with its Monte Carlo standard error.
    pub fn u_estimate(&self, m: f64, delta: f64) -> Estimate {
        Estimate::from_samples(&self.u_samples(m, delta))
    }

    pub fn u_samples(&self, m: f64, delta: f64) -> Vec<f64> {
        let b = self.benchmark(m, delta);
        self.samples_x
            .iter()
            .zip(&self.samples_p)
            .map(|(x, p)| (delta * x + (1.0 - delta) * m * p) / b)
            .collect()
    }

    /// Regresses the one-step relative change of L·P on dW across the
    /// conditional paths, with an intercept. `None` at the terminal node.
    pub fn growth_regression(&self) -> Option<Regression> {
        let rows = self.first_growth.len();
        if rows == 0 {
            return None;
        }
        let n = self.first_dw.len() / rows;
        if rows <= n + 1 {
            return None;
        }
        let design = DMatrix::from_fn(rows, n + 1, |r, k| if k == 0 { 1.0 } else { self.first_dw[r * n + k - 1] });
        let y = DVector::from_column_slice(&self.first_growth);
        let gram = design.transpose() * &design;
        let inv = gram.try_inverse()?;
        let coef = &inv * design.transpose() * &y;
        let resid = &y - &design * &coef;
        let s2 = resid.norm_squared() / (rows - n - 1) as f64;
        Some(Regression {
            slope: (1..=n).map(|k| coef[k]).collect(),
            std_err: (1..=n).map(|k| (s2 * inv[(k, k)]).sqrt()).collect(),
        })
    }
}

/// Collapses a symmetric population onto one representative whose wealth is
/// the population mean and whose normalizer keeps the peer average.
fn representative(state: &NodeState, v0: &[f64]) -> (NodeState, Vec<f64>) {
    let mut w = state.v.clone();
    let vbar = sorted_sum(&mut w) / w.len() as f64;
    let m = state.peer_average(v0);
    let rep = NodeState { v: vec![vbar], log_l: 0.0, ..state.clone() };
    (rep, vec![vbar / m])
}

/// Runs `n_paths` conditional paths from `state` under `rule` for everyone.
#[allow(clippy::too_many_arguments)]
pub fn node_moments(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    state: &NodeState,
    n_paths: usize,
    seed: u64,
) -> Result<NodeMoments> {
    if n_paths == 0 {
        return Err(Error::Config("conditional estimate needs at least one path".into()));
    }
    let x_total = state.total();
    let m_node = state.peer_average(v0);
    let (start, v0_run, spec_run) = if rule.symmetric() {
        let (s, w) = representative(state, v0);
        let mut sp = spec.clone();
        sp.investors = 1;
        (s, w, sp)
    } else {
        (NodeState { log_l: 0.0, ..state.clone() }, v0.to_vec(), spec.clone())
    };
    let mut spec_run = spec_run;
    spec_run.deflator = true;
    let p0 = start.peer_average(&v0_run);
    let first = start.step;
    type Run = (f64, f64, Option<(Vec<f64>, f64)>);
    let runs: Vec<Run> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut dw0 = Vec::new();
            let mut dlog_l0 = 0.0;
            let mut growth = None;
            let end = run_path(oracle, &spec_run, rule, &v0_run, start.clone(), spec_run.steps, seed, p, |ev| {
                if ev.state.step == first {
                    if let Some(dw) = ev.dw {
                        dw0 = dw.to_vec();
                        dlog_l0 = ev.dlog_l;
                    }
                } else if ev.state.step == first + 1 {
                    growth = Some(dlog_l0.exp() * ev.state.peer_average(&v0_run) / p0 - 1.0);
                }
            })?;
            let l = end.log_l.exp();
            Ok((end.total() * l, end.peer_average(&v0_run) / p0 * l, growth.map(|g| (dw0, g))))
        })
        .collect::<Result<_>>()?;
    let mut samples_x = Vec::with_capacity(n_paths);
    let mut samples_p = Vec::with_capacity(n_paths);
    let mut first_dw = Vec::new();
    let mut first_growth = Vec::new();
    for (x, pp, g) in runs {
        samples_x.push(x);
        samples_p.push(pp);
        if let Some((dw, g)) = g {
            first_dw.extend(dw);
            first_growth.push(g);
        }
    }
    Ok(NodeMoments {
        x_total,
        m_node,
        e_x: mean(&samples_x),
        e_p: mean(&samples_p),
        samples_x,
        samples_p,
        first_dw,
        first_growth,
    })
}

/// Derivatives of log û at a node, taken at a fixed m.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeGradient {
    pub m: f64,
    pub log_u: f64,
    pub se_log_u: f64,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
    pub d_m: f64,
    pub se_x: Vec<f64>,
    pub se_y: Vec<f64>,
    pub one_sided: bool,
}

/// Bumps each x_i (and y_p outside endogenous mode) with common random
/// numbers and differences log û(m). The m-derivative is analytic.
#[allow(clippy::too_many_arguments)]
pub fn node_gradient(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    state: &NodeState,
    centre: &NodeMoments,
    m: f64,
    delta: f64,
    bump: BumpSpec,
    n_paths: usize,
    seed: u64,
) -> Result<NodeGradient> {
    let n = state.x.len();
    let u0 = centre.u_samples(m, delta);
    let est = Estimate::from_samples(&u0);
    if !(est.mean > 0.0) {
        return Err(Error::Domain(format!("conditional estimate of û is not positive at step {}", state.step)));
    }
    let mut one_sided = false;
    let mut diff = |coord: usize, on_y: bool| -> Result<(f64, f64)> {
        let base = if on_y { state.y[coord] } else { state.x[coord] };
        let h = bump.size(base);
        let shifted = |by: f64| -> Result<Vec<f64>> {
            let mut s = state.clone();
            if on_y {
                s.y[coord] += by;
            } else {
                s.x[coord] += by;
            }
            let mm = node_moments(oracle, spec, rule, v0, &s, n_paths, seed)?;
            Ok(mm.u_samples(m, delta))
        };
        let up = shifted(h)?;
        let (down, width) = if base - h > 0.0 {
            (shifted(-h)?, 2.0 * h)
        } else {
            one_sided = true;
            (u0.clone(), h)
        };
        let (mu, md) = (mean(&up), mean(&down));
        if !(mu > 0.0 && md > 0.0) {
            return Err(Error::Domain("bumped estimate of û is not positive".into()));
        }
        let d = (mu.ln() - md.ln()) / width;
        let paired: Vec<f64> = up.iter().zip(&down).map(|(a, b)| a / mu - b / md).collect();
        let se = Estimate::from_samples(&paired).std_err / width;
        Ok((d, se))
    };
    let mut d_x = vec![0.0; n];
    let mut se_x = vec![0.0; n];
    for i in 0..n {
        (d_x[i], se_x[i]) = diff(i, false)?;
    }
    let mut d_y = vec![0.0; n];
    let mut se_y = vec![0.0; n];
    if spec.y_mode != YMode::Endogenous {
        for p in 0..n {
            (d_y[p], se_y[p]) = diff(p, true)?;
        }
    }
    Ok(NodeGradient {
        m,
        log_u: est.mean.ln(),
        se_log_u: est.std_err / est.mean,
        d_x,
        d_y,
        d_m: centre.d_m_u_hat(m, delta) / est.mean,
        se_x,
        se_y,
        one_sided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::MarketRule;
    use crate::model::ConstantMarket;

    fn spec(steps: usize) -> EngineSpec {
        EngineSpec {
            n: 1,
            investors: 3,
            dt: 1.0 / steps as f64,
            steps,
            y_mode: YMode::Endogenous,
            cap: None,
            strict_simplex: false,
            tol_simplex: 1e-9,
            deflator: true,
        }
    }

    #[test]
    fn frozen_market_gives_unit_u() {
        let o = ConstantMarket::diagonal_gbm(&[0.0], 0.0);
        let v0 = [1.0, 2.0, 0.5];
        let s = NodeState::initial(&[1.3], &[0.0], &v0);
        let mm = node_moments(&o, &spec(4), &MarketRule, &v0, &s, 8, 1).unwrap();
        for m in [0.2, 1.0, 3.0] {
            assert!((mm.u_hat(m, 0.4) - 1.0).abs() < 1e-14);
            assert!(mm.d_m_u_hat(m, 0.4).abs() < 1e-14);
        }
        let g = mm.growth_regression().unwrap();
        assert!(g.slope[0].abs() < 1e-14);
    }

    #[test]
    fn growth_slope_recovers_portfolio_volatility() {
        let o = ConstantMarket::diagonal_gbm(&[0.0], 0.3);
        let v0 = [1.0];
        let s = NodeState::initial(&[1.0], &[0.0], &v0);
        let mut sp = spec(50);
        sp.investors = 1;
        let mm = node_moments(&o, &sp, &MarketRule, &v0, &s, 4000, 2).unwrap();
        let g = mm.growth_regression().unwrap();
        assert!((g.slope[0] - 0.3).abs() < 4.0 * g.std_err[0] + 0.01, "{g:?}");
    }

    #[test]
    fn u_hat_is_linear_fractional_in_m() {
        let mm = NodeMoments {
            x_total: 2.0,
            m_node: 1.0,
            e_x: 1.8,
            e_p: 0.7,
            samples_x: vec![1.8],
            samples_p: vec![0.7],
            first_dw: vec![],
            first_growth: vec![],
        };
        let delta = 0.3;
        let h = 1e-6;
        let m = 1.4;
        let fd = (mm.u_hat(m + h, delta) - mm.u_hat(m - h, delta)) / (2.0 * h);
        assert!((fd - mm.d_m_u_hat(m, delta)).abs() < 1e-8);
        assert!((mm.u_hat(m, 1.0) - 0.9).abs() < 1e-15);
    }
}
