//! Single-path time stepping shared by every simulator.

use rand_chacha::ChaCha8Rng;

use super::strategy::{StrategyContext, StrategyRule};
use crate::error::{Error, Result};
use crate::model::{simplex_deviation, Coefficients, MarketOracle, MarketState, ScenarioConfig, YMode};
use crate::rng::{self, Purpose};
use crate::stats::sorted_sum;

/// Discretization settings shared by all paths of a run.
#[derive(Debug, Clone)]
pub struct EngineSpec {
    pub n: usize,
    pub investors: usize,
    pub dt: f64,
    pub steps: usize,
    pub y_mode: YMode,
    pub cap: Option<f64>,
    pub strict_simplex: bool,
    pub tol_simplex: f64,
    pub deflator: bool,
}

impl EngineSpec {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        EngineSpec {
            n: cfg.n,
            investors: cfg.investors,
            dt: cfg.dt(),
            steps: cfg.steps,
            y_mode: cfg.y_mode,
            cap: cfg.solver.log_increment_cap,
            strict_simplex: cfg.solver.strict_simplex,
            tol_simplex: cfg.solver.tol_simplex,
            deflator: true,
        }
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }
}

/// Full state at a grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub step: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub log_l: f64,
    /// Exogenous-Y clamp events so far.
    pub clamps: usize,
}

impl NodeState {
    pub fn initial(x0: &[f64], y0: &[f64], v0: &[f64]) -> Self {
        NodeState { step: 0, x: x0.to_vec(), y: y0.to_vec(), v: v0.to_vec(), log_l: 0.0, clamps: 0 }
    }

    pub fn total(&self) -> f64 {
        self.x.iter().sum()
    }

    /// (1/N) Σ V^ℓ / v^ℓ, independent of investor order.
    pub fn peer_average(&self, v0: &[f64]) -> f64 {
        let mut r: Vec<f64> = self.v.iter().zip(v0).map(|(v, w)| v / w).collect();
        sorted_sum(&mut r) / self.v.len() as f64
    }
}

/// What an observer sees at a node. `coef`, `dw` and the price-of-risk
/// vectors are present for every node except the last one.
pub struct NodeEvent<'a> {
    pub state: &'a NodeState,
    /// investors × n, row-major.
    pub weights: &'a [f64],
    pub coef: Option<&'a Coefficients>,
    pub dw: Option<&'a [f64]>,
    pub dw_y: Option<&'a [f64]>,
    pub theta: Option<&'a [f64]>,
    pub lambda: Option<&'a [f64]>,
    pub dlog_l: f64,
}

struct Noise {
    stock: ChaCha8Rng,
    capital: Option<ChaCha8Rng>,
}

fn capped(inc: f64, cap: Option<f64>) -> f64 {
    match cap {
        Some(c) => inc.clamp(-c, c),
        None => inc,
    }
}

fn ensure_finite(values: &[f64], step: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: what.to_string() })
    }
}

fn fill_weights(
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    state: &NodeState,
    v0: &[f64],
    path: usize,
    weights: &mut [f64],
) -> Result<()> {
    let n = spec.n;
    let ctx = StrategyContext {
        step: state.step,
        t: spec.time(state.step),
        x: &state.x,
        y: &state.y,
        wealth: &state.v,
        v0,
        path,
    };
    if rule.symmetric() {
        rule.weights(&ctx, 0, &mut weights[..n]);
        let (head, tail) = weights.split_at_mut(n);
        for chunk in tail.chunks_mut(n) {
            chunk.copy_from_slice(head);
        }
    } else {
        for (l, chunk) in weights.chunks_mut(n).enumerate() {
            rule.weights(&ctx, l, chunk);
        }
    }
    if spec.strict_simplex {
        for (l, chunk) in weights.chunks(n).enumerate() {
            let dev = simplex_deviation(chunk);
            if dev > spec.tol_simplex {
                return Err(Error::Admissibility { investor: l, step: state.step, deviation: dev });
            }
        }
    }
    ensure_finite(weights, state.step, "strategy weights")
}

fn endogenous_y(state: &mut NodeState, weights: &[f64], n: usize, scratch: &mut Vec<f64>) {
    let inv = state.v.len() as f64;
    for i in 0..n {
        scratch.clear();
        scratch.extend(state.v.iter().enumerate().map(|(l, v)| v * weights[l * n + i]));
        state.y[i] = sorted_sum(scratch) / inv;
    }
}

fn fill_price_of_risk(coef: &Coefficients, spec: &EngineSpec, step: usize, theta: &mut [f64], lambda: &mut [f64]) -> Result<()> {
    if coef.diagonal {
        for i in 0..spec.n {
            let s = coef.sigma[(i, i)];
            theta[i] = if coef.beta[i] == 0.0 { 0.0 } else { coef.beta[i] / s };
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::SingularSigma { step, cond: coef.sigma_condition() });
        }
    } else {
        let th = coef.theta(step)?;
        theta.copy_from_slice(th.as_slice());
    }
    if spec.y_mode == YMode::Exogenous {
        let la = coef.lambda(step)?;
        lambda.copy_from_slice(la.as_slice());
        ensure_finite(lambda, step, "capital price of risk λ")?;
    } else {
        lambda.fill(0.0);
    }
    Ok(())
}

/// Advances one path from `start` to grid index `end_step`, calling
/// `observe` at every node. Noise is drawn from the `(seed, path)` streams.
#[allow(clippy::too_many_arguments)]
pub fn run_path<F>(
    oracle: &dyn MarketOracle,
    spec: &EngineSpec,
    rule: &dyn StrategyRule,
    v0: &[f64],
    start: NodeState,
    end_step: usize,
    seed: u64,
    path: usize,
    mut observe: F,
) -> Result<NodeState>
where
    F: FnMut(&NodeEvent<'_>),
{
    let n = spec.n;
    let investors = spec.investors;
    if start.x.len() != n || start.v.len() != investors || v0.len() != investors || start.y.len() != n {
        return Err(Error::Shape(format!(
            "state has {} prices / {} wealths, expected {n} / {investors}",
            start.x.len(),
            start.v.len()
        )));
    }
    let mut noise = Noise {
        stock: rng::stream(seed, path as u64, Purpose::StockNoise),
        capital: (spec.y_mode == YMode::Exogenous).then(|| rng::stream(seed, path as u64, Purpose::CapitalNoise)),
    };
    let sd = spec.dt.sqrt();
    let mut state = start;
    let mut weights = vec![0.0; investors * n];
    let mut coef = Coefficients::zeros(n);
    let mut dw = vec![0.0; n];
    let mut dw_y = vec![0.0; n];
    let mut sdw = vec![0.0; n];
    let mut theta = vec![0.0; n];
    let mut lambda = vec![0.0; n];
    let mut alpha_diag = vec![0.0; n];
    let mut sp = vec![0.0; n];
    let mut scratch = Vec::with_capacity(investors);

    while state.step < end_step {
        let step = state.step;
        fill_weights(spec, rule, &state, v0, path, &mut weights)?;
        if spec.y_mode == YMode::Endogenous {
            endogenous_y(&mut state, &weights, n, &mut scratch);
        }
        let m = state.peer_average(v0);
        let ms = MarketState { t: spec.time(step), x: &state.x, y: &state.y, m };
        oracle.evaluate(&ms, &mut coef)?;
        ensure_finite(coef.beta.as_slice(), step, "drift β")?;
        ensure_finite(coef.sigma.as_slice(), step, "volatility σ")?;

        rng::fill_normal(&mut noise.stock, sd, &mut dw);
        if let Some(r) = noise.capital.as_mut() {
            rng::fill_normal(r, sd, &mut dw_y);
        }

        let mut dlog_l = 0.0;
        if spec.deflator {
            fill_price_of_risk(&coef, spec, step, &mut theta, &mut lambda)?;
            let mut quad = 0.0;
            for i in 0..n {
                dlog_l -= theta[i] * dw[i] + lambda[i] * dw_y[i];
                quad += theta[i] * theta[i] + lambda[i] * lambda[i];
            }
            dlog_l -= 0.5 * quad * spec.dt;
        }

        observe(&NodeEvent {
            state: &state,
            weights: &weights,
            coef: Some(&coef),
            dw: Some(&dw),
            dw_y: (spec.y_mode == YMode::Exogenous).then_some(&dw_y[..]),
            theta: spec.deflator.then_some(&theta[..]),
            lambda: spec.deflator.then_some(&lambda[..]),
            dlog_l,
        });

        // σ dW and diag(α)
        if coef.diagonal {
            for i in 0..n {
                let s = coef.sigma[(i, i)];
                sdw[i] = s * dw[i];
                alpha_diag[i] = s * s;
            }
        } else {
            for i in 0..n {
                let mut acc = 0.0;
                let mut a = 0.0;
                for k in 0..n {
                    let s = coef.sigma[(i, k)];
                    acc += s * dw[k];
                    a += s * s;
                }
                sdw[i] = acc;
                alpha_diag[i] = a;
            }
        }

        for (l, v) in state.v.iter_mut().enumerate() {
            let w = &weights[l * n..(l + 1) * n];
            let mut drift = 0.0;
            let mut vol = 0.0;
            for i in 0..n {
                drift += w[i] * coef.beta[i];
                vol += w[i] * sdw[i];
            }
            let quad = if coef.diagonal {
                (0..n).map(|i| w[i] * w[i] * alpha_diag[i]).sum::<f64>()
            } else {
                for k in 0..n {
                    sp[k] = (0..n).map(|i| w[i] * coef.sigma[(i, k)]).sum();
                }
                sp.iter().map(|s| s * s).sum::<f64>()
            };
            *v *= capped((drift - 0.5 * quad) * spec.dt + vol, spec.cap).exp();
        }
        for i in 0..n {
            let inc = (coef.beta[i] - 0.5 * alpha_diag[i]) * spec.dt + sdw[i];
            state.x[i] *= capped(inc, spec.cap).exp();
        }
        match spec.y_mode {
            YMode::Exogenous => {
                for p in 0..n {
                    let mut noise_term = 0.0;
                    for q in 0..n {
                        noise_term += coef.tau[(p, q)] * dw_y[q];
                    }
                    let next = state.y[p] + coef.gamma[p] * spec.dt + noise_term;
                    if next < 0.0 {
                        state.clamps += 1;
                        state.y[p] = 0.0;
                    } else {
                        state.y[p] = next;
                    }
                }
            }
            YMode::Endogenous | YMode::Frozen => {}
        }
        state.log_l += dlog_l;
        state.step += 1;
        ensure_finite(&state.x, state.step, "stock price")?;
        ensure_finite(&state.v, state.step, "wealth")?;
        ensure_finite(&state.y, state.step, "invested capital")?;
        if !state.log_l.is_finite() {
            return Err(Error::NonFinite { step: state.step, what: "deflator".into() });
        }
    }

    fill_weights(spec, rule, &state, v0, path, &mut weights)?;
    if spec.y_mode == YMode::Endogenous {
        endogenous_y(&mut state, &weights, n, &mut scratch);
    }
    observe(&NodeEvent {
        state: &state,
        weights: &weights,
        coef: None,
        dw: None,
        dw_y: None,
        theta: None,
        lambda: None,
        dlog_l: 0.0,
    });
    Ok(state)
}
