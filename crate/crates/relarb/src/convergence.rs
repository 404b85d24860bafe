//! Large-population checks: Nash values against the mean-field value,
//! ε-equilibrium gaps of the mean-field strategy, and Wasserstein decay of
//! the empirical wealth law.

use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{run_path, simulate_mean_field_path, DeviationRule, EngineSpec, EqualRule, FixedRule, MarketRule, NodeState, StrategyRule};
use crate::error::{Error, Result};
use crate::measure::{empirical_1d, wasserstein2_1d};
use crate::mfg::{solve_mfe, MfgSettings};
use crate::model::{MarketOracle, ScenarioConfig, SCHEMA_VERSION};
use crate::nash::{solve_nash, NashSettings};
use crate::rng::{self, derive_seed, Purpose};
use crate::stats::{mean, ols_slope, Estimate};

/// Mean of per-seed estimates, with the larger of the pooled within-seed
/// error and the across-seed error.
fn pool(estimates: &[Estimate]) -> Estimate {
    let k = estimates.len() as f64;
    let means: Vec<f64> = estimates.iter().map(|e| e.mean).collect();
    let within = estimates.iter().map(|e| e.std_err.powi(2)).sum::<f64>().sqrt() / k;
    let across = Estimate::from_samples(&means).std_err;
    Estimate { mean: mean(&means), std_err: within.max(across), n: estimates.iter().map(|e| e.n).sum() }
}

/// Normalized Nash value at one population size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub investors: usize,
    pub u: Option<Estimate>,
    pub gap: Option<f64>,
    pub gap_std_err: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub u_mf: Estimate,
    pub points: Vec<SweepPoint>,
    /// Number of consecutive pairs whose gap increased.
    pub increases: usize,
    /// Increases larger than twice their combined standard error.
    pub significant_increases: usize,
}

fn check_increasing(n_values: &[usize]) -> Result<()> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("population sizes must be non-empty and strictly increasing".into()));
    }
    Ok(())
}

/// Solves the Nash problem at each N (i.i.d. draws of c and v0 per seed)
/// and the mean-field problem once per seed, comparing normalized values û.
pub fn sweep_n(
    oracle: &dyn MarketOracle,
    template: &ScenarioConfig,
    n_values: &[usize],
    seeds: &[u64],
    nash: &NashSettings,
    mfg: &MfgSettings,
) -> Result<Sweep> {
    check_increasing(n_values)?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mf: Vec<Estimate> = seeds
        .iter()
        .map(|&s| {
            let mut cfg = template.clone();
            cfg.seed = s;
            solve_mfe(oracle, &cfg, mfg, s).map(|r| r.u_normalized)
        })
        .collect::<Result<_>>()?;
    let u_mf = pool(&mf);
    let points: Vec<SweepPoint> = n_values
        .iter()
        .map(|&n| {
            let runs: Result<Vec<Estimate>> = seeds
                .iter()
                .map(|&s| {
                    let mut cfg = template.with_investors(n);
                    cfg.seed = s;
                    solve_nash(oracle, &cfg, nash, s).map(|r| r.u_normalized)
                })
                .collect();
            match runs {
                Ok(est) => {
                    let u = pool(&est);
                    SweepPoint {
                        investors: n,
                        gap: Some((u.mean - u_mf.mean).abs()),
                        gap_std_err: Some((u.std_err.powi(2) + u_mf.std_err.powi(2)).sqrt()),
                        u: Some(u),
                        failure: None,
                    }
                }
                Err(e) => SweepPoint { investors: n, u: None, gap: None, gap_std_err: None, failure: Some(e.to_string()) },
            }
        })
        .collect();
    let mut increases = 0;
    let mut significant_increases = 0;
    for w in points.windows(2) {
        if let (Some(a), Some(b)) = (w[0].gap, w[1].gap) {
            if b > a {
                increases += 1;
                let se = (w[0].gap_std_err.unwrap().powi(2) + w[1].gap_std_err.unwrap().powi(2)).sqrt();
                if b - a > 2.0 * se {
                    significant_increases += 1;
                }
            }
        }
    }
    Ok(Sweep { n_values: n_values.to_vec(), seeds: seeds.to_vec(), u_mf, points, increases, significant_increases })
}

/// Alternative strategy for the first investor.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    /// The mean-field strategy itself.
    Equilibrium,
    Market,
    Equal,
    Fixed(Vec<f64>),
}

impl Deviation {
    pub fn label(&self) -> String {
        match self {
            Deviation::Equilibrium => "equilibrium".into(),
            Deviation::Market => "market".into(),
            Deviation::Equal => "equal".into(),
            Deviation::Fixed(w) => format!("fixed{w:?}"),
        }
    }
}

/// Market, equal weight and two uniform draws from the simplex.
pub fn default_deviation_grid(n: usize, seed: u64) -> Vec<Deviation> {
    let mut r = rng::stream(seed, 0, Purpose::Deviation);
    let mut grid = vec![Deviation::Market, Deviation::Equal];
    for _ in 0..2 {
        let e: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(Exp1)).collect();
        let s: f64 = e.iter().sum();
        grid.push(Deviation::Fixed(e.iter().map(|v| v / s).collect()));
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationOutcome {
    pub deviation: String,
    /// Cost of the first investor after deviating.
    pub cost: f64,
    /// J(equilibrium) − J(deviation) with its paired standard error.
    pub gain: f64,
    pub gain_std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonEstimate {
    pub investors: usize,
    pub cost_equilibrium: f64,
    /// max over the grid of the positive part of the gain.
    pub epsilon: f64,
    pub std_err: f64,
    pub outcomes: Vec<DeviationOutcome>,
}

/// Per-path (L_T·𝒱_T, L_T·V¹_T/v¹) with the first investor on `first` and
/// everyone else on `rest`.
#[allow(clippy::too_many_arguments)]
fn cost_samples(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    first: Arc<dyn StrategyRule>,
    rest: Arc<dyn StrategyRule>,
    v0: &[f64],
    start: &NodeState,
    paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let spec = EngineSpec::from_config(config);
    let rule = DeviationRule { first, rest };
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let end = run_path(oracle, &spec, &rule, v0, start.clone(), config.steps, seed, p, |_| {})?;
            let l = end.log_l.exp();
            let bench = config.delta * end.total() + (1.0 - config.delta) * end.peer_average(v0);
            Ok((l * bench, l * end.v[0] / v0[0]))
        })
        .collect()
}

/// J¹ = e^{c¹}·E[L_T 𝒱_T] / (𝒱_0·E[L_T V¹_T/v¹]): the initial fraction of the
/// benchmark at which the first investor's deflated expected wealth meets
/// the deflated expected target. Gains are computed on common noise.
pub fn epsilon_equilibrium(
    oracle: &dyn MarketOracle,
    config: &ScenarioConfig,
    equilibrium: Arc<dyn StrategyRule>,
    deviations: &[Deviation],
    paths: usize,
    seed: u64,
) -> Result<EpsilonEstimate> {
    if deviations.is_empty() {
        return Err(Error::Domain("the deviation grid is empty".into()));
    }
    if paths < 2 {
        return Err(Error::Config("at least two paths are needed for an ε estimate".into()));
    }
    let r = config.resolve()?;
    let start = NodeState::initial(&config.x0, &r.y0, &r.v0);
    let bench0 = config.delta * start.total() + (1.0 - config.delta) * start.peer_average(&r.v0);
    let scale = r.c[0].exp() / bench0;
    let cost = |s: &[(f64, f64)]| -> (f64, Vec<f64>) {
        let a = mean(&s.iter().map(|p| p.0).collect::<Vec<_>>());
        let b = mean(&s.iter().map(|p| p.1).collect::<Vec<_>>());
        let j = scale * a / b;
        (j, s.iter().map(|p| j * (p.0 / a - p.1 / b)).collect())
    };
    let base = cost_samples(oracle, config, equilibrium.clone(), equilibrium.clone(), &r.v0, &start, paths, seed)?;
    let (j_eq, lin_eq) = cost(&base);
    let mut outcomes = Vec::with_capacity(deviations.len());
    for d in deviations {
        let first: Arc<dyn StrategyRule> = match d {
            Deviation::Equilibrium => equilibrium.clone(),
            Deviation::Market => Arc::new(MarketRule),
            Deviation::Equal => Arc::new(EqualRule),
            Deviation::Fixed(w) => {
                if w.len() != config.n {
                    return Err(Error::Shape(format!("deviation has {} weights, n = {}", w.len(), config.n)));
                }
                Arc::new(FixedRule(w.clone()))
            }
        };
        let s = cost_samples(oracle, config, first, equilibrium.clone(), &r.v0, &start, paths, seed)?;
        let (j, lin) = cost(&s);
        let diff: Vec<f64> = lin_eq.iter().zip(&lin).map(|(a, b)| a - b).collect();
        outcomes.push(DeviationOutcome {
            deviation: d.label(),
            cost: j,
            gain: j_eq - j,
            gain_std_err: Estimate::from_samples(&diff).std_err,
        });
    }
    let best = outcomes.iter().max_by(|a, b| a.gain.total_cmp(&b.gain)).expect("non-empty grid");
    Ok(EpsilonEstimate {
        investors: config.investors,
        cost_equilibrium: j_eq,
        epsilon: best.gain.max(0.0),
        std_err: best.gain_std_err,
        outcomes,
    })
}

/// Log-log fit of a decay curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub std_err: f64,
    /// 95% normal interval.
    pub ci: (f64, f64),
}

pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() < 2 || ys.iter().any(|&y| !(y > 0.0)) {
        return Err(Error::Domain("log-log fit needs at least two positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (slope, se) = ols_slope(&lx, &ly);
    Ok(SlopeFit { slope, std_err: se, ci: (slope - 1.96 * se, slope + 1.96 * se) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosReport {
    pub n_values: Vec<usize>,
    pub node_steps: Vec<usize>,
    pub node_times: Vec<f64>,
    pub k_reference: usize,
    pub seeds: Vec<u64>,
    /// Seed-averaged W₂ of the wealth marginal, population size × node.
    pub w2: Vec<Vec<f64>>,
    /// Fit per node.
    pub fits: Vec<Option<SlopeFit>>,
    /// Fit of the node-averaged W₂.
    pub fit: Option<SlopeFit>,
}

/// W₂ between the wealth marginals of two common-noise runs on the same
/// noise path.
pub fn marginal_w2(a: &crate::engine::MeanFieldPathSet, b: &crate::engine::MeanFieldPathSet, node: usize) -> Result<f64> {
    if a.b != b.b {
        return Err(Error::Domain("runs were driven by different common noise".into()));
    }
    if node >= a.nodes() || node >= b.nodes() {
        return Err(Error::Domain(format!("node {node} is outside the simulated grid")));
    }
    wasserstein2_1d(&empirical_1d(a.inner_at(node))?, &empirical_1d(b.inner_at(node))?)
}

/// Wealth-marginal W₂ between N-investor runs and a K-investor reference
/// on matched common noise, averaged over seeds. Per seed, the population
/// draws of size N are the first N of the reference draws.
pub fn chaos_metric(
    oracle: &dyn MarketOracle,
    template: &ScenarioConfig,
    rule: &dyn StrategyRule,
    n_values: &[usize],
    node_steps: &[usize],
    seeds: &[u64],
    k_reference: usize,
) -> Result<ChaosReport> {
    check_increasing(n_values)?;
    if seeds.is_empty() || node_steps.is_empty() {
        return Err(Error::Config("chaos metric needs seeds and node steps".into()));
    }
    if let Some(&s) = node_steps.iter().find(|&&s| s > template.steps) {
        return Err(Error::Config(format!("node step {s} exceeds the grid of {} steps", template.steps)));
    }
    let per_seed: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&s| {
            let mut cfg = template.clone();
            cfg.seed = s;
            let noise = derive_seed(s, 1);
            let reference = simulate_mean_field_path(oracle, &cfg, rule, k_reference, noise, 0)?;
            n_values
                .iter()
                .map(|&n| {
                    let run = simulate_mean_field_path(oracle, &cfg, rule, n, noise, 0)?;
                    node_steps.iter().map(|&k| marginal_w2(&run, &reference, k)).collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let w2: Vec<Vec<f64>> = (0..n_values.len())
        .map(|i| (0..node_steps.len()).map(|k| mean(&per_seed.iter().map(|t| t[i][k]).collect::<Vec<_>>())).collect())
        .collect();
    let xs: Vec<f64> = n_values.iter().map(|&n| n as f64).collect();
    let fits = (0..node_steps.len())
        .map(|k| loglog_fit(&xs, &w2.iter().map(|row| row[k]).collect::<Vec<_>>()).ok())
        .collect();
    let avg: Vec<f64> = w2.iter().map(|row| mean(row)).collect();
    Ok(ChaosReport {
        n_values: n_values.to_vec(),
        node_steps: node_steps.to_vec(),
        node_times: node_steps.iter().map(|&s| s as f64 * template.dt()).collect(),
        k_reference,
        seeds: seeds.to_vec(),
        w2,
        fits,
        fit: loglog_fit(&xs, &avg).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub sweep: Sweep,
    pub epsilon: Vec<Option<EpsilonEstimate>>,
    pub epsilon_failures: Vec<Option<String>>,
    /// Consecutive ε̂ increases beyond twice their combined error.
    pub epsilon_significant_increases: usize,
    pub chaos: Option<ChaosReport>,
}

/// Settings for [`run_convergence`].
#[derive(Debug, Clone)]
pub struct ConvergenceSettings {
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub nash: NashSettings,
    pub mfg: MfgSettings,
    pub epsilon_paths: usize,
    pub chaos_nodes: Vec<usize>,
    pub k_reference: usize,
}

/// Sweep, ε̂ per population size under the mean-field map, and chaos decay.
pub fn run_convergence(oracle: &dyn MarketOracle, template: &ScenarioConfig, settings: &ConvergenceSettings) -> Result<ConvergenceReport> {
    let sweep = sweep_n(oracle, template, &settings.n_values, &settings.seeds, &settings.nash, &settings.mfg)?;
    let seed = settings.seeds[0];
    let mut cfg = template.clone();
    cfg.seed = seed;
    let mut mf_settings = settings.mfg.clone();
    mf_settings.strategies = true;
    let eq = solve_mfe(oracle, &cfg, &mf_settings, seed)?;
    let rule = eq.strategy_rule(&cfg);
    let grid = default_deviation_grid(template.n, seed);
    let mut epsilon = Vec::new();
    let mut epsilon_failures = Vec::new();
    for &n in &settings.n_values {
        let mut c = cfg.with_investors(n);
        c.seed = seed;
        match epsilon_equilibrium(oracle, &c, rule.clone(), &grid, settings.epsilon_paths, derive_seed(seed, 7)) {
            Ok(e) => {
                epsilon.push(Some(e));
                epsilon_failures.push(None);
            }
            Err(e) => {
                epsilon.push(None);
                epsilon_failures.push(Some(e.to_string()));
            }
        }
    }
    let epsilon_significant_increases = epsilon
        .windows(2)
        .filter(|w| match (&w[0], &w[1]) {
            (Some(a), Some(b)) => b.epsilon - a.epsilon > 2.0 * (a.std_err.powi(2) + b.std_err.powi(2)).sqrt(),
            _ => false,
        })
        .count();
    let chaos = if settings.chaos_nodes.is_empty() {
        None
    } else {
        Some(chaos_metric(oracle, &cfg, rule.as_ref(), &settings.n_values, &settings.chaos_nodes, &settings.seeds, settings.k_reference)?)
    };
    Ok(ConvergenceReport { schema_version: SCHEMA_VERSION, sweep, epsilon, epsilon_failures, epsilon_significant_increases, chaos })
}
