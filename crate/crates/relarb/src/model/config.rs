use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const SCHEMA_VERSION: u32 = 1;

/// Sampling law for per-investor scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum Law {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    LogNormal { mean_log: f64, sd_log: f64 },
    Point { value: f64 },
}

impl Law {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            Law::Uniform { low, high } => {
                if !(low < high) {
                    return if low == high { Ok(low) } else { Err(Error::Config(format!("uniform law with low {low} > high {high}"))) };
                }
                let u = Uniform::new(low, high).map_err(|e| Error::Config(e.to_string()))?;
                Ok(u.sample(rng))
            }
            Law::Normal { mean, sd } => {
                let d = Normal::new(mean, sd).map_err(|e| Error::Config(e.to_string()))?;
                Ok(d.sample(rng))
            }
            Law::LogNormal { mean_log, sd_log } => {
                let d = LogNormal::new(mean_log, sd_log).map_err(|e| Error::Config(e.to_string()))?;
                Ok(d.sample(rng))
            }
            Law::Point { value } => Ok(value),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Law::Uniform { low, high } => 0.5 * (low + high),
            Law::Normal { mean, .. } => mean,
            Law::LogNormal { mean_log, sd_log } => (mean_log + 0.5 * sd_log * sd_log).exp(),
            Law::Point { value } => value,
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, Law::Point { .. })
    }
}

/// Either explicit per-investor values or an i.i.d. law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerInvestor {
    Explicit(Vec<f64>),
    Law(Law),
}

impl PerInvestor {
    pub fn resolve(&self, count: usize, seed: u64, tag: Purpose) -> Result<Vec<f64>> {
        match self {
            PerInvestor::Explicit(v) => {
                if v.len() == 1 {
                    Ok(vec![v[0]; count])
                } else if v.len() == count {
                    Ok(v.clone())
                } else {
                    Err(Error::Config(format!("expected {count} per-investor values, got {}", v.len())))
                }
            }
            PerInvestor::Law(law) => {
                let mut r = rng::stream(seed, 0, tag);
                (0..count).map(|_| law.sample(&mut r)).collect()
            }
        }
    }
}

/// Built-in market families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketSpec {
    /// Constant relative drift `beta` and relative volatility `sigma`; the
    /// invested-capital coefficients are absolute and default to zero.
    Constant {
        beta: Vec<f64>,
        sigma: Vec<Vec<f64>>,
        #[serde(default)]
        gamma: Option<Vec<f64>>,
        #[serde(default)]
        tau: Option<Vec<Vec<f64>>>,
    },
    VolatilityStabilized { zeta: f64 },
}

/// How the invested-capital vector Y evolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum YMode {
    /// Y_i = (1/N) Σ_ℓ V^ℓ π_i^ℓ recomputed at every node.
    #[default]
    Endogenous,
    /// Euler steps of dY = γ dt + τ dW' on an independent noise, clamped at 0.
    Exogenous,
    /// Y held at y0.
    Frozen,
}

/// Strategy rule applied by every investor unless a solver overrides it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategySpec {
    #[default]
    Market,
    Equal,
    Fixed(Vec<f64>),
}

/// How the mean-field strategy map is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapLoop {
    /// Weights as deterministic functions of time.
    #[default]
    Open,
    /// Market weights of the current state plus a time-dependent offset.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Monte Carlo paths for top-level estimates.
    pub paths: usize,
    /// Paths per conditional (node-started) estimate.
    pub inner_paths: usize,
    /// Common-noise paths for mean-field solves.
    pub outer_paths: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub k_inner: usize,
    /// Outer iterations of the mean-field strategy map.
    pub map_iters: usize,
    pub map_loop: MapLoop,
    pub ccond_literal: bool,
    pub cdf_std_normalized: bool,
    /// Shift equilibrium weights so they sum to one.
    pub renormalize_strategy: bool,
    pub strict_simplex: bool,
    pub tol_simplex: f64,
    /// Upper bound on stored path values (steps · (n + N) · paths).
    pub memory_budget: usize,
    /// Optional bound on |Δ log X| and |Δ log V| per step.
    pub log_increment_cap: Option<f64>,
    pub bump_abs: f64,
    pub bump_rel: f64,
    pub fd_nodes: usize,
    /// Nodes of the time grid at which equilibrium quantities are solved.
    pub node_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            paths: 10_000,
            inner_paths: 2_000,
            outer_paths: 16,
            damping: 0.5,
            tol: 1e-6,
            max_iters: 200,
            k_inner: 64,
            map_iters: 4,
            map_loop: MapLoop::Open,
            ccond_literal: false,
            cdf_std_normalized: false,
            renormalize_strategy: false,
            strict_simplex: false,
            tol_simplex: 1e-9,
            memory_budget: 200_000_000,
            log_increment_cap: None,
            bump_abs: 1e-4,
            bump_rel: 1e-2,
            fd_nodes: 129,
            node_stride: 1,
        }
    }
}

/// A scenario as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub n: usize,
    #[serde(rename = "N")]
    pub investors: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    pub delta: f64,
    pub c: PerInvestor,
    pub v0: PerInvestor,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    pub seed: u64,
    pub market: MarketSpec,
    #[serde(default)]
    pub y_mode: YMode,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Structural checks that must pass before any numerical check runs.
    pub fn check_structure(&self) -> Result<()> {
        if self.n == 0 || self.investors == 0 || self.steps == 0 {
            return Err(Error::Config("n, N and steps must be at least 1".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Config(format!("horizon T must be positive, got {}", self.horizon)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must lie in [0,1], got {}", self.delta)));
        }
        if self.x0.len() != self.n {
            return Err(Error::Config(format!("x0 has {} entries, n = {}", self.x0.len(), self.n)));
        }
        if let Some(i) = self.x0.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!("initial price x0[{i}] = {} is not positive", self.x0[i])));
        }
        if let Some(y) = &self.y0 {
            if y.len() != self.n {
                return Err(Error::Config(format!("y0 has {} entries, n = {}", y.len(), self.n)));
            }
            if y.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config("initial invested capital y0 must be nonnegative".into()));
            }
        }
        if let PerInvestor::Explicit(v) = &self.v0 {
            if v.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                return Err(Error::Config("initial wealths v0 must be positive".into()));
            }
        }
        match &self.market {
            MarketSpec::Constant { beta, sigma, gamma, tau } => {
                if beta.len() != self.n || sigma.len() != self.n || sigma.iter().any(|r| r.len() != self.n) {
                    return Err(Error::Config("constant market: beta must have n entries and sigma be n×n".into()));
                }
                if gamma.as_ref().is_some_and(|g| g.len() != self.n)
                    || tau.as_ref().is_some_and(|t| t.len() != self.n || t.iter().any(|r| r.len() != self.n))
                {
                    return Err(Error::Config("constant market: gamma must have n entries and tau be n×n".into()));
                }
            }
            MarketSpec::VolatilityStabilized { zeta } => {
                if !(*zeta >= 0.0) {
                    return Err(Error::Config(format!("volatility-stabilized market needs zeta ≥ 0, got {zeta}")));
                }
            }
        }
        let s = &self.solver;
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0,1], got {}", s.damping)));
        }
        if s.log_increment_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("log_increment_cap must be positive".into()));
        }
        if s.node_stride == 0 || s.fd_nodes < 5 {
            return Err(Error::Config("node_stride ≥ 1 and fd_nodes ≥ 5 required".into()));
        }
        let stored = (self.steps + 1).saturating_mul(self.n + self.investors);
        if stored > s.memory_budget {
            return Err(Error::MemoryBudget { required: stored, budget: s.memory_budget });
        }
        Ok(())
    }

    /// Draws (or copies) preferences and initial wealths.
    pub fn resolve(&self) -> Result<Resolved> {
        self.check_structure()?;
        let c = self.c.resolve(self.investors, self.seed, Purpose::Preferences)?;
        let v0 = self.v0.resolve(self.investors, self.seed, Purpose::InitialWealth)?;
        if let Some(i) = v0.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Config(format!("initial wealth v0[{i}] = {} is not positive", v0[i])));
        }
        let y0 = match &self.y0 {
            Some(y) => y.clone(),
            None => vec![0.0; self.n],
        };
        Ok(Resolved { c, v0, y0 })
    }

    /// Copy of the scenario with a different investor count, keeping laws.
    pub fn with_investors(&self, investors: usize) -> Self {
        let mut out = self.clone();
        out.investors = investors;
        out
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Per-investor values after sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub c: Vec<f64>,
    pub v0: Vec<f64>,
    pub y0: Vec<f64>,
}
