//! Time-discretized simulation of the particle market, deflator,
//! benchmark and common-noise dynamics.

pub mod dump;
pub mod kernel;
pub mod mean_field;
pub mod paths;
pub mod strategy;

pub use kernel::{run_path, EngineSpec, NodeEvent, NodeState};
pub use mean_field::{conditional_mean, simulate_mean_field, simulate_mean_field_path, MeanFieldPathSet};
pub use paths::{
    benchmark_path, path_diagnostics, record_path, simulate_deflator, simulate_n_particle, BenchmarkPath, DeflatorPath,
    ParticlePath, ParticlePathSet,
};
pub use strategy::{rule_from_spec, DeviationRule, EqualRule, FixedRule, MarketOffsetRule, MarketRule, StrategyContext, StrategyRule, TableRule};
