//! Scenario configuration, market coefficient oracles and validation.

pub mod config;
pub mod markets;
pub mod oracle;
pub mod simplex;
pub mod validate;

pub use config::{Law, MapLoop, MarketSpec, PerInvestor, Resolved, ScenarioConfig, SolverConfig, StrategySpec, YMode, SCHEMA_VERSION};
pub use markets::{builtin_market, ConstantMarket, VolStabilizedMarket};
pub use oracle::{Coefficients, MarketOracle, MarketState, MeasureDependence};
pub use simplex::{market_weights, simplex_deviation, SimplexWeights};
pub use validate::{preference_sum, validate_scenario, validate_with, CheckVerdict, Diagnostics, ValidationReport};
