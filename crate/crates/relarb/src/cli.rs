//! Command-line orchestration: scenario ingestion, subcommand dispatch and
//! deterministic artifact emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::arbitrage::{estimate_u_mc, fichera_check, solve_cauchy_fd, FdSpec, FicheraBox, Target};
use crate::convergence::{run_convergence, ConvergenceSettings};
use crate::engine::{path_diagnostics, rule_from_spec, simulate_n_particle};
use crate::error::{Error, Result};
use crate::mfg::{consistency_check, solve_mfe, MfgSettings};
use crate::model::{builtin_market, validate_scenario, ScenarioConfig, SCHEMA_VERSION};
use crate::nash::{solve_nash, NashSettings};
use crate::rng::derive_seed;
use crate::stats::Estimate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "relarb", version, about = "Relative arbitrage and equilibrium solvers for investor-coupled markets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one stage on a scenario file.
    Run {
        stage: Stage,
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Simulate,
    Fichera,
    Arbitrage,
    Nash,
    Mfg,
    Converge,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Simulate => "simulate",
            Stage::Fichera => "fichera",
            Stage::Arbitrage => "arbitrage",
            Stage::Nash => "nash",
            Stage::Mfg => "mfg",
            Stage::Converge => "converge",
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override the number of Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Preference condition without the 1/N factor.
    #[arg(long)]
    pub ccond_literal: bool,
    /// Standardize the exit-time argument of the uniqueness probability.
    #[arg(long)]
    pub cdf_std_normalized: bool,
    /// Reject strategies that leave the simplex instead of projecting.
    #[arg(long)]
    pub strict_simplex: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStatus {
    pub name: String,
    pub status: String,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub config_path: String,
    /// sha256 of the emitted resolved-config file.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageStatus>,
    pub exit_code: i32,
}

/// Renders JSON with every non-integer number at 17 significant digits.
pub fn to_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".into()
    }
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Number(n) if n.is_f64() => out.push_str(&format_float(n.as_f64().expect("f64 number"))),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, item, depth + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

fn serialize<T: Serialize>(value: &T) -> Result<String> {
    Ok(to_json(&serde_json::to_value(value)?))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible(_) | Error::Config(_) | Error::Json(_) | Error::MemoryBudget { .. } => EXIT_INFEASIBLE,
        _ => EXIT_RUNTIME,
    }
}

/// A stage result: summary, optional CSV tables and an exit code.
struct Outcome {
    summary: Value,
    tables: Vec<(&'static str, String)>,
    code: i32,
}

impl Outcome {
    fn ok<T: Serialize>(summary: &T) -> Result<Self> {
        Ok(Outcome { summary: serde_json::to_value(summary)?, tables: Vec::new(), code: EXIT_OK })
    }
}

/// Parses the arguments, runs the stage and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(Cli { command: Command::Run { stage, config, flags } }) => run(stage, &config, &flags),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() { EXIT_INFEASIBLE } else { EXIT_OK }
        }
    }
}

/// Runs one stage, writing `resolved_config.json`, `summary.json`, any CSV
/// tables and `manifest.json` into `flags.out`.
pub fn run(stage: Stage, config_path: &Path, flags: &Flags) -> i32 {
    let start = Instant::now();
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        subcommand: stage.name().into(),
        config_path: config_path.display().to_string(),
        config_hash: None,
        seed: None,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        outputs: Vec::new(),
        wall_clock_seconds: 0.0,
        stages: Vec::new(),
        exit_code: EXIT_RUNTIME,
    };
    let code = match execute(stage, config_path, flags, &mut manifest) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            manifest.stages.push(StageStatus { name: stage.name().into(), status: "error".into(), message: Some(e.to_string()) });
            exit_code(&e)
        }
    };
    manifest.exit_code = code;
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    manifest.outputs.push("manifest.json".into());
    let written = fs::create_dir_all(&flags.out)
        .map_err(Error::from)
        .and_then(|_| serialize(&manifest))
        .and_then(|text| fs::write(flags.out.join("manifest.json"), text).map_err(Error::from));
    match written {
        Ok(()) => code,
        Err(e) => {
            eprintln!("error: could not write manifest: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load(config_path: &Path, flags: &Flags) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::from_json(&fs::read_to_string(config_path)?)?;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(p) = flags.paths {
        cfg.solver.paths = p;
    }
    cfg.solver.ccond_literal |= flags.ccond_literal;
    cfg.solver.cdf_std_normalized |= flags.cdf_std_normalized;
    cfg.solver.strict_simplex |= flags.strict_simplex;
    Ok(cfg)
}

fn execute(stage: Stage, config_path: &Path, flags: &Flags, manifest: &mut RunManifest) -> Result<i32> {
    fs::create_dir_all(&flags.out)?;
    let cfg = load(config_path, flags)?;
    manifest.seed = Some(cfg.seed);
    let resolved = serialize(&cfg)?;
    manifest.config_hash = Some(hex::encode(Sha256::digest(resolved.as_bytes())));
    fs::write(flags.out.join("resolved_config.json"), &resolved)?;
    manifest.outputs.push("resolved_config.json".into());

    let threads = flags.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {threads} threads: {e}")))?;
    let outcome = pool.install(|| dispatch(stage, &cfg, manifest))?;

    fs::write(flags.out.join("summary.json"), to_json(&outcome.summary))?;
    manifest.outputs.push("summary.json".into());
    for (name, body) in &outcome.tables {
        fs::write(flags.out.join(name), body)?;
        manifest.outputs.push((*name).into());
    }
    Ok(outcome.code)
}

fn dispatch(stage: Stage, cfg: &ScenarioConfig, manifest: &mut RunManifest) -> Result<Outcome> {
    let report = validate_scenario(cfg)?;
    manifest.stages.push(StageStatus {
        name: "validate".into(),
        status: if report.feasible { "ok" } else { "infeasible" }.into(),
        message: (!report.feasible).then(|| report.messages.join("; ")),
    });
    if !report.feasible {
        for m in &report.messages {
            eprintln!("{m}");
        }
        let mut out = Outcome::ok(&report)?;
        out.code = EXIT_INFEASIBLE;
        return Ok(out);
    }
    if stage == Stage::Validate {
        return Outcome::ok(&report);
    }
    let oracle = builtin_market(&cfg.market, cfg.n)?;
    let oracle = oracle.as_ref();
    let seed = cfg.seed;
    let out = match stage {
        Stage::Validate => unreachable!("handled above"),
        Stage::Simulate => {
            let rule = rule_from_spec(&cfg.strategy);
            let paths = simulate_n_particle(oracle, cfg, rule.as_ref(), derive_seed(seed, 1), cfg.solver.paths)?;
            let last = cfg.steps;
            let terminal_x: Vec<f64> = paths.paths.iter().map(|p| p.x_at(last).iter().sum()).collect();
            let terminal_v: Vec<Estimate> = (0..cfg.investors)
                .map(|l| Estimate::from_samples(&paths.paths.iter().map(|p| p.v_at(last)[l]).collect::<Vec<_>>()))
                .collect();
            let summary = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "paths": paths.paths.len(),
                "v0": paths.v0,
                "terminal_total_capitalization": Estimate::from_samples(&terminal_x),
                "terminal_wealth": terminal_v,
                "clamps": paths.paths.iter().map(|p| p.clamps).sum::<usize>(),
                "diagnostics": path_diagnostics(&paths, oracle)?,
            });
            let mut csv = String::from("step,t");
            (0..cfg.n).for_each(|i| write!(csv, ",x{i}").expect("write to string"));
            (0..cfg.investors).for_each(|l| write!(csv, ",v{l}").expect("write to string"));
            csv.push('\n');
            if let Some(p) = paths.paths.first() {
                for k in 0..p.nodes() {
                    write!(csv, "{k},{}", format_float(paths.grid[k])).expect("write to string");
                    for v in p.x_at(k).iter().chain(p.v_at(k)) {
                        write!(csv, ",{}", format_float(*v)).expect("write to string");
                    }
                    csv.push('\n');
                }
            }
            Outcome { summary, tables: vec![("path0.csv", csv)], code: EXIT_OK }
        }
        Stage::Fichera => {
            let r = cfg.resolve()?;
            Outcome::ok(&fichera_check(oracle, &FicheraBox::around(&cfg.x0, &r.y0, cfg.delta), 256)?)?
        }
        Stage::Arbitrage => {
            let mc: Vec<_> = (0..cfg.investors)
                .map(|l| estimate_u_mc(oracle, cfg, Target::Investor(l), cfg.solver.paths, derive_seed(seed, 1)))
                .collect::<Result<_>>()?;
            let fd = if cfg.n == 1 {
                let r = cfg.resolve()?;
                let grid = solve_cauchy_fd(oracle, cfg, &FdSpec::new(cfg.solver.fd_nodes, r.c[0]))?;
                Some(serde_json::json!({
                    "u_at_x0": grid.value_at(cfg.x0[0], r.y0[0]),
                    "boundary": grid.boundary,
                    "cfl": grid.cfl,
                    "substeps": grid.substeps,
                }))
            } else {
                None
            };
            Outcome::ok(&serde_json::json!({ "schema_version": SCHEMA_VERSION, "monte_carlo": mc, "finite_difference": fd }))?
        }
        Stage::Nash => {
            let eq = solve_nash(oracle, cfg, &NashSettings::from_config(cfg), seed)?;
            let mut csv = String::from("step,t,m,x\n");
            for (i, (&k, &t)) in eq.node_steps.iter().zip(&eq.node_times).enumerate() {
                writeln!(csv, "{k},{},{},{}", format_float(t), format_float(eq.m_path[i]), format_float(eq.x_path[i]))
                    .expect("write to string");
            }
            let mut out = Outcome::ok(&eq)?;
            out.tables.push(("m_path.csv", csv));
            out
        }
        Stage::Mfg => {
            let settings = MfgSettings::from_config(cfg);
            let eq = solve_mfe(oracle, cfg, &settings, seed)?;
            let check = consistency_check(oracle, cfg, &settings, &eq, seed, derive_seed(seed, 5))?;
            let mut csv = String::from("path,step,t,m,x\n");
            for (p, (ms, xs)) in eq.m_path.iter().zip(&eq.x_path).enumerate() {
                for (i, (&k, &t)) in eq.node_steps.iter().zip(&eq.node_times).enumerate() {
                    writeln!(csv, "{p},{k},{},{},{}", format_float(t), format_float(ms[i]), format_float(xs[i]))
                        .expect("write to string");
                }
            }
            let summary = serde_json::json!({ "equilibrium": eq, "consistency": check });
            Outcome { summary, tables: vec![("m_path.csv", csv)], code: EXIT_OK }
        }
        Stage::Converge => {
            let settings = ConvergenceSettings {
                n_values: vec![8, 32, 128, 512],
                seeds: (0..4).map(|i| derive_seed(seed, 100 + i)).collect(),
                nash: NashSettings { strategies: false, ..NashSettings::from_config(cfg) },
                mfg: MfgSettings { strategies: false, ..MfgSettings::from_config(cfg) },
                epsilon_paths: cfg.solver.paths,
                chaos_nodes: vec![0, cfg.steps / 2, cfg.steps],
                k_reference: 16_384,
            };
            Outcome::ok(&run_convergence(oracle, cfg, &settings)?)?
        }
    };
    manifest.stages.push(StageStatus { name: stage.name().into(), status: "ok".into(), message: None });
    Ok(out)
}
