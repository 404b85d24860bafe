//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use relarb::arbitrage::*;
use relarb::convergence::*;
use relarb::engine::{simulate_n_particle, MarketRule};
use relarb::mfg::*;
use relarb::model::{builtin_market, Law, MarketSpec, PerInvestor, ScenarioConfig, StrategySpec};
use relarb::nash::*;
use relarb::stats::Estimate;

/// Criteria that are known not to hold, with the reason printed on failure.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    12,
    "the Monte Carlo peer-average volatility exceeds the closed-form value by a factor of two or more",
)];

type Verdict = (bool, String);
type Criterion = (u32, &'static str, fn() -> Verdict);

fn nash_settings(cfg: &ScenarioConfig, strategies: bool) -> NashSettings {
    NashSettings {
        outer_paths: 4,
        inner_paths: 400,
        root_paths: 2_000,
        node_stride: 4,
        strategies,
        ..NashSettings::from_config(cfg)
    }
}

fn nash_toy() -> ScenarioConfig {
    let mut cfg = common::vsm(2, 2, 0.0, 20);
    cfg.strategy = StrategySpec::Equal;
    cfg.x0 = vec![0.5, 1.0];
    cfg
}

fn baseline_market(paths_steps: usize) -> ScenarioConfig {
    let mut cfg = common::constant(2, 2, 0.1 * 0.2, 0.2, paths_steps);
    cfg.c = PerInvestor::Explicit(vec![0.01]);
    cfg
}

fn no_arbitrage_baseline() -> Verdict {
    let cfg = baseline_market(200);
    let o = builtin_market(&cfg.market, 2).unwrap();
    let t = Instant::now();
    let e = estimate_u_mc(o.as_ref(), &cfg, Target::Investor(0), 100_000, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let z = (e.u_hat - 0.01f64.exp()).abs() / e.std_err;
    (z < 3.0 && secs < 60.0, format!("u_hat {:.6} ± {:.2e}, z {z:.2}, {secs:.1} s", e.u_hat, e.std_err))
}

fn fd_trivial_residual() -> Verdict {
    let mut cfg = common::constant(1, 1, 0.02, 0.2, 50);
    cfg.c = PerInvestor::Explicit(vec![0.01]);
    let o = builtin_market(&cfg.market, 1).unwrap();
    let g = solve_cauchy_fd(o.as_ref(), &cfg, &FdSpec::new(129, 0.01)).unwrap();
    let r = g.residual_of(&vec![0.01f64.exp(); g.xs.len() * g.ys.len()]);
    (g.xs.len() == 129 && g.ys.len() == 129 && r < 1e-12, format!("129×129 grid, max residual {r:e}"))
}

fn fd_mc_agreement() -> Verdict {
    let mut cfg = common::constant(1, 1, 0.02, 0.2, 50);
    cfg.c = PerInvestor::Explicit(vec![0.01]);
    let o = builtin_market(&cfg.market, 1).unwrap();
    let g = solve_cauchy_fd(o.as_ref(), &cfg, &FdSpec::new(129, 0.01)).unwrap();
    let mc = estimate_u_mc(o.as_ref(), &cfg, Target::Investor(0), 20_000, 5).unwrap();
    let fd = g.value_at(1.0, 0.0);
    let gap = (fd - mc.u_hat).abs();
    let bound = (3.0 * mc.std_err).max(1e-2);
    (gap <= bound, format!("FD {fd:.6}, MC {:.6} ± {:.2e}, gap {gap:.2e} ≤ {bound:.2e}", mc.u_hat, mc.std_err))
}

fn fichera_verdicts() -> Verdict {
    let bx = FicheraBox::around(&[1.0, 1.0], &[1.0, 1.0], 0.5);
    let gbm = builtin_market(&MarketSpec::Constant { beta: vec![0.02; 2], sigma: common::diag(2, 0.2), gamma: None, tau: None }, 2).unwrap();
    let g = fichera_check(gbm.as_ref(), &bx, 64).unwrap();
    let vsm = builtin_market(&MarketSpec::VolatilityStabilized { zeta: 0.0 }, 2).unwrap();
    let v = fichera_check(vsm.as_ref(), &bx, 64).unwrap();
    let gbm_worst = g.faces.iter().map(|f| f.min_f.abs().max(f.max_f.abs())).fold(0.0, f64::max);
    let gbm_ok = g.verdict == GlobalVerdict::NoRelativeArbitrage && gbm_worst <= 1e-8;
    let worst = v.faces.iter().map(|f| (f.min_f + 0.5).abs().max((f.max_f + 0.5).abs())).fold(0.0, f64::max);
    let vsm_ok = v.verdict == GlobalVerdict::RelativeArbitrageExists && worst <= 1e-8;
    (gbm_ok && vsm_ok, format!(
            "GBM {:?} with max |f| = {gbm_worst:.1e}; VSM {:?} with max |f + 0.5| = {worst:.1e}; {} faces each",
            g.verdict,
            v.verdict,
            v.faces.len()
        ))
}

fn arbitrage_direction() -> Verdict {
    let cfg = common::vsm(2, 2, 0.0, 200);
    let o = builtin_market(&cfg.market, 2).unwrap();
    let e = estimate_u_mc(o.as_ref(), &cfg, Target::Investor(0), 100_000, 7).unwrap();
    let gap = (e.c.exp() - e.u_hat) / e.std_err;
    (gap >= 3.0, format!("u_hat {:.6} ± {:.2e}, e^c − u_hat = {gap:.1} SE", e.u_hat, e.std_err))
}

fn nash_delta_one() -> Verdict {
    let mut cfg = common::vsm(2, 3, 0.0, 20);
    cfg.delta = 1.0;
    cfg.c = PerInvestor::Explicit(vec![0.0, 0.1, -0.2]);
    let o = builtin_market(&cfg.market, 2).unwrap();
    let r = solve_nash(o.as_ref(), &cfg, &nash_settings(&cfg, false), 3).unwrap();
    (r.converged && r.iterations == 1 && r.residual < 1e-10, format!("{} sweep(s), residual {:e}", r.iterations, r.residual))
}

fn nash_symmetry() -> Verdict {
    let cfg = common::vsm(2, 2, 0.0, 12);
    let o = builtin_market(&cfg.market, 2).unwrap();
    let r = solve_nash(o.as_ref(), &cfg, &nash_settings(&cfg, true), 11).unwrap();
    let same_u = r.u_per_investor[0].to_bits() == r.u_per_investor[1].to_bits();
    let same_pi = r.strategies[0] == r.strategies[1];
    (same_u && same_pi, format!("u bitwise equal: {same_u}, strategy paths equal: {same_pi}"))
}

fn fixed_point_oracle() -> Verdict {
    let cfg = nash_toy();
    let o = builtin_market(&cfg.market, 2).unwrap();
    let r = solve_nash(o.as_ref(), &cfg, &nash_settings(&cfg, false), 7).unwrap();
    let f = &r.maps[0][0];
    let (lo, hi, points) = (1e-3, 5.0, 10_000);
    let spacing = (hi - lo) / (points - 1) as f64;
    let best = (0..points)
        .map(|k| lo + k as f64 * spacing)
        .min_by(|a, b| (f.eval(*a).unwrap() - a).abs().total_cmp(&(f.eval(*b).unwrap() - b).abs()))
        .unwrap();
    let m = r.m_path[0];
    ((m - best).abs() <= spacing, format!("m* {m:.6}, grid {best:.6}, spacing {spacing:.1e}"))
}

fn strategy_collapse() -> Verdict {
    let cfg = baseline_market(20);
    let o = builtin_market(&cfg.market, 2).unwrap();
    let r = solve_nash(o.as_ref(), &cfg, &nash_settings(&cfg, true), 4).unwrap();
    let mut worst = 0.0f64;
    let mut ok = true;
    for (k, rec) in r.strategies[0].iter().enumerate() {
        let x = &r.prices[k];
        let total: f64 = x.iter().sum();
        for ((w, xi), se) in rec.weights.iter().zip(x).zip(&rec.std_err) {
            let gap = (w - xi / total).abs();
            ok &= gap <= 3.0 * se + 1e-12;
            if *se > 0.0 {
                worst = worst.max(gap / se);
            }
        }
    }
    (ok, format!("{} nodes, max |π − market weight| = {worst:.2} SE", r.strategies[0].len()))
}

fn contraction_validity() -> Verdict {
    let cfg = nash_toy();
    let o = builtin_market(&cfg.market, 2).unwrap();
    let mut s = nash_settings(&cfg, false);
    s.outer_paths = 8;
    let r = solve_nash(o.as_ref(), &cfg, &s, 9).unwrap();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (row, mrow) in r.maps.iter().zip(&r.m_paths) {
        for (f, &m) in row.iter().zip(mrow) {
            let g = f.region(m);
            if checked < 20 && g.d > 0.0 && g.contains(f.x_total) {
                let h = 1e-5 * m;
                worst = worst.max(((f.eval(m + h).unwrap() - f.eval(m - h).unwrap()) / (2.0 * h)).abs());
                checked += 1;
            }
        }
    }

    let mut gbm = common::constant(1, 1, 0.05, 0.2, 50);
    gbm.delta = 1.0;
    let go = builtin_market(&gbm.market, 1).unwrap();
    let set = simulate_n_particle(go.as_ref(), &gbm, &MarketRule, 21, 100_000).unwrap();
    let k = 1.1;
    let inside: Vec<f64> = set.paths.iter().map(|p| if p.x_at(50)[0] < k { 1.0 } else { 0.0 }).collect();
    let freq = Estimate::from_samples(&inside);
    let params = LognormalParams::at(go.as_ref(), 0.0, &[1.0], &[0.0], 1.0).unwrap();
    let normalized = uniqueness_probability(params, k, 1.0, 1.0, true);
    let printed = uniqueness_probability(params, k, 1.0, 1.0, false);
    let z = freq.z_against(normalized);
    (
        checked == 20 && worst < 1.0 && z < 3.0,
        format!(
            "{checked} nodes, max |Φ′| {worst:.3}; P(τ>T) normalized {normalized:.4} vs empirical {:.4} ± {:.1e} (z {z:.2}); printed form {printed:.4} (z {:.1})",
            freq.mean,
            freq.std_err,
            freq.z_against(printed)
        ),
    )
}

fn mf_toy() -> ScenarioConfig {
    let mut cfg = common::vsm(1, 1, 0.0, 20);
    cfg.v0 = common::uniform(0.8, 1.2);
    cfg.c = common::uniform(-0.05, 0.05);
    cfg
}

fn mf_settings(cfg: &ScenarioConfig) -> MfgSettings {
    MfgSettings {
        k_inner: 16,
        outer_paths: 4,
        inner_paths: 400,
        root_paths: 2_000,
        node_stride: 4,
        map_iters: 3,
        ..MfgSettings::from_config(cfg)
    }
}

fn mfe_consistency() -> Verdict {
    let cfg = mf_toy();
    let o = builtin_market(&cfg.market, 1).unwrap();
    let s = mf_settings(&cfg);
    let eq = solve_mfe(o.as_ref(), &cfg, &s, 12).unwrap();
    let rep = consistency_check(o.as_ref(), &cfg, &s, &eq, 12, 99).unwrap();
    let worst = rep.gap.iter().zip(&rep.allowed).map(|(g, a)| g.abs() / a).fold(0.0, f64::max);

    let mut one = mf_toy();
    one.delta = 1.0;
    one.c = PerInvestor::Law(Law::Point { value: 0.0 });
    let mut ms = mf_settings(&one);
    ms.strategies = false;
    let base = solve_mfe(o.as_ref(), &one, &ms, 8).unwrap();
    one.c = PerInvestor::Law(Law::Point { value: 0.3 });
    let shifted = solve_mfe(o.as_ref(), &one, &ms, 8).unwrap();
    let solve_err = (shifted.u.mean / base.u.mean - 0.3f64.exp()).abs();
    let map_err = (eq.u_for_preference(0.3) / eq.u_for_preference(0.0) - 0.3f64.exp()).abs();
    (
        eq.converged_m && rep.holds && solve_err < 1e-10 && map_err < 1e-10,
        format!("max |gap|/allowed {worst:.3} over {} nodes; c-shift errors {solve_err:.1e}, {map_err:.1e}", rep.gap.len()),
    )
}

fn vsm_closed_form_agreement() -> Verdict {
    let mut cfg = mf_toy();
    cfg.steps = 100;
    let o = builtin_market(&cfg.market, 1).unwrap();
    let s = MfgSettings {
        k_inner: 64,
        outer_paths: 1,
        inner_paths: 2_000,
        root_paths: 4_000,
        node_stride: 1,
        map_iters: 1,
        ..MfgSettings::from_config(&cfg)
    };
    let eq = solve_mfe(o.as_ref(), &cfg, &s, 3).unwrap();
    let MarketSpec::VolatilityStabilized { zeta } = cfg.market else { unreachable!("VSM template") };
    let mut compared = 0;
    let mut outside = 0;
    let mut worst = 0.0f64;
    for rec in eq.nodes.iter().filter(|r| r.step < cfg.steps).take(100) {
        let state = VsmState { x: &rec.x, z: &rec.z, m: rec.m, deflator: rec.log_l.exp() };
        let Ok(cf) = vsm_closed_form(state, &rec.gradient, zeta, cfg.delta, false) else {
            outside += 1;
            compared += 1;
            continue;
        };
        compared += 1;
        let rel = rec
            .strategy
            .weights
            .iter()
            .zip(&cf.weights)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
            .fold(0.0, f64::max);
        worst = worst.max(rel);
        if rel > 0.1 {
            outside += 1;
        }
    }
    (compared == 100 && outside == 0, format!("{outside}/{compared} states beyond 10%, max relative gap {worst:.3}"))
}

fn vsm_template() -> ScenarioConfig {
    let mut cfg = common::vsm(2, 8, 0.0, 40);
    cfg.strategy = StrategySpec::Equal;
    cfg.v0 = common::uniform(0.5, 1.5);
    cfg.c = common::uniform(-0.1, 0.1);
    cfg
}

fn convergence() -> Verdict {
    let cfg = vsm_template();
    let o = builtin_market(&cfg.market, 2).unwrap();
    let nash = NashSettings { outer_paths: 4, inner_paths: 400, root_paths: 4_000, node_stride: 10, strategies: false, ..NashSettings::from_config(&cfg) };
    let mfg = MfgSettings {
        k_inner: 4_096,
        outer_paths: 4,
        inner_paths: 400,
        root_paths: 4_000,
        node_stride: 10,
        map_iters: 2,
        strategies: false,
        ..MfgSettings::from_config(&cfg)
    };
    let sweep = sweep_n(o.as_ref(), &cfg, &[8, 32, 128, 512], &[1, 2, 3, 4], &nash, &mfg).unwrap();
    let gaps: Vec<Option<f64>> = sweep.points.iter().map(|p| p.gap).collect();
    let sweep_ok = gaps.iter().all(Option::is_some) && sweep.increases <= 1 && sweep.significant_increases == 0;

    let eq = solve_mfe(o.as_ref(), &cfg, &MfgSettings { k_inner: 64, strategies: true, ..mfg.clone() }, 1).unwrap();
    let rule = eq.strategy_rule(&cfg);
    let grid = default_deviation_grid(2, 1);
    let eps: Vec<EpsilonEstimate> = [8, 32, 128, 512]
        .iter()
        .map(|&n| epsilon_equilibrium(o.as_ref(), &cfg.with_investors(n), rule.clone(), &grid, 4_000, 9).unwrap())
        .collect();
    let eps_ok = eps
        .windows(2)
        .all(|w| w[1].epsilon - w[0].epsilon <= 2.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt());

    let mut iid = common::constant(1, 2, 0.02, 0.2, 10);
    iid.v0 = PerInvestor::Law(Law::LogNormal { mean_log: 0.0, sd_log: 0.5 });
    let io = builtin_market(&iid.market, 1).unwrap();
    let seeds: Vec<u64> = (1..=8).collect();
    let chaos = chaos_metric(io.as_ref(), &iid, &MarketRule, &[8, 32, 128, 512], &[0, 10], &seeds, 16_384).unwrap();
    let fit = chaos.fit.clone().unwrap();
    let chaos_ok = (fit.slope + 0.5).abs() <= 0.3;
    (
        sweep_ok && eps_ok && chaos_ok,
        format!(
            "gaps {:?} ({} inversions, {} significant); ε̂ {:?}; chaos slope {:.3} [{:.3}, {:.3}]",
            gaps.iter().map(|g| g.map(|v| format!("{v:.1e}"))).collect::<Vec<_>>(),
            sweep.increases,
            sweep.significant_increases,
            eps.iter().map(|e| format!("{:.1e}", e.epsilon)).collect::<Vec<_>>(),
            fit.slope,
            fit.ci.0,
            fit.ci.1
        ),
    )
}

fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let stages = ["validate", "simulate", "fichera", "arbitrage", "nash", "mfg", "converge"];
    let mut differing = Vec::new();
    for name in ["constant", "vsm"] {
        let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(scenarios.join(format!("{name}.json"))).unwrap()).unwrap();
        cfg["solver"]["paths"] = 400.into();
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        for stage in stages {
            let mut outputs = Vec::new();
            for threads in ["1", "8"] {
                let out = dir.path().join(format!("{name}-{stage}-{threads}"));
                let status = Command::new(env!("CARGO_BIN_EXE_relarb"))
                    .args(["run", stage])
                    .arg(&path)
                    .args(["--seed", "7", "--threads", threads, "--out"])
                    .arg(&out)
                    .output()
                    .unwrap()
                    .status;
                outputs.push((status.code(), std::fs::read(out.join("summary.json")).ok()));
            }
            let same = outputs[0] == outputs[1] && outputs[0].0 == Some(0) && outputs[0].1.is_some();
            if !same {
                differing.push(format!("{name}/{stage} exit {:?}", outputs.iter().map(|o| o.0).collect::<Vec<_>>()));
            }
        }
    }
    (differing.is_empty(), format!("{} runs compared; differing: {differing:?}", 2 * stages.len()))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "no-arbitrage baseline", no_arbitrage_baseline),
        (2, "trivial PDE solution", fd_trivial_residual),
        (3, "cross-method agreement", fd_mc_agreement),
        (4, "Fichera verdicts", fichera_verdicts),
        (5, "arbitrage direction", arbitrage_direction),
        (6, "Nash with δ = 1", nash_delta_one),
        (7, "Nash symmetry", nash_symmetry),
        (8, "fixed-point oracle", fixed_point_oracle),
        (9, "strategy collapse", strategy_collapse),
        (10, "contraction validity", contraction_validity),
        (11, "mean-field consistency", mfe_consistency),
        (12, "VSM closed form", vsm_closed_form_agreement),
        (13, "convergence in N", convergence),
        (14, "CLI determinism", cli_determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} ({name}) [{:.1} s]: {detail}", t.elapsed().as_secs_f64());
        match (passed, known) {
            (false, Some((_, why))) => println!("     known failure: {why}"),
            (true, Some(_)) => unexpected.push(format!("criterion {id} passed but is listed as a known failure")),
            (false, None) => unexpected.push(format!("criterion {id} failed")),
            (true, None) => {}
        }
    }
    if !unexpected.is_empty() {
        eprintln!("{}", unexpected.join("\n"));
        std::process::exit(1);
    }
}
