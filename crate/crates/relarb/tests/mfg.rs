mod common;

use relarb::mfg::*;
use relarb::model::{builtin_market, Law, PerInvestor, ScenarioConfig, StrategySpec};
use relarb::nash::{solve_nash, NashSettings};

fn small(cfg: &ScenarioConfig) -> MfgSettings {
    let mut s = MfgSettings::from_config(cfg);
    s.k_inner = 16;
    s.outer_paths = 4;
    s.inner_paths = 400;
    s.root_paths = 2_000;
    s.node_stride = 4;
    s.map_iters = 3;
    s
}

fn point(v: f64) -> PerInvestor {
    PerInvestor::Law(Law::Point { value: v })
}

/// One-stock volatility-stabilized market with a law on (v0, c).
fn toy() -> ScenarioConfig {
    let mut cfg = common::vsm(1, 1, 0.0, 20);
    cfg.v0 = common::uniform(0.8, 1.2);
    cfg.c = common::uniform(-0.05, 0.05);
    cfg
}

#[test]
fn delta_one_decouples_m() {
    let mut cfg = toy();
    cfg.delta = 1.0;
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let mut s = small(&cfg);
    s.strategies = false;
    let res = solve_mfe(oracle.as_ref(), &cfg, &s, 3).unwrap();
    assert!(res.converged_m);
    assert_eq!(res.iterations_m, 1);
    assert!(res.residual_m < 1e-12, "{}", res.residual_m);
    assert!(res.k_tilde_upper.iter().all(|&k| k == f64::INFINITY));
}

#[test]
fn point_mass_frozen_market() {
    let mut cfg = common::constant(1, 1, 0.0, 0.0, 10);
    cfg.v0 = point(1.0);
    cfg.c = point(0.0);
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let mut s = small(&cfg);
    s.strategies = false;
    let res = solve_mfe(oracle.as_ref(), &cfg, &s, 1).unwrap();
    assert!(res.converged_m);
    for row in &res.m_path {
        for &m in row {
            assert!((m - 1.0).abs() < 1e-12, "{m}");
        }
    }
    assert!((res.u.mean - 1.0).abs() < 1e-14);

    cfg.c = point(0.2);
    cfg.delta = 0.7;
    let res = solve_mfe(oracle.as_ref(), &cfg, &s, 1).unwrap();
    assert!((res.u.mean - 0.2f64.exp()).abs() < 1e-14);
}

#[test]
fn constant_market_gives_trivial_u_and_market_weights() {
    let mut cfg = common::constant(2, 1, 0.02, 0.2, 20);
    cfg.x0 = vec![1.0, 3.0];
    cfg.c = point(0.01);
    cfg.v0 = common::uniform(0.5, 1.5);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let res = solve_mfe(oracle.as_ref(), &cfg, &small(&cfg), 4).unwrap();
    assert!(res.u.z_against(0.01f64.exp()) < 3.0, "{:?}", res.u);
    assert!(res.converged, "m {} phi {} / {}", res.residual_m, res.residual_phi, res.phi_tolerance);
    for rec in &res.nodes {
        let total: f64 = rec.x.iter().sum();
        for i in 0..2 {
            let gap = (rec.strategy.weights[i] - rec.x[i] / total).abs();
            assert!(gap <= 3.0 * rec.strategy.std_err[i] + 1e-12, "step {}: {:?}", rec.step, rec.strategy);
        }
    }
}

#[test]
fn preference_shift_scales_u() {
    let mut cfg = toy();
    cfg.delta = 1.0;
    cfg.c = point(0.0);
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let mut s = small(&cfg);
    s.strategies = false;
    let base = solve_mfe(oracle.as_ref(), &cfg, &s, 8).unwrap();
    cfg.c = point(0.3);
    let shifted = solve_mfe(oracle.as_ref(), &cfg, &s, 8).unwrap();
    let ratio = shifted.u.mean / base.u.mean;
    assert!((ratio - 0.3f64.exp()).abs() < 1e-10, "{ratio}");
    let r = base.u_for_preference(0.3) / base.u_for_preference(0.0);
    assert!((r - 0.3f64.exp()).abs() < 1e-12);
}

#[test]
fn point_mass_law_matches_single_investor_nash() {
    let mut cfg = toy();
    cfg.strategy = StrategySpec::Market;
    cfg.v0 = point(1.3);
    cfg.c = point(0.1);
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let mut s = small(&cfg);
    s.strategies = false;
    let mf = solve_mfe(oracle.as_ref(), &cfg, &s, 6).unwrap();

    let mut ns = NashSettings::from_config(&cfg);
    ns.outer_paths = s.outer_paths;
    ns.inner_paths = s.inner_paths;
    ns.root_paths = s.root_paths;
    ns.node_stride = s.node_stride;
    ns.strategies = false;
    let nash = solve_nash(oracle.as_ref(), &cfg, &ns, 6).unwrap();
    for (a, b) in mf.m_path.iter().zip(&nash.m_paths) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
    assert!((mf.u.mean - nash.u_per_investor[0]).abs() < 1e-10);
}

#[test]
fn resimulation_reproduces_m() {
    let cfg = toy();
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let s = small(&cfg);
    let res = solve_mfe(oracle.as_ref(), &cfg, &s, 12).unwrap();
    assert!(res.converged_m);
    let rep = consistency_check(oracle.as_ref(), &cfg, &s, &res, 12, 99).unwrap();
    assert!(rep.holds, "{rep:?}");
    assert!(rep.std_err.iter().all(|&e| e >= 0.0));
}

#[test]
fn closed_loop_variant_runs() {
    let mut cfg = toy();
    cfg.solver.map_loop = relarb::model::MapLoop::Closed;
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let res = solve_mfe(oracle.as_ref(), &cfg, &small(&cfg), 2).unwrap();
    assert!(res.converged_m);
    assert!(res.u.mean > 0.0);
    assert!(res.k_tilde_upper.iter().zip(&res.d_tilde).all(|(k, d)| *d == 0.0 || *k > 0.0));
}

#[test]
fn initial_map_does_not_change_u() {
    let mut cfg = common::vsm(2, 1, 0.0, 20);
    cfg.x0 = vec![0.5, 1.0];
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let s = small(&cfg);
    let a = solve_mfe(oracle.as_ref(), &cfg, &s, 5).unwrap();
    cfg.strategy = StrategySpec::Equal;
    let b = solve_mfe(oracle.as_ref(), &cfg, &s, 5).unwrap();
    let combined = (a.u.std_err.powi(2) + b.u.std_err.powi(2)).sqrt();
    assert!((a.u.mean - b.u.mean).abs() <= 3.0 * combined, "{:?} vs {:?}", a.u, b.u);
}
