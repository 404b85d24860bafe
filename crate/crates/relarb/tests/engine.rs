mod common;

use relarb::engine::*;
use relarb::model::{builtin_market, ConstantMarket, YMode};
use relarb::stats::{ols_slope, Estimate};
use relarb::Error;

#[test]
fn frozen_dynamics_stay_put() {
    let cfg = common::constant(2, 3, 0.0, 0.0, 20);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &EqualRule, 4, 5).unwrap();
    for p in &set.paths {
        assert!(p.x.iter().all(|&x| x == 1.0));
        assert!(p.v.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn deterministic_exponential_growth() {
    let r = 0.07;
    let mut cfg = common::constant(2, 2, r, 0.0, 50);
    cfg.x0 = vec![1.0, 3.0];
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, 1, 2).unwrap();
    let v = set.paths[0].v_at(50);
    assert!((v[0] - r.exp()).abs() < 1e-12, "{}", v[0]);
}

#[test]
fn gbm_mean_matches_lognormal_moment() {
    let (beta, vol) = (0.1, 0.3);
    let cfg = common::constant(1, 1, beta, vol, 10);
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, 9, 100_000).unwrap();
    let xs: Vec<f64> = set.paths.iter().map(|p| p.x_at(10)[0]).collect();
    let est = Estimate::from_samples(&xs);
    assert!(est.z_against(beta.exp()).abs() < 3.0, "{est:?}");
}

#[test]
fn endogenous_capital_identity_is_exact() {
    let mut cfg = common::constant(3, 4, 0.05, 0.2, 30);
    cfg.v0 = common::uniform(0.5, 2.0);
    let oracle = builtin_market(&cfg.market, 3).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &EqualRule, 3, 20).unwrap();
    for p in &set.paths {
        for k in 0..=30 {
            for i in 0..3 {
                let mut terms: Vec<f64> = (0..4).map(|l| p.v_at(k)[l] * p.weights_at(k, l)[i]).collect();
                let naive: f64 = terms.iter().sum();
                assert!((p.y_at(k)[i] - naive / 4.0).abs() <= 1e-15 * naive.abs());
                assert_eq!(p.y_at(k)[i], relarb::stats::sorted_sum(&mut terms) / 4.0);
            }
        }
    }
}

#[test]
fn positivity_across_seeds() {
    let cfg = common::vsm(2, 2, 0.5, 100);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    for seed in 0..100 {
        let set = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, seed, 4).unwrap();
        for p in &set.paths {
            assert!(p.x.iter().chain(&p.v).all(|&v| v > 0.0), "seed {seed}");
        }
    }
}

#[test]
fn reproducible_regardless_of_threads() {
    let cfg = common::constant(2, 3, 0.05, 0.25, 40);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_n_particle(oracle.as_ref(), &cfg, &EqualRule, 77, 64).unwrap())
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn deflator_trivial_and_martingale() {
    let cfg = common::constant(1, 1, 0.0, 0.2, 10);
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, 2, 3).unwrap();
    let d = simulate_deflator(&set, 0, oracle.as_ref()).unwrap();
    assert!(d.l.iter().all(|&l| l == 1.0));
    assert!(d.theta.iter().chain(&d.lambda).all(|&t| t == 0.0));

    let oracle = ConstantMarket::diagonal_gbm(&[0.4], 0.2);
    let cfg = common::constant(1, 1, 0.4 * 0.2, 0.2, 10);
    let set = simulate_n_particle(&oracle, &cfg, &MarketRule, 3, 100_000).unwrap();
    let ls: Vec<f64> = (0..set.paths.len()).map(|i| *simulate_deflator(&set, i, &oracle).unwrap().l.last().unwrap()).collect();
    let est = Estimate::from_samples(&ls);
    assert!(est.z_against(1.0).abs() < 3.0, "{est:?}");
}

#[test]
fn deflator_reconstruction() {
    let cfg = common::vsm(2, 2, 0.3, 50);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, 5, 4).unwrap();
    for i in 0..4 {
        let d = simulate_deflator(&set, i, oracle.as_ref()).unwrap();
        let mut s = 0.0;
        for (k, inc) in d.log_increments.iter().enumerate() {
            s += inc;
            assert!((s.exp() - d.l[k + 1]).abs() <= 1e-12 * d.l[k + 1].max(1.0));
            assert!(d.l[k + 1] > 0.0);
        }
    }
}

#[test]
fn deflator_matches_in_loop_value() {
    let cfg = common::constant(2, 1, 0.03, 0.2, 25);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, 8, 1).unwrap();
    let spec = EngineSpec::from_config(&cfg);
    let end = run_path(oracle.as_ref(), &spec, &MarketRule, &[1.0], NodeState::initial(&cfg.x0, &[0.0, 0.0], &[1.0]), 25, 8, 0, |_| {})
        .unwrap();
    let d = simulate_deflator(&set, 0, oracle.as_ref()).unwrap();
    assert!((end.log_l.exp() - d.l[25]).abs() < 1e-12);
}

#[test]
fn benchmark_identities() {
    let mut cfg = common::constant(2, 2, 0.05, 0.2, 10);
    cfg.v0 = relarb::model::PerInvestor::Explicit(vec![1.0, 2.0]);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &cfg, &EqualRule, 1, 3).unwrap();
    for delta in [0.0, 0.5, 1.0] {
        let b = benchmark_path(&set, 1, delta).unwrap();
        for k in 0..=10 {
            assert_eq!(b.vbench[k], delta * b.market_total[k] + (1.0 - delta) * b.peer_average[k]);
            if delta == 1.0 {
                assert_eq!(b.vbench[k], set.paths[1].x_at(k).iter().sum::<f64>());
            }
        }
        assert_eq!(b.relative_log_performance.len(), 2);
    }

    let frozen = common::constant(2, 2, 0.0, 0.0, 4);
    let oracle = builtin_market(&frozen.market, 2).unwrap();
    let set = simulate_n_particle(oracle.as_ref(), &frozen, &MarketRule, 1, 1).unwrap();
    assert!(benchmark_path(&set, 0, 0.0).unwrap().vbench.iter().all(|&v| v == 1.0));
}

#[test]
fn benchmark_arithmetic_example() {
    let set = ParticlePathSet {
        grid: vec![0.0],
        v0: vec![1.0, 1.0],
        y_mode: YMode::Frozen,
        paths: vec![ParticlePath {
            n: 2,
            investors: 2,
            x: vec![1.0, 1.0],
            v: vec![1.0, 3.0],
            y: vec![0.0, 0.0],
            dw: vec![],
            dw_y: vec![],
            strategies: vec![0.5; 4],
            clamps: 0,
        }],
    };
    assert_eq!(benchmark_path(&set, 0, 0.5).unwrap().vbench[0], 2.0);
    assert!(matches!(benchmark_path(&set, 3, 0.5), Err(Error::Shape(_))));
}

#[test]
fn strict_simplex_rejects_leverage() {
    let mut cfg = common::constant(2, 1, 0.0, 0.1, 5);
    cfg.solver.strict_simplex = true;
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let err = simulate_n_particle(oracle.as_ref(), &cfg, &FixedRule(vec![1.5, -0.4]), 1, 1).unwrap_err();
    assert!(matches!(err, Error::Admissibility { .. }));
}

#[test]
fn non_finite_coefficients_report_step() {
    let mut cfg = common::vsm(2, 1, 0.0, 5);
    cfg.solver.log_increment_cap = None;
    cfg.x0 = vec![1e-300, 1.0];
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let err = simulate_n_particle(oracle.as_ref(), &cfg, &MarketRule, 1, 1).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. } | Error::Singularity(_)), "{err}");
}

#[test]
fn deflated_wealth_has_flat_mean() {
    let oracle = ConstantMarket::diagonal_gbm(&[0.3, 0.1], 0.25);
    let mut cfg = common::constant(2, 2, 0.0, 0.25, 20);
    cfg.market = relarb::model::MarketSpec::Constant {
        beta: vec![0.3 * 0.25, 0.1 * 0.25],
        sigma: common::diag(2, 0.25),
        gamma: None,
        tau: None,
    };
    let paths = 20_000;
    let spec = EngineSpec::from_config(&cfg);
    let mut sums: Vec<Vec<f64>> = (0..21).map(|_| Vec::with_capacity(paths)).collect();
    for p in 0..paths {
        let mut k = 0;
        run_path(&oracle, &spec, &EqualRule, &[1.0, 1.0], NodeState::initial(&cfg.x0, &[0.0; 2], &[1.0, 1.0]), 20, 4, p, |ev| {
            sums[k].push(ev.state.v[0] * ev.state.log_l.exp());
            k += 1;
        })
        .unwrap();
    }
    let means: Vec<f64> = sums.iter().map(|s| relarb::stats::mean(s)).collect();
    let ts: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    let (slope, se) = ols_slope(&ts, &means);
    let end = Estimate::from_samples(&sums[20]);
    assert!(slope.abs() < 3.0 * se.max(end.std_err), "slope {slope} se {se}");
}

#[test]
fn mean_field_degenerate_and_frozen() {
    let cfg = common::constant(2, 1, 0.05, 0.2, 10);
    let oracle = builtin_market(&cfg.market, 2).unwrap();
    let mf = simulate_mean_field(oracle.as_ref(), &cfg, &EqualRule, 8, 3).unwrap();
    for k in 0..mf.nodes() {
        let inner = mf.inner_at(k);
        assert!(inner.iter().all(|&v| v == inner[0]));
        assert!((mf.m[k] - inner[0]).abs() < 1e-14);
    }

    let mut frozen = common::constant(2, 1, 0.0, 0.0, 10);
    frozen.v0 = common::uniform(1.0, 3.0);
    let oracle = builtin_market(&frozen.market, 2).unwrap();
    let mf = simulate_mean_field(oracle.as_ref(), &frozen, &MarketRule, 16, 3).unwrap();
    assert!(mf.m.iter().all(|&m| m == mf.m[0]));
    assert!(mf.z.chunks(2).all(|z| z == mf.z_at(0)));
    assert!((mf.m[0] - relarb::stats::mean(&mf.v0)).abs() < 1e-15);

    assert!(matches!(simulate_mean_field(oracle.as_ref(), &frozen, &MarketRule, 1, 3), Err(Error::Config(_))));
}

#[test]
fn mean_field_inner_error_shrinks() {
    let mut cfg = common::constant(1, 1, 0.05, 0.2, 10);
    cfg.v0 = common::uniform(0.5, 1.5);
    let oracle = builtin_market(&cfg.market, 1).unwrap();
    let spread = |k: usize| {
        let reference = simulate_mean_field(oracle.as_ref(), &cfg, &MarketRule, 4096, 1).unwrap();
        let errs: Vec<f64> = (0..40u64)
            .map(|s| {
                let mut c = cfg.clone();
                c.seed = 100 + s;
                let mf = simulate_mean_field(oracle.as_ref(), &c, &MarketRule, k, 1).unwrap();
                (mf.m[10] - reference.m[10]).powi(2)
            })
            .collect();
        relarb::stats::mean(&errs).sqrt()
    };
    let (small, large) = (spread(64), spread(1024));
    let ratio = small / large;
    assert!(ratio > 2.0 && ratio < 8.0, "ratio {ratio}");
}

#[test]
fn conditional_mean_examples() {
    assert_eq!(conditional_mean(&[5.0, 5.0, 5.0]), 5.0);
    assert_eq!(conditional_mean(&[1.0, 3.0]), 2.0);
}
