mod common;

use common::*;
use ctmc_rkhs::chain::{ArmSpec, CensoringModel, ChainTopology, Polynomial};
use ctmc_rkhs::fit_emvs::{
    e_step, fit_emvs, init_from_mixture, m_step_beta, m_step_theta, theta_objective, EmvsConfig,
    EmvsInit,
};
use ctmc_rkhs::fit_freq::{fit_frequentist, Design, FreqConfig, InitStrategy};
use ctmc_rkhs::kernel::{KernelSpec, RateFunction, ScalarKernel, WeightVector};
use ctmc_rkhs::metrics::grid_points;
use ctmc_rkhs::mixture::GaussianMixture2;
use ctmc_rkhs::{simulate_trajectories, Arm, Dataset, SimulationSettings};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn two_arm() -> ChainTopology {
    ChainTopology::new(
        3,
        vec![ArmSpec::nonparametric(1, 2), ArmSpec::nonparametric(1, 3)],
    )
    .unwrap()
}

fn constant_rate_data(n: usize, seed: u64) -> Dataset {
    let top = two_arm();
    let truth = RateFunction::parametric(
        top.clone(),
        vec![Polynomial::new(vec![0.0]), Polynomial::new(vec![0.0])],
    )
    .unwrap();
    let trajs = simulate_trajectories(&truth, &SimulationSettings::default(), n, seed).unwrap();
    Dataset::new(top, trajs).unwrap()
}

#[test]
fn frequentist_recovers_constant_rates() {
    // One jump per trajectory leaves ~100 events per arm at N = 200, so even
    // the closed-form constant-rate MLE misses by ~0.1 on average. The
    // tolerance applies to the median over seeds; each seed must match the
    // MLE's level closely. The default 0.1 / N ridge weight leaves the curve
    // visibly wiggly at this size, so a moderate fixed weight is used.
    let grid = grid_points(-1.0, 1.0, 41);
    let mut maes = Vec::new();
    for seed in 0..10 {
        let data = constant_rate_data(200, seed);
        let design = Design::new(
            &data,
            &KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 1.0 }, data.topology()),
            false,
        )
        .unwrap();
        let fit = fit_frequentist(
            &data,
            &design,
            &FreqConfig {
                lambda: Some(0.1),
                ..FreqConfig::default()
            },
        )
        .unwrap();
        assert!(fit.converged);
        let rf = design.rate_function(&data, &fit.beta).unwrap();
        let exposure: f64 = data
            .trajectories()
            .iter()
            .flat_map(|t| t.intervals())
            .map(|i| i.duration)
            .sum();
        for (arm, to) in [(Arm::new(1, 2), 2), (Arm::new(1, 3), 3)] {
            let values: Vec<f64> = grid
                .iter()
                .map(|z| rf.eval_lngen(arm, z).unwrap())
                .collect();
            let level = values.iter().sum::<f64>() / values.len() as f64;
            let jumps = data
                .trajectories()
                .iter()
                .filter(|t| !t.censored && t.final_state() == to)
                .count() as f64;
            let mle = (jumps / exposure).ln();
            assert!(
                (level - mle).abs() < 0.03,
                "seed {seed} {arm}: level {level}, constant MLE {mle}"
            );
            maes.push(values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64);
        }
    }
    maes.sort_by(f64::total_cmp);
    let median = 0.5 * (maes[9] + maes[10]);
    assert!(
        median <= 0.15,
        "median mean |lngen| = {median}, all: {maes:?}"
    );
}

#[test]
fn huge_ridge_weight_shrinks_to_zero() {
    let data = constant_rate_data(100, 2);
    let design = Design::new(
        &data,
        &KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 1.0 }, data.topology()),
        false,
    )
    .unwrap();
    let fit = fit_frequentist(
        &data,
        &design,
        &FreqConfig {
            lambda: Some(1e6),
            ..FreqConfig::default()
        },
    )
    .unwrap();
    assert!(fit.beta.norm() <= 1e-2, "{}", fit.beta.norm());
    let huge = vec![1e8; design.dim()];
    let fit = m_step_beta(&huge, &data, &design, &FreqConfig::default()).unwrap();
    assert!(fit.beta.norm() <= 1e-2, "{}", fit.beta.norm());
}

#[test]
fn m_step_with_uniform_penalty_equals_ridge_fit() {
    let data = constant_rate_data(60, 3);
    let design = Design::new(
        &data,
        &KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 1.0 }, data.topology()),
        false,
    )
    .unwrap();
    let lambda = 0.05;
    let ridge = fit_frequentist(
        &data,
        &design,
        &FreqConfig {
            lambda: Some(lambda),
            ..FreqConfig::default()
        },
    )
    .unwrap();
    let m = m_step_beta(
        &vec![2.0 * lambda; design.dim()],
        &data,
        &design,
        &FreqConfig::default(),
    )
    .unwrap();
    assert_eq!(ridge.beta, m.beta);
    assert_eq!(ridge.final_loss, m.final_loss);
}

#[test]
fn equal_variances_give_prior_inclusion() {
    let mut r = rng(5);
    let beta = random_beta(50, 4.0, &mut r);
    let (p, d) = e_step(&beta, 0.3, 1.7, 1.7);
    assert!(p.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    assert!(d.iter().all(|&v| (v - 1.0 / 1.7).abs() < 1e-12));
}

#[test]
fn theta_update_beats_grid_search() {
    let mut r = rng(6);
    for (a0, a1) in [(3.0, 0.5), (1.0, 1.0), (0.5, 0.5), (2.0, 7.0)] {
        for _ in 0..10 {
            let n = r.random_range(1..40);
            let p: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(3)).collect();
            let sum_p: f64 = p.iter().sum();
            let theta = m_step_theta(&p, a0, a1);
            let best = (1..10_000)
                .map(|k| theta_objective(k as f64 * 1e-4, sum_p, n, a0, a1))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                theta_objective(theta, sum_p, n, a0, a1) >= best - 1e-8,
                "a0={a0} a1={a1} theta={theta}"
            );
        }
    }
}

#[test]
fn em_never_decreases_q_within_an_iteration() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let top = &topologies()[seed as usize % 5];
        let data = random_dataset(top, 15, 1, 4, &mut r);
        let design = Design::new(
            &data,
            &KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 0.8 }, top),
            false,
        )
        .unwrap();
        let cfg = EmvsConfig {
            inner: FreqConfig {
                init: InitStrategy::RandomNormal { scale: 1.0, seed },
                ..FreqConfig::default()
            },
            ..EmvsConfig::default()
        };
        let fit = fit_emvs(&data, &design, &cfg).unwrap();
        for row in &fit.trace {
            assert!(
                row.q0 >= row.q0_before - 1e-9 * row.q0.abs().max(1.0),
                "{row:?}"
            );
        }
    }
}

#[test]
fn emvs_selects_the_signal_coordinates() {
    // Grid-spaced covariates with a narrow kernel make the Gram matrix the
    // identity to machine precision, so each weight is one log-rate.
    let top = ChainTopology::new(
        2,
        vec![ArmSpec::nonparametric(1, 2), ArmSpec::nonparametric(2, 1)],
    )
    .unwrap();
    let z: Vec<Vec<f64>> = (0..15).map(|l| vec![l as f64]).collect();
    let spec = KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 0.1 }, &top);
    let mut beta = vec![0.0; 30];
    let signal = [(1, 2.0), (6, -2.0), (13, 2.0), (20, -2.0), (27, 2.0)];
    for (j, v) in signal {
        beta[j] = v;
    }
    let truth = RateFunction::kernelized(
        top.clone(),
        &spec,
        z.clone(),
        None,
        &WeightVector::from_stacked(beta, 2).unwrap(),
    )
    .unwrap();
    let censoring = CensoringModel::FixedHorizon { t_max: 50.0 };
    let trajs: Vec<_> = z
        .iter()
        .enumerate()
        .map(|(l, zl)| {
            let mut rng = ctmc_rkhs::rng::substream(77, ctmc_rkhs::rng::Purpose::Path, l as u64);
            ctmc_rkhs::chain::simulate_with_rng(&top, &truth, zl, &censoring, 1, &mut rng).unwrap()
        })
        .collect();
    let data = Dataset::new(top.clone(), trajs).unwrap();
    let design = Design::new(&data, &spec, false).unwrap();
    let fit = fit_emvs(&data, &design, &EmvsConfig::default()).unwrap();
    assert!(fit.converged);
    let is_signal = |j: usize| signal.iter().any(|s| s.0 == j);
    let hits = (0..30)
        .filter(|&j| fit.selection[j] && is_signal(j))
        .count();
    let false_pos = (0..30)
        .filter(|&j| fit.selection[j] && !is_signal(j))
        .count();
    assert!(hits >= 4, "selected {:?}", fit.selection);
    assert!(
        false_pos as f64 <= 0.1 * 25.0,
        "selected {:?}",
        fit.selection
    );
    for j in (0..30).filter(|&j| fit.selection[j]) {
        assert_eq!(fit.sparsified.as_slice()[j], fit.state.beta.as_slice()[j]);
    }
    assert!((0..30)
        .filter(|&j| !fit.selection[j])
        .all(|j| fit.sparsified.as_slice()[j] == 0.0));
}

#[test]
fn mixture_recovers_spike_and_slab_variances() {
    let mut r = rng(9);
    let spike = Normal::new(0.0, 0.1).unwrap();
    let slab = Normal::new(0.0, 3.0).unwrap();
    let x: Vec<f64> = (0..400)
        .map(|k| {
            if k % 2 == 0 {
                spike.sample(&mut r)
            } else {
                slab.sample(&mut r)
            }
        })
        .collect();
    let init = init_from_mixture(&x);
    assert!((init.nu0 / 0.01 - 1.0).abs() < 0.5, "{init:?}");
    assert!((init.nu1 / 9.0 - 1.0).abs() < 0.5, "{init:?}");
    assert!((0.3..=0.7).contains(&init.theta_init), "{init:?}");

    // larger sample, tighter check on the raw EM fit
    let x: Vec<f64> = (0..3000)
        .map(|k| {
            if k % 10 < 7 {
                spike.sample(&mut r)
            } else {
                slab.sample(&mut r)
            }
        })
        .collect();
    let m = GaussianMixture2::fit(&x, 1e-10, 5000).unwrap();
    let (lo, hi) = if m.variances[0] < m.variances[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    assert!((m.variances[lo] / 0.01 - 1.0).abs() < 0.2, "{m:?}");
    assert!((m.variances[hi] / 9.0 - 1.0).abs() < 0.2, "{m:?}");
    assert!((m.weights[hi] - 0.3).abs() < 0.05, "{m:?}");
}

#[test]
fn mixture_init_falls_back_on_degenerate_fits() {
    let data = constant_rate_data(1, 4);
    let design = Design::new(
        &data,
        &KernelSpec::uniform(ScalarKernel::Rbf { bandwidth: 1.0 }, data.topology()),
        false,
    )
    .unwrap();
    let cfg = EmvsConfig {
        init: EmvsInit::Mixture,
        ..EmvsConfig::default()
    };
    let fit = fit_emvs(&data, &design, &cfg).unwrap();
    let mix = fit.mixture.unwrap();
    assert!(matches!(
        mix.source,
        ctmc_rkhs::fit_emvs::MixtureSource::Defaults { .. }
    ));
    assert_eq!((fit.nu0, fit.nu1), (0.4, 5.0));
}
