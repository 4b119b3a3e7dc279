#![allow(dead_code)]

use ctmc_rkhs::chain::{ArmSpec, ChainTopology, Jump, Polynomial, Trajectory};
use ctmc_rkhs::kernel::{gram, GramSet, KernelSpec, RateFunction, ScalarKernel, WeightVector};
use ctmc_rkhs::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small topologies on at most four states, some with cycles and fixed arms.
pub fn topologies() -> Vec<ChainTopology> {
    let np = ArmSpec::nonparametric;
    vec![
        ChainTopology::new(2, vec![np(1, 2), np(2, 1)]).unwrap(),
        ChainTopology::new(3, vec![np(1, 2), np(1, 3)]).unwrap(),
        ChainTopology::new(
            3,
            vec![
                np(1, 2),
                ArmSpec::fixed(1, 3, Polynomial::new(vec![0.07, 0.6])),
            ],
        )
        .unwrap(),
        ChainTopology::new(4, vec![np(1, 2), np(1, 3), np(2, 4)]).unwrap(),
        ChainTopology::new(4, vec![np(1, 2), np(2, 1), np(2, 3), np(1, 4), np(3, 4)]).unwrap(),
    ]
}

/// Random walk on the topology with at most `max_jumps` transitions;
/// trajectories that stop in a transient state are censored there.
pub fn random_trajectory(
    top: &ChainTopology,
    dim: usize,
    max_jumps: usize,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let covariate: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut state = 1;
    let mut t = 0.0;
    let mut jumps = vec![Jump { time: 0.0, state }];
    let n_jumps = rng.random_range(0..=max_jumps);
    for _ in 0..n_jumps {
        let out = top.outgoing(state);
        if out.is_empty() {
            break;
        }
        t += rng.random_range(0.05..2.0);
        state = top.arms()[out[rng.random_range(0..out.len())]].to;
        jumps.push(Jump { time: t, state });
    }
    let censored = !top.is_absorbing(state);
    if censored {
        t += rng.random_range(0.05..2.0);
        jumps.push(Jump { time: t, state });
    }
    Trajectory::new(covariate, jumps, censored)
}

pub fn random_dataset(
    top: &ChainTopology,
    n: usize,
    dim: usize,
    max_jumps: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let trajectories = (0..n)
        .map(|_| random_trajectory(top, dim, max_jumps, rng))
        .collect();
    Dataset::new(top.clone(), trajectories).unwrap()
}

pub fn random_beta(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rbf_grams(data: &Dataset, bandwidth: f64) -> (KernelSpec, GramSet) {
    let spec = KernelSpec::uniform(ScalarKernel::Rbf { bandwidth }, data.topology());
    let grams = gram(&spec, &data.covariates()).unwrap();
    (spec, grams)
}

/// Negative log of the product of interval densities, evaluated through the
/// full generator at each trajectory's covariate.
pub fn oracle_neg_log_lik(rf: &RateFunction, data: &Dataset) -> f64 {
    let mut total = 0.0;
    for t in data.trajectories() {
        let q = rf.eval_rates(&t.covariate).unwrap();
        let mut log_density = 0.0;
        for w in t.jumps.windows(2) {
            let (i, j, dt) = (w[0].state, w[1].state, w[1].time - w[0].time);
            let exit = -q.get(i, i);
            if i == j {
                // censoring record: survival only
                log_density += -exit * dt;
            } else {
                log_density += q.get(i, j).ln() - exit * dt;
            }
        }
        total -= log_density;
    }
    total
}

pub fn kernel_rate_function(data: &Dataset, spec: &KernelSpec, beta: &[f64]) -> RateFunction {
    let wv = WeightVector::from_stacked(beta.to_vec(), data.topology().n_nonparametric()).unwrap();
    RateFunction::kernelized(data.topology().clone(), spec, data.covariates(), None, &wv).unwrap()
}
