mod common;

use common::*;
use ctmc_rkhs::kernel::WeightVector;
use ctmc_rkhs::likelihood::{neg_log_lik, rate_function_loss, Objective, Penalty};
use proptest::prelude::*;

fn loss_at(data: &ctmc_rkhs::Dataset, grams: &ctmc_rkhs::GramSet, beta: &[f64]) -> f64 {
    let wv = WeightVector::from_stacked(beta.to_vec(), data.topology().n_nonparametric()).unwrap();
    neg_log_lik(&wv, data, grams).unwrap().value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_product_of_densities(seed in any::<u64>(), top_idx in 0usize..5, n in 1usize..=5, dim in 1usize..=2) {
        let mut r = rng(seed);
        let top = &topologies()[top_idx];
        let data = random_dataset(top, n, dim, 4, &mut r);
        let (spec, grams) = rbf_grams(&data, 0.8);
        let beta = random_beta(n * top.n_nonparametric(), 1.0, &mut r);
        let ours = loss_at(&data, &grams, &beta);
        let oracle = oracle_neg_log_lik(&kernel_rate_function(&data, &spec, &beta), &data);
        prop_assert!((ours - oracle).abs() <= 1e-9, "ours {ours} oracle {oracle}");
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), top_idx in 0usize..5, n in 1usize..=12) {
        let mut r = rng(seed);
        let top = &topologies()[top_idx];
        let data = random_dataset(top, n, 2, 4, &mut r);
        let (_, grams) = rbf_grams(&data, 1.0);
        let beta = random_beta(n * top.n_nonparametric(), 0.5, &mut r);
        let obj = Objective::new(&data, &grams).unwrap();
        let g = obj.evaluate(&beta, &Penalty::Ridge(0.3), true).unwrap().gradient.unwrap();
        let h = 1e-5;
        for j in 0..beta.len() {
            let (mut up, mut dn) = (beta.clone(), beta.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (obj.evaluate(&up, &Penalty::Ridge(0.3), false).unwrap().value
                - obj.evaluate(&dn, &Penalty::Ridge(0.3), false).unwrap().value) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "coord {j}: fd {fd} analytic {}", g[j]);
        }
    }
}

#[test]
fn loss_is_additive_over_trajectories() {
    let mut r = rng(3);
    let top = &topologies()[4];
    let data = random_dataset(top, 8, 1, 4, &mut r);
    let (spec, _) = rbf_grams(&data, 1.0);
    let beta = random_beta(8 * top.n_nonparametric(), 1.0, &mut r);
    let rf = kernel_rate_function(&data, &spec, &beta);
    let whole = rate_function_loss(&rf, &data).unwrap();
    let parts: f64 = (0..8)
        .map(|k| rate_function_loss(&rf, &data.select(&[k]).unwrap()).unwrap())
        .sum();
    assert!((whole - parts).abs() < 1e-10);
    let (_, grams) = rbf_grams(&data, 1.0);
    assert!((whole - loss_at(&data, &grams, &beta)).abs() < 1e-9);
}

#[test]
fn permuting_trajectories_permutes_weights() {
    let mut r = rng(8);
    let top = &topologies()[1];
    let data = random_dataset(top, 7, 2, 4, &mut r);
    let a = top.n_nonparametric();
    let (_, grams) = rbf_grams(&data, 1.0);
    let beta = random_beta(7 * a, 1.0, &mut r);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let shuffled = data.select(&perm).unwrap();
    let (_, sgrams) = rbf_grams(&shuffled, 1.0);
    let sbeta: Vec<f64> = perm
        .iter()
        .flat_map(|&l| beta[l * a..(l + 1) * a].to_vec())
        .collect();
    let base = loss_at(&data, &grams, &beta);
    assert!((base - loss_at(&shuffled, &sgrams, &sbeta)).abs() < 1e-10);
}

#[test]
fn censoring_constants_shift_value_not_gradient() {
    let mut r = rng(21);
    let top = &topologies()[3];
    let data = random_dataset(top, 6, 1, 3, &mut r);
    let (_, grams) = rbf_grams(&data, 1.0);
    let beta = random_beta(6 * 3, 1.0, &mut r);
    let censoring = ctmc_rkhs::CensoringModel::Exponential { rate: 0.4 };
    let plain = Objective::new(&data, &grams)
        .unwrap()
        .evaluate(&beta, &Penalty::None, true)
        .unwrap();
    let full = Objective::new(&data, &grams)
        .unwrap()
        .with_censoring_terms(&data, &censoring)
        .evaluate(&beta, &Penalty::None, true)
        .unwrap();
    let expected: f64 = data
        .trajectories()
        .iter()
        .map(|t| {
            let end = t.jumps.last().unwrap().time;
            if t.censored {
                -(0.4f64.ln() - 0.4 * end)
            } else {
                0.4 * end
            }
        })
        .sum();
    assert!((full.value - plain.value - expected).abs() < 1e-10);
    assert_eq!(full.gradient, plain.gradient);
}
