//! Two-component univariate Gaussian mixture fitted by EM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_VARIANCE: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture2 {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - (x - mean) * (x - mean) / (2.0 * var)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn moments(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = xs.clone().count();
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var, n)
}

impl GaussianMixture2 {
    /// EM until the log-likelihood changes by less than `tol`.
    ///
    /// Starts from a median split on the absolute deviation from the median:
    /// the central half seeds component 0, the outer half component 1.
    pub fn fit(data: &[f64], tol: f64, max_iters: usize) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::DegenerateMixture(format!(
                "{} points, need at least 4",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateMixture("non-finite data".into()));
        }
        let center = median(&mut data.to_vec());
        let dev: Vec<f64> = data.iter().map(|x| (x - center).abs()).collect();
        let cut = median(&mut dev.clone());
        let inner = data
            .iter()
            .zip(&dev)
            .filter(|(_, d)| **d <= cut)
            .map(|(x, _)| *x);
        let outer = data
            .iter()
            .zip(&dev)
            .filter(|(_, d)| **d > cut)
            .map(|(x, _)| *x);
        let (m0, v0, n0) = moments(inner);
        if n0 == data.len() {
            return Err(Error::DegenerateMixture(
                "no spread around the median".into(),
            ));
        }
        let (m1, v1, n1) = moments(outer);
        let n = data.len() as f64;
        let mut mix = GaussianMixture2 {
            means: [m0, m1],
            variances: [v0.max(MIN_VARIANCE * 10.0), v1.max(MIN_VARIANCE * 10.0)],
            weights: [n0 as f64 / n, n1 as f64 / n],
            log_likelihood: f64::NEG_INFINITY,
            iterations: 0,
        };

        let mut resp = vec![0.0; data.len()];
        for it in 1..=max_iters {
            // E step: responsibility of component 1
            let mut ll = 0.0;
            for (r, &x) in resp.iter_mut().zip(data) {
                let l0 = mix.weights[0].ln() + log_normal(x, mix.means[0], mix.variances[0]);
                let l1 = mix.weights[1].ln() + log_normal(x, mix.means[1], mix.variances[1]);
                let total = log_sum_exp(l0, l1);
                *r = (l1 - total).exp();
                ll += total;
            }
            let converged = (ll - mix.log_likelihood).abs() < tol;
            mix.log_likelihood = ll;
            mix.iterations = it;
            if converged {
                break;
            }
            // M step
            let w1: f64 = resp.iter().sum();
            let w0 = n - w1;
            if w0 <= 0.0 || w1 <= 0.0 {
                return Err(Error::DegenerateMixture("a component lost all mass".into()));
            }
            let mu0 = data
                .iter()
                .zip(&resp)
                .map(|(x, r)| (1.0 - r) * x)
                .sum::<f64>()
                / w0;
            let mu1 = data.iter().zip(&resp).map(|(x, r)| r * x).sum::<f64>() / w1;
            let var0 = data
                .iter()
                .zip(&resp)
                .map(|(x, r)| (1.0 - r) * (x - mu0).powi(2))
                .sum::<f64>()
                / w0;
            let var1 = data
                .iter()
                .zip(&resp)
                .map(|(x, r)| r * (x - mu1).powi(2))
                .sum::<f64>()
                / w1;
            if var0 < MIN_VARIANCE || var1 < MIN_VARIANCE {
                return Err(Error::DegenerateMixture(format!(
                    "component variance collapsed ({var0:e}, {var1:e})"
                )));
            }
            mix.means = [mu0, mu1];
            mix.variances = [var0, var1];
            mix.weights = [w0 / n, w1 / n];
        }
        if mix.weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
            return Err(Error::DegenerateMixture(
                "mixing weight at the boundary".into(),
            ));
        }
        Ok(mix)
    }
}
