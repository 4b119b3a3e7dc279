//! Posterior-mode search under a spike-and-slab prior on the representer
//! weights (EM variable selection).
//!
//! Prior: `beta_j | gamma_j ~ N(0, nu0)` if `gamma_j = 0`, `N(0, nu1)` if
//! `gamma_j = 1`; `gamma_j ~ Bernoulli(theta)`; `theta ~ Beta(a0, a1)`.
//! The indicators are the missing data. Each EM iteration computes
//! `p*_j = E[gamma_j]` and `d*_j = E[1 / variance_j]`, then maximizes
//!
//! ```text
//! Q0(beta, theta) = -loss(beta) - 1/2 sum_j d*_j beta_j^2
//!                   + (sum p* + a0 - 1) ln theta + (n + a1 - 1 - sum p*) ln(1 - theta)
//! ```
//!
//! over `beta` (L-BFGS, warm started) and `theta` (closed form).

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fit_freq::{
    fit_frequentist, minimize_penalized, Design, FitResult, FreqConfig, InitStrategy,
};
use crate::kernel::WeightVector;
use crate::likelihood::{Objective, Penalty};
use crate::mixture::GaussianMixture2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const THETA_FLOOR: f64 = 1e-6;

/// Hyperparameters used when no mixture initialization is run (or it degenerates).
pub const DEFAULT_NU0: f64 = 0.4;
pub const DEFAULT_NU1: f64 = 5.0;
pub const DEFAULT_THETA: f64 = 0.2;
pub const DEFAULT_A0: f64 = 3.0;
pub const DEFAULT_A1: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmvsInit {
    /// Start from `beta = 0` with the configured `nu0`, `nu1`, `theta_init`.
    Zero,
    /// Fit the frequentist estimate, set `nu0`, `nu1`, `theta_init` from a
    /// two-component mixture over its entries, and start from it.
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmvsConfig {
    pub nu0: f64,
    pub nu1: f64,
    pub a0: f64,
    pub a1: f64,
    pub theta_init: f64,
    pub max_em_iters: usize,
    pub tol_param: f64,
    /// Inner M-step optimizer; its `lambda` is only used by the mixture pre-fit.
    pub inner: FreqConfig,
    pub init: EmvsInit,
    /// Extra runs from random starts; the run with the highest log-posterior wins.
    pub restarts: usize,
    pub restart_seed: u64,
}

impl Default for EmvsConfig {
    fn default() -> Self {
        EmvsConfig {
            nu0: DEFAULT_NU0,
            nu1: DEFAULT_NU1,
            a0: DEFAULT_A0,
            a1: DEFAULT_A1,
            theta_init: DEFAULT_THETA,
            max_em_iters: 100,
            tol_param: 1e-4,
            inner: FreqConfig::default(),
            init: EmvsInit::Zero,
            restarts: 0,
            restart_seed: 0,
        }
    }
}

impl EmvsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.nu0 > 0.0 && self.nu0 < self.nu1 && self.nu1.is_finite()) {
            return bad(format!(
                "need 0 < nu0 < nu1, got nu0={}, nu1={}",
                self.nu0, self.nu1
            ));
        }
        if !(self.a0 > 0.0 && self.a1 > 0.0) {
            return bad(format!(
                "Beta hyperparameters must be positive, got a0={}, a1={}",
                self.a0, self.a1
            ));
        }
        if !(self.theta_init > 0.0 && self.theta_init < 1.0) {
            return bad(format!(
                "theta_init must lie in (0, 1), got {}",
                self.theta_init
            ));
        }
        if self.max_em_iters == 0 {
            return bad("max_em_iters must be at least 1".into());
        }
        if !(self.tol_param > 0.0) {
            return bad("tol_param must be positive".into());
        }
        self.inner.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmvsState {
    pub beta: WeightVector,
    pub theta: f64,
    pub p_star: Vec<f64>,
    pub d_star: Vec<f64>,
    pub iterations: usize,
    pub q0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmTraceRow {
    pub iteration: usize,
    pub theta: f64,
    pub sum_p_star: f64,
    /// `Q0` of the previous iterate under this iteration's expectations.
    pub q0_before: f64,
    pub q0: f64,
    pub max_abs_delta_beta: f64,
    pub inner_iterations: usize,
    /// Marginal log-posterior of `(beta, theta)` after this iteration.
    pub log_posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureSource {
    Fitted(GaussianMixture2),
    Defaults { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureInit {
    pub nu0: f64,
    pub nu1: f64,
    pub theta_init: f64,
    pub source: MixtureSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmvsFit {
    pub state: EmvsState,
    /// `p*_j >= 0.5` at termination.
    pub selection: Vec<bool>,
    /// Mode with unselected coordinates set to zero.
    pub sparsified: WeightVector,
    pub converged: bool,
    pub trace: Vec<EmTraceRow>,
    /// Hyperparameters actually used.
    pub nu0: f64,
    pub nu1: f64,
    pub theta_init: f64,
    pub mixture: Option<MixtureInit>,
    pub log_posterior: f64,
    pub clamp_events: usize,
}

fn log_normal0(x: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln()) - x * x / (2.0 * var)
}

/// `log(theta N(x|0,nu1)) - log((1-theta) N(x|0,nu0))`
fn slab_log_odds(x: f64, theta: f64, nu0: f64, nu1: f64) -> f64 {
    theta.ln() + log_normal0(x, nu1) - (1.0 - theta).ln() - log_normal0(x, nu0)
}

/// Conditional inclusion probabilities and expected prior precisions.
pub fn e_step(beta: &[f64], theta: f64, nu0: f64, nu1: f64) -> (Vec<f64>, Vec<f64>) {
    let p: Vec<f64> = beta
        .iter()
        .map(|&b| {
            let t = slab_log_odds(b, theta, nu0, nu1);
            if t >= 0.0 {
                1.0 / (1.0 + (-t).exp())
            } else {
                let e = t.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    let d = p.iter().map(|&pj| (1.0 - pj) / nu0 + pj / nu1).collect();
    (p, d)
}

/// The theta-dependent part of `Q0`.
pub fn theta_objective(theta: f64, sum_p: f64, n: usize, a0: f64, a1: f64) -> f64 {
    let up = sum_p + a0 - 1.0;
    let down = n as f64 + a1 - 1.0 - sum_p;
    let term = |c: f64, v: f64| if c == 0.0 { 0.0 } else { c * v.ln() };
    term(up, theta) + term(down, 1.0 - theta)
}

/// Maximizer of the theta terms of `Q0` over `[1e-6, 1 - 1e-6]`.
pub fn m_step_theta(p_star: &[f64], a0: f64, a1: f64) -> f64 {
    let n = p_star.len();
    let sum_p: f64 = p_star.iter().sum();
    let up = sum_p + a0 - 1.0;
    let down = n as f64 + a1 - 1.0 - sum_p;
    let (lo, hi) = (THETA_FLOOR, 1.0 - THETA_FLOOR);
    if up >= 0.0 && down >= 0.0 && up + down > 0.0 {
        // concave: the stationary point, clamped
        (up / (up + down)).clamp(lo, hi)
    } else {
        // objective is monotone or convex: best endpoint
        let f = |t| theta_objective(t, sum_p, n, a0, a1);
        if f(lo) >= f(hi) {
            lo
        } else {
            hi
        }
    }
}

/// `Q0(beta, theta | p*, d*)`; `loss` is the negative log-likelihood at `beta`.
pub fn q0_value(
    loss: f64,
    beta: &[f64],
    theta: f64,
    p_star: &[f64],
    d_star: &[f64],
    a0: f64,
    a1: f64,
) -> f64 {
    let ridge: f64 = beta.iter().zip(d_star).map(|(b, d)| 0.5 * d * b * b).sum();
    let sum_p: f64 = p_star.iter().sum();
    -loss - ridge + theta_objective(theta, sum_p, beta.len(), a0, a1)
}

/// `ln pi(beta, theta | D)` up to a constant, with indicators summed out.
pub fn log_posterior(
    loss: f64,
    beta: &[f64],
    theta: f64,
    cfg_nu0: f64,
    cfg_nu1: f64,
    a0: f64,
    a1: f64,
) -> f64 {
    let prior: f64 = beta
        .iter()
        .map(|&b| {
            let l0 = (1.0 - theta).ln() + log_normal0(b, cfg_nu0);
            let l1 = theta.ln() + log_normal0(b, cfg_nu1);
            let m = l0.max(l1);
            m + ((l0 - m).exp() + (l1 - m).exp()).ln()
        })
        .sum();
    -loss + prior + (a0 - 1.0) * theta.ln() + (a1 - 1.0) * (1.0 - theta).ln()
}

/// Maximizes `log-likelihood - 1/2 sum d*_j beta_j^2` starting from `inner_cfg.init`.
pub fn m_step_beta(
    d_star: &[f64],
    data: &Dataset,
    design: &Design,
    inner_cfg: &FreqConfig,
) -> Result<FitResult> {
    inner_cfg.validate()?;
    let init = inner_cfg.init.materialize(design.dim())?;
    minimize_penalized(
        data,
        design,
        &Penalty::Diagonal(d_star.to_vec()),
        init,
        &inner_cfg.lbfgs(),
    )
}

/// Two-component mixture over the entries of a frequentist estimate, mapped
/// to `(nu0, nu1, theta_init)`; falls back to the defaults when degenerate.
pub fn init_from_mixture(beta_hat: &[f64]) -> MixtureInit {
    let fallback = |reason: String| MixtureInit {
        nu0: DEFAULT_NU0,
        nu1: DEFAULT_NU1,
        theta_init: DEFAULT_THETA,
        source: MixtureSource::Defaults { reason },
    };
    match GaussianMixture2::fit(beta_hat, 1e-8, 10_000) {
        Ok(m) => {
            let (spike, slab) = if m.variances[0] <= m.variances[1] {
                (0, 1)
            } else {
                (1, 0)
            };
            if !(m.variances[spike] < m.variances[slab]) {
                return fallback("components have equal variance".into());
            }
            MixtureInit {
                nu0: m.variances[spike],
                nu1: m.variances[slab],
                theta_init: m.weights[slab],
                source: MixtureSource::Fitted(m),
            }
        }
        Err(e) => fallback(e.to_string()),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct Run {
    state: EmvsState,
    converged: bool,
    trace: Vec<EmTraceRow>,
    clamp_events: usize,
    loss: f64,
}

fn em_run(
    data: &Dataset,
    design: &Design,
    cfg: &EmvsConfig,
    objective: &Objective<'_>,
    beta0: Vec<f64>,
    theta0: f64,
) -> Result<Run> {
    let (nu0, nu1, a0, a1) = (cfg.nu0, cfg.nu1, cfg.a0, cfg.a1);
    let n_arms = design.grams.n_arms();
    let mut beta = beta0;
    let mut theta = theta0;
    let mut loss = objective.evaluate(&beta, &Penalty::None, false)?.value;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut clamp_events = 0;
    let mut iterations = 0;

    for it in 1..=cfg.max_em_iters {
        let (p, d) = e_step(&beta, theta, nu0, nu1);
        let q_before = q0_value(loss, &beta, theta, &p, &d, a0, a1);
        let inner = FreqConfig {
            init: InitStrategy::Given {
                values: beta.clone(),
            },
            ..cfg.inner.clone()
        };
        let fit = m_step_beta(&d, data, design, &inner)?;
        clamp_events = fit.diagnostics.clamp_events;
        let new_beta = fit.beta.into_vec();
        let new_theta = m_step_theta(&p, a0, a1);
        loss = objective.evaluate(&new_beta, &Penalty::None, false)?.value;
        let q_after = q0_value(loss, &new_beta, new_theta, &p, &d, a0, a1);
        let delta_beta = max_abs_diff(&new_beta, &beta);
        let delta_theta = (new_theta - theta).abs();
        trace.push(EmTraceRow {
            iteration: it,
            theta: new_theta,
            sum_p_star: p.iter().sum(),
            q0_before: q_before,
            q0: q_after,
            max_abs_delta_beta: delta_beta,
            inner_iterations: fit.iterations,
            log_posterior: log_posterior(loss, &new_beta, new_theta, nu0, nu1, a0, a1),
        });
        beta = new_beta;
        theta = new_theta;
        iterations = it;
        if delta_beta < cfg.tol_param && delta_theta < cfg.tol_param {
            converged = true;
            break;
        }
    }

    let (p, d) = e_step(&beta, theta, nu0, nu1);
    let q0 = q0_value(loss, &beta, theta, &p, &d, a0, a1);
    Ok(Run {
        state: EmvsState {
            beta: WeightVector::from_stacked(beta, n_arms)?,
            theta,
            p_star: p,
            d_star: d,
            iterations,
            q0,
        },
        converged,
        trace,
        clamp_events,
        loss,
    })
}

/// EM variable selection. With `EmvsInit::Mixture` the frequentist fit is
/// run first (using `cfg.inner`) and supplies both the hyperparameters and the
/// starting point.
pub fn fit_emvs(data: &Dataset, design: &Design, cfg: &EmvsConfig) -> Result<EmvsFit> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let (beta0, mixture) = match cfg.init {
        EmvsInit::Zero => (cfg.inner.init.materialize(design.dim())?, None),
        EmvsInit::Mixture => {
            let freq = fit_frequentist(data, design, &cfg.inner)?;
            let mix = init_from_mixture(freq.beta.as_slice());
            cfg.nu0 = mix.nu0;
            cfg.nu1 = mix.nu1;
            cfg.theta_init = mix.theta_init.clamp(THETA_FLOOR, 1.0 - THETA_FLOOR);
            (freq.beta.into_vec(), Some(mix))
        }
    };

    let objective = Objective::new(data, &design.grams)?;
    let mut best = em_run(data, design, &cfg, &objective, beta0, cfg.theta_init)?;
    let score = |r: &Run| {
        log_posterior(
            r.loss,
            r.state.beta.as_slice(),
            r.state.theta,
            cfg.nu0,
            cfg.nu1,
            cfg.a0,
            cfg.a1,
        )
    };
    let mut best_score = score(&best);
    for r in 0..cfg.restarts {
        let start = InitStrategy::RandomNormal {
            scale: cfg.nu0.sqrt(),
            seed: cfg.restart_seed.wrapping_add(r as u64),
        }
        .materialize(design.dim())?;
        let run = em_run(data, design, &cfg, &objective, start, cfg.theta_init)?;
        let s = score(&run);
        if s > best_score {
            best = run;
            best_score = s;
        }
    }

    let selection: Vec<bool> = best.state.p_star.iter().map(|&p| p >= 0.5).collect();
    let sparse: Vec<f64> = best
        .state
        .beta
        .as_slice()
        .iter()
        .zip(&selection)
        .map(|(&b, &keep)| if keep { b } else { 0.0 })
        .collect();
    Ok(EmvsFit {
        sparsified: WeightVector::from_stacked(sparse, best.state.beta.n_arms())?,
        selection,
        converged: best.converged,
        trace: best.trace,
        nu0: cfg.nu0,
        nu1: cfg.nu1,
        theta_init: cfg.theta_init,
        mixture,
        log_posterior: best_score,
        clamp_events: best.clamp_events,
        state: best.state,
    })
}

pub fn write_em_trace_csv<W: std::io::Write>(trace: &[EmTraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "iteration",
        "theta",
        "sum_p_star",
        "q0_before",
        "q0",
        "max_abs_delta_beta",
        "inner_iterations",
        "log_posterior",
    ])?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.theta.to_string(),
            r.sum_p_star.to_string(),
            r.q0_before.to_string(),
            r.q0.to_string(),
            r.max_abs_delta_beta.to_string(),
            r.inner_iterations.to_string(),
            r.log_posterior.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
