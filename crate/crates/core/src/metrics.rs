//! Recovery metrics: mean squared error of log-rate functions and the
//! absorption-probability distance between a true and a fitted chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{simulate_with_rng, Arm, ArmSpec, CensoringModel, ChainTopology, CovariateLaw};
use crate::error::{Error, Result};
use crate::kernel::RateFunction;
use crate::rng::{substream, Purpose};

use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalSet {
    Sample { count: usize },
    Grid { lo: f64, hi: f64, count: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMse {
    pub arm: Arm,
    pub mse: f64,
    /// MSE divided by the variance of the true log-rate over the evaluation
    /// set; absent when that variance is zero.
    pub normalized_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub arms: Vec<ArmMse>,
    pub eval_set: EvalSet,
}

impl MseReport {
    pub fn mean_mse(&self) -> f64 {
        self.arms.iter().map(|a| a.mse).sum::<f64>() / self.arms.len() as f64
    }

    pub fn get(&self, arm: Arm) -> Option<&ArmMse> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

/// `count` evenly spaced scalar points on `[lo, hi]`.
pub fn grid_points(lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    match count {
        0 => Vec::new(),
        1 => vec![vec![lo]],
        _ => (0..count)
            .map(|i| vec![lo + (hi - lo) * i as f64 / (count - 1) as f64])
            .collect(),
    }
}

fn nonparametric_arms(t: &ChainTopology) -> Vec<Arm> {
    let mut arms: Vec<Arm> = t
        .nonparametric_arms()
        .iter()
        .map(|&i| t.arms()[i].arm())
        .collect();
    arms.sort();
    arms
}

/// Per-arm MSE of `est_fn` against `true_fn` on the nonparametric arms,
/// which must be the same set for both functions.
pub fn mse_lngen(
    true_fn: &RateFunction,
    est_fn: &RateFunction,
    eval_points: &[Vec<f64>],
    eval_set: EvalSet,
) -> Result<MseReport> {
    if eval_points.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let arms = nonparametric_arms(est_fn.topology());
    if arms != nonparametric_arms(true_fn.topology()) {
        return Err(Error::ArmMismatch);
    }
    let m = eval_points.len() as f64;
    let arms = est_fn
        .topology()
        .nonparametric_arms()
        .iter()
        .map(|&i| {
            let arm = est_fn.topology().arms()[i].arm();
            let mut truth = Vec::with_capacity(eval_points.len());
            let mut sq = 0.0;
            for z in eval_points {
                let t = true_fn.eval_lngen(arm, z)?;
                let e = est_fn.eval_lngen(arm, z)?;
                sq += (t - e) * (t - e);
                truth.push(t);
            }
            let mse = sq / m;
            let mean = truth.iter().sum::<f64>() / m;
            let var = truth.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / m;
            Ok(ArmMse {
                arm,
                mse,
                normalized_mse: (var > 0.0).then(|| mse / var),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MseReport { arms, eval_set })
}

/// Where the Monte Carlo legs draw covariates from.
#[derive(Clone, Debug, PartialEq)]
pub enum CovariateSource {
    /// Uniform resampling of observed covariates.
    Observed(Vec<Vec<f64>>),
    Law(CovariateLaw),
}

impl CovariateSource {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateSource::Observed(zs) => zs[rng.random_range(0..zs.len())].clone(),
            CovariateSource::Law(law) => law.sample(rng),
        }
    }
}

/// How the two Monte Carlo legs share path randomness. Covariate draws are
/// always shared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathCoupling {
    #[default]
    Independent,
    /// Both legs replay the same random stream for simulation `k`.
    Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Absorbed {
        state: usize,
    },
    /// Censored before reaching an absorbing state.
    Censored,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Absorbed { state } => write!(f, "state {state}"),
            Outcome::Censored => write!(f, "censored"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub outcome: Outcome,
    pub count_true: usize,
    pub count_est: usize,
    pub p_true: f64,
    pub p_est: f64,
    pub abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub rows: Vec<OutcomeRow>,
    pub n_sims: usize,
    pub seed: u64,
    pub coupling: PathCoupling,
}

impl AbsorptionReport {
    pub fn get(&self, outcome: Outcome) -> Option<&OutcomeRow> {
        self.rows.iter().find(|r| r.outcome == outcome)
    }

    /// Largest difference over the absorbing states.
    pub fn max_absorbing_diff(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| matches!(r.outcome, Outcome::Absorbed { .. }))
            .map(|r| r.abs_diff)
            .fold(0.0, f64::max)
    }
}

fn same_arms(a: &ChainTopology, b: &ChainTopology) -> bool {
    a.n_states() == b.n_states()
        && a.arms()
            .iter()
            .map(ArmSpec::arm)
            .eq(b.arms().iter().map(ArmSpec::arm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbsorptionSettings {
    pub censoring: CensoringModel,
    pub n_sims: usize,
    pub seed: u64,
    pub coupling: PathCoupling,
    pub initial_state: usize,
}

impl Default for AbsorptionSettings {
    fn default() -> Self {
        AbsorptionSettings {
            censoring: CensoringModel::default(),
            n_sims: 1000,
            seed: 0,
            coupling: PathCoupling::Independent,
            initial_state: 1,
        }
    }
}

/// Monte Carlo terminal-outcome probabilities under both functions.
pub fn absorption_distance(
    topology: &ChainTopology,
    true_fn: &RateFunction,
    est_fn: &RateFunction,
    covariates: &CovariateSource,
    settings: &AbsorptionSettings,
) -> Result<AbsorptionReport> {
    if settings.n_sims == 0 {
        return Err(Error::InvalidConfig("n_sims must be at least 1".into()));
    }
    if !same_arms(topology, true_fn.topology()) || !same_arms(topology, est_fn.topology()) {
        return Err(Error::ArmMismatch);
    }
    match covariates {
        CovariateSource::Observed(zs) if zs.is_empty() => {
            return Err(Error::InvalidConfig("no covariates to resample".into()));
        }
        CovariateSource::Law(law) => law.validate()?,
        _ => {}
    }
    settings.censoring.validate()?;

    let outcome_of = |t: &crate::chain::Trajectory| {
        if t.censored {
            Outcome::Censored
        } else {
            Outcome::Absorbed {
                state: t.final_state(),
            }
        }
    };
    let seed = settings.seed;
    let pairs: Vec<(Outcome, Outcome)> = (0..settings.n_sims)
        .into_par_iter()
        .map(|k| {
            let k = k as u64;
            let z = covariates.draw(&mut substream(seed, Purpose::Covariate, k));
            let mut rng_true = substream(seed, Purpose::Path, k);
            let mut rng_est = match settings.coupling {
                PathCoupling::Independent => substream(seed, Purpose::PathAlternate, k),
                PathCoupling::Common => substream(seed, Purpose::Path, k),
            };
            let a = simulate_with_rng(
                topology,
                true_fn,
                &z,
                &settings.censoring,
                settings.initial_state,
                &mut rng_true,
            )?;
            let b = simulate_with_rng(
                topology,
                est_fn,
                &z,
                &settings.censoring,
                settings.initial_state,
                &mut rng_est,
            )?;
            Ok((outcome_of(&a), outcome_of(&b)))
        })
        .collect::<Result<_>>()?;

    let mut outcomes: Vec<Outcome> = topology
        .absorbing_states()
        .into_iter()
        .map(|state| Outcome::Absorbed { state })
        .collect();
    outcomes.push(Outcome::Censored);
    let n = settings.n_sims as f64;
    let rows = outcomes
        .into_iter()
        .map(|o| {
            let count_true = pairs.iter().filter(|p| p.0 == o).count();
            let count_est = pairs.iter().filter(|p| p.1 == o).count();
            let p_true = count_true as f64 / n;
            let p_est = count_est as f64 / n;
            OutcomeRow {
                outcome: o,
                count_true,
                count_est,
                p_true,
                p_est,
                abs_diff: (p_true - p_est).abs(),
            }
        })
        .collect();
    Ok(AbsorptionReport {
        rows,
        n_sims: settings.n_sims,
        seed,
        coupling: settings.coupling,
    })
}

/// Fixes every covariate except `coordinate`, which follows the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSlice {
    pub coordinate: usize,
    pub base: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub z: f64,
    pub lngen: f64,
    pub q: f64,
}

pub fn curve_export(
    rf: &RateFunction,
    arm: Arm,
    grid: (f64, f64, usize),
    slice: Option<&CurveSlice>,
) -> Result<Vec<CurveRow>> {
    let dim = rf.dim().unwrap_or(1);
    let (lo, hi, count) = grid;
    let base = match slice {
        Some(s) => {
            if s.base.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.base.len(),
                });
            }
            if s.coordinate >= dim {
                return Err(Error::InvalidConfig(format!(
                    "slice coordinate {} out of range",
                    s.coordinate
                )));
            }
            s.clone()
        }
        None if dim > 1 => return Err(Error::NeedsSliceSpec(dim)),
        None => CurveSlice {
            coordinate: 0,
            base: vec![0.0],
        },
    };
    grid_points(lo, hi, count)
        .into_iter()
        .map(|p| {
            let mut z = base.base.clone();
            z[base.coordinate] = p[0];
            let lngen = rf.eval_lngen(arm, &z)?;
            Ok(CurveRow {
                z: p[0],
                lngen,
                q: lngen.exp(),
            })
        })
        .collect()
}

pub fn write_curve_csv<W: std::io::Write>(rows: &[CurveRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["z", "lngen", "q"])?;
    for r in rows {
        w.write_record([r.z.to_string(), r.lngen.to_string(), r.q.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_absorption_csv<W: std::io::Write>(report: &AbsorptionReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "outcome",
        "p_true",
        "p_est",
        "abs_diff",
        "count_true",
        "count_est",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.outcome.to_string(),
            r.p_true.to_string(),
            r.p_est.to_string(),
            r.abs_diff.to_string(),
            r.count_true.to_string(),
            r.count_est.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mse_csv<W: std::io::Write>(report: &MseReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["arm", "mse", "normalized_mse"])?;
    for a in &report.arms {
        w.write_record([
            a.arm.to_string(),
            a.mse.to_string(),
            a.normalized_mse.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
