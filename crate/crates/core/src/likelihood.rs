//! Negative log-likelihood of censored CTMC trajectories as a function of the
//! stacked representer weights, with its analytic gradient.
//!
//! Each trajectory contributes, per holding interval in state `i` of length
//! `dt` that ends with a jump `i -> j`,
//! `|q(i,i; z)| * dt - ln q(i,j; z)`, and only `|q(i,i; z)| * dt` when the
//! interval is cut by censoring. Censoring factors `g`, `1 - G` do not depend
//! on the rates and are left out unless explicitly requested.
//!
//! Only the total exposure per state and the jump count per arm matter, so
//! they are collected once per trajectory.

use ndarray::Axis;
use rayon::prelude::*;

use crate::chain::{Arm, ArmKind, CensoringModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{GramSet, RateFunction, WeightVector};

/// Log-rates are clamped to `[-LNGEN_CLAMP, LNGEN_CLAMP]` inside the loss.
pub const LNGEN_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    /// Number of log-rate evaluations that hit the clamp.
    pub clamp_events: usize,
}

/// Quadratic penalty added to the loss.
#[derive(Clone, Debug, PartialEq)]
pub enum Penalty {
    None,
    /// `lambda * |beta|^2`
    Ridge(f64),
    /// `1/2 * sum_j d_j * beta_j^2`
    Diagonal(Vec<f64>),
}

impl Penalty {
    fn coefficient(&self, j: usize) -> f64 {
        match self {
            Penalty::None => 0.0,
            Penalty::Ridge(lambda) => *lambda,
            Penalty::Diagonal(d) => 0.5 * d[j],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Penalty::None => Ok(()),
            Penalty::Ridge(lambda) if *lambda >= 0.0 && lambda.is_finite() => Ok(()),
            Penalty::Ridge(lambda) => Err(Error::InvalidConfig(format!(
                "ridge weight must be >= 0, got {lambda}"
            ))),
            Penalty::Diagonal(d) if d.len() != n => Err(Error::InvalidConfig(format!(
                "diagonal penalty has {} entries for {n} weights",
                d.len()
            ))),
            Penalty::Diagonal(d) if d.iter().all(|v| *v >= 0.0 && v.is_finite()) => Ok(()),
            Penalty::Diagonal(_) => Err(Error::InvalidConfig(
                "diagonal penalty must be finite and >= 0".into(),
            )),
        }
    }

    /// Value of the penalty and its gradient added into `grad`.
    fn apply(&self, beta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        if matches!(self, Penalty::None) {
            return 0.0;
        }
        let value = beta
            .iter()
            .enumerate()
            .map(|(j, b)| self.coefficient(j) * b * b)
            .sum();
        if let Some(g) = grad {
            for (j, (gj, b)) in g.iter_mut().zip(beta).enumerate() {
                *gj += 2.0 * self.coefficient(j) * b;
            }
        }
        value
    }
}

#[derive(Clone, Copy, Debug)]
enum ArmSource {
    Kernel(usize),
    Fixed,
}

/// Sufficient statistics of one trajectory for one arm.
#[derive(Clone, Copy, Debug)]
struct ArmTerm {
    arm: usize,
    exposure: f64,
    jumps: f64,
}

/// Precomputed loss for a fixed dataset and Gram set.
pub struct Objective<'a> {
    grams: &'a GramSet,
    n_points: usize,
    n_kernel_arms: usize,
    sources: Vec<ArmSource>,
    terms: Vec<Vec<ArmTerm>>,
    /// Log-rates of fixed-parametric arms per trajectory (indexed by arm).
    fixed_lngen: Vec<Vec<f64>>,
    censoring_constant: f64,
}

impl<'a> Objective<'a> {
    pub fn new(data: &Dataset, grams: &'a GramSet) -> Result<Self> {
        let topology = data.topology();
        if grams.len() != data.len() {
            return Err(Error::InvalidConfig(format!(
                "Gram matrices cover {} points but the dataset has {} trajectories",
                grams.len(),
                data.len()
            )));
        }
        if grams.n_arms() != topology.n_nonparametric() {
            return Err(Error::InvalidConfig(format!(
                "{} Gram matrices for {} nonparametric arms",
                grams.n_arms(),
                topology.n_nonparametric()
            )));
        }
        let sources: Vec<ArmSource> = (0..topology.n_arms())
            .map(|i| match topology.nonparametric_position(i) {
                Some(p) => ArmSource::Kernel(p),
                None => ArmSource::Fixed,
            })
            .collect();

        let mut terms = Vec::with_capacity(data.len());
        let mut fixed_lngen = Vec::with_capacity(data.len());
        for (l, traj) in data.trajectories().iter().enumerate() {
            let mut exposure = vec![0.0; topology.n_states()];
            let mut jumps = vec![0.0; topology.n_arms()];
            for iv in traj.intervals() {
                exposure[iv.state - 1] += iv.duration;
                if let Some(next) = iv.next {
                    let arm = Arm::new(iv.state, next);
                    let idx = topology
                        .arm_index(arm)
                        .ok_or(Error::TopologyViolation { trajectory: l, arm })?;
                    jumps[idx] += 1.0;
                }
            }
            let t: Vec<ArmTerm> = topology
                .arms()
                .iter()
                .enumerate()
                .filter(|(i, spec)| exposure[spec.from - 1] > 0.0 || jumps[*i] > 0.0)
                .map(|(i, spec)| ArmTerm {
                    arm: i,
                    exposure: exposure[spec.from - 1],
                    jumps: jumps[i],
                })
                .collect();
            terms.push(t);
            fixed_lngen.push(
                topology
                    .arms()
                    .iter()
                    .map(|a| match &a.kind {
                        ArmKind::FixedParametric(p) => p.eval(&traj.covariate),
                        ArmKind::Nonparametric => 0.0,
                    })
                    .collect(),
            );
        }
        Ok(Objective {
            grams,
            n_points: data.len(),
            n_kernel_arms: topology.n_nonparametric(),
            sources,
            terms,
            fixed_lngen,
            censoring_constant: 0.0,
        })
    }

    /// Adds the censoring factors (`-ln g(t_K)` for censored trajectories,
    /// `-ln(1 - G(t_K))` otherwise) to every reported value.
    pub fn with_censoring_terms(mut self, data: &Dataset, censoring: &CensoringModel) -> Self {
        self.censoring_constant = data
            .trajectories()
            .iter()
            .map(|t| {
                let end = t.jumps.last().map_or(0.0, |j| j.time);
                if t.censored {
                    -censoring.log_density(end)
                } else {
                    -censoring.log_survival(end)
                }
            })
            .sum();
        self
    }

    pub fn dim(&self) -> usize {
        self.n_points * self.n_kernel_arms
    }

    /// Kernel-arm log-rates at the training covariates: `eta[a][l]`.
    fn linear_predictors(&self, beta: &[f64]) -> Vec<Vec<f64>> {
        let a_count = self.n_kernel_arms;
        (0..a_count)
            .map(|a| {
                let block: Vec<f64> = beta.iter().skip(a).step_by(a_count).copied().collect();
                let k = &self.grams.matrices[a];
                let mut eta = vec![0.0; self.n_points];
                eta.par_iter_mut()
                    .zip(k.axis_iter(Axis(0)).into_par_iter())
                    .for_each(|(e, row)| *e = row.iter().zip(&block).map(|(x, y)| x * y).sum());
                eta
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        beta: &[f64],
        penalty: &Penalty,
        want_gradient: bool,
    ) -> Result<LossValue> {
        if beta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: beta.len(),
            });
        }
        penalty.validate(beta.len())?;
        let eta = self.linear_predictors(beta);
        let a_count = self.n_kernel_arms;

        // per trajectory: (loss, clamp events, d loss / d eta for each kernel arm)
        let per_traj: Vec<(f64, usize, Vec<f64>)> = (0..self.n_points)
            .into_par_iter()
            .map(|l| {
                let mut loss = 0.0;
                let mut clamps = 0;
                let mut d_eta = vec![0.0; if want_gradient { a_count } else { 0 }];
                for term in &self.terms[l] {
                    let raw = match self.sources[term.arm] {
                        ArmSource::Kernel(a) => eta[a][l],
                        ArmSource::Fixed => self.fixed_lngen[l][term.arm],
                    };
                    let clamped = raw.clamp(-LNGEN_CLAMP, LNGEN_CLAMP);
                    let inside = clamped == raw;
                    if !inside {
                        clamps += 1;
                    }
                    let q = clamped.exp();
                    loss += q * term.exposure - term.jumps * clamped;
                    if want_gradient && inside {
                        if let ArmSource::Kernel(a) = self.sources[term.arm] {
                            d_eta[a] += q * term.exposure - term.jumps;
                        }
                    }
                }
                (loss, clamps, d_eta)
            })
            .collect();

        let mut value = self.censoring_constant;
        let mut clamp_events = 0;
        for (v, c, _) in &per_traj {
            value += v;
            clamp_events += c;
        }

        let mut gradient = if want_gradient {
            let mut g = vec![0.0; beta.len()];
            for a in 0..a_count {
                let d: Vec<f64> = per_traj.iter().map(|t| t.2[a]).collect();
                let k = &self.grams.matrices[a];
                // K is symmetric, so K^T d is computed row by row
                let col: Vec<f64> = k
                    .axis_iter(Axis(0))
                    .into_par_iter()
                    .map(|row| row.iter().zip(&d).map(|(x, y)| x * y).sum())
                    .collect();
                for (l, v) in col.into_iter().enumerate() {
                    g[l * a_count + a] = v;
                }
            }
            Some(g)
        } else {
            None
        };

        value += penalty.apply(beta, gradient.as_deref_mut());
        Ok(LossValue {
            value,
            gradient,
            clamp_events,
        })
    }
}

/// Negative log-likelihood with gradient (censoring constants excluded).
pub fn neg_log_lik(beta: &WeightVector, data: &Dataset, grams: &GramSet) -> Result<LossValue> {
    Objective::new(data, grams)?.evaluate(beta.as_slice(), &Penalty::None, true)
}

pub fn grad_neg_log_lik(beta: &WeightVector, data: &Dataset, grams: &GramSet) -> Result<Vec<f64>> {
    Ok(neg_log_lik(beta, data, grams)?
        .gradient
        .expect("gradient requested"))
}

/// `neg_log_lik + lambda * |beta|^2`, gradient `+ 2 lambda beta`.
pub fn penalized_loss(
    beta: &WeightVector,
    data: &Dataset,
    grams: &GramSet,
    lambda: f64,
) -> Result<LossValue> {
    Objective::new(data, grams)?.evaluate(beta.as_slice(), &Penalty::Ridge(lambda), true)
}

/// Negative log-likelihood of `data` under an arbitrary rate function,
/// summed over every arm (fixed ones included). Used to score held-out data.
pub fn rate_function_loss(rf: &RateFunction, data: &Dataset) -> Result<f64> {
    let topology = rf.topology();
    let parts: Vec<f64> = data
        .trajectories()
        .par_iter()
        .map(|t| {
            let rates = rf.arm_rates(&t.covariate)?;
            let mut total = 0.0;
            for iv in t.intervals() {
                let exit: f64 = topology.outgoing(iv.state).iter().map(|&a| rates[a]).sum();
                total += exit * iv.duration;
                if let Some(next) = iv.next {
                    let idx = topology.arm_index(Arm::new(iv.state, next)).ok_or(
                        Error::TopologyViolation {
                            trajectory: 0,
                            arm: Arm::new(iv.state, next),
                        },
                    )?;
                    total -= rates[idx].ln();
                }
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ArmSpec, ChainTopology, Jump, Trajectory};
    use crate::kernel::{gram, KernelSpec, ScalarKernel};

    fn two_arm() -> ChainTopology {
        ChainTopology::new(
            3,
            vec![ArmSpec::nonparametric(1, 2), ArmSpec::nonparametric(1, 3)],
        )
        .unwrap()
    }

    fn single(censored: bool) -> Dataset {
        let end = if censored { 1 } else { 2 };
        let t = Trajectory::new(
            vec![0.3],
            vec![
                Jump {
                    time: 0.0,
                    state: 1,
                },
                Jump {
                    time: 0.7,
                    state: end,
                },
            ],
            censored,
        );
        Dataset::new(two_arm(), vec![t]).unwrap()
    }

    fn grams_for(data: &Dataset) -> GramSet {
        gram(
            &KernelSpec::uniform(ScalarKernel::default(), data.topology()),
            &data.covariates(),
        )
        .unwrap()
    }

    #[test]
    fn single_jump_at_unit_rates() {
        let data = single(false);
        let g = grams_for(&data);
        let loss = neg_log_lik(&WeightVector::zeros(1, 2), &data, &g).unwrap();
        assert!((loss.value - 1.4).abs() < 1e-15);
        let grad = loss.gradient.unwrap();
        // d/d beta^(1,2) = (q dt - 1) k(z, z) = -0.3; the (1,3) arm never fired
        assert!((grad[0] + 0.3).abs() < 1e-15);
        assert!((grad[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn censored_interval_has_only_survival() {
        let data = single(true);
        let g = grams_for(&data);
        let loss = neg_log_lik(&WeightVector::zeros(1, 2), &data, &g).unwrap();
        assert!((loss.value - 1.4).abs() < 1e-15);
        assert!(loss.gradient.unwrap().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn ridge_penalty_arithmetic() {
        let data = single(false);
        let g = grams_for(&data);
        let beta = WeightVector::from_stacked(vec![1.0, -2.0], 2).unwrap();
        let plain = neg_log_lik(&beta, &data, &g).unwrap();
        let pen = penalized_loss(&beta, &data, &g, 1.0).unwrap();
        assert!((pen.value - plain.value - 5.0).abs() < 1e-12);
        let (gp, gn) = (pen.gradient.unwrap(), plain.gradient.clone().unwrap());
        assert!((gp[0] - gn[0] - 2.0).abs() < 1e-12);
        assert!((gp[1] - gn[1] + 4.0).abs() < 1e-12);
        assert_eq!(penalized_loss(&beta, &data, &g, 0.0).unwrap(), plain);
        let zero = WeightVector::zeros(1, 2);
        assert_eq!(
            penalized_loss(&zero, &data, &g, 3.0).unwrap().value,
            neg_log_lik(&zero, &data, &g).unwrap().value
        );
    }

    #[test]
    fn clamping_is_counted() {
        let data = single(false);
        let g = grams_for(&data);
        let beta = WeightVector::from_stacked(vec![50.0, 0.0], 2).unwrap();
        let loss = neg_log_lik(&beta, &data, &g).unwrap();
        assert_eq!(loss.clamp_events, 1);
        assert!(loss.value.is_finite());
    }

    #[test]
    fn censoring_terms_are_additive_constants() {
        let data = single(true);
        let g = grams_for(&data);
        let cens = CensoringModel::Exponential { rate: 0.5 };
        let base = Objective::new(&data, &g).unwrap();
        let with = Objective::new(&data, &g)
            .unwrap()
            .with_censoring_terms(&data, &cens);
        let beta = [0.2, -0.1];
        let a = base.evaluate(&beta, &Penalty::None, true).unwrap();
        let b = with.evaluate(&beta, &Penalty::None, true).unwrap();
        let expected = -(0.5f64.ln() - 0.5 * 0.7);
        assert!((b.value - a.value - expected).abs() < 1e-12);
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn wrong_length_rejected() {
        let data = single(false);
        let g = grams_for(&data);
        let obj = Objective::new(&data, &g).unwrap();
        assert!(obj.evaluate(&[0.0], &Penalty::None, false).is_err());
        assert!(obj
            .evaluate(&[0.0, 0.0], &Penalty::Ridge(-1.0), false)
            .is_err());
    }
}
