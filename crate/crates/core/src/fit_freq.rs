//! Ridge-penalized maximum likelihood for the representer weights.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{gram, GramSet, KernelSpec, RateFunction, Standardization, WeightVector};
use crate::likelihood::{Objective, Penalty};
use crate::optim::{minimize, Evaluation, LbfgsConfig, TraceRow};
use crate::rng::{substream, Purpose};

/// Kernel choice plus everything derived from the training covariates.
#[derive(Clone, Debug)]
pub struct Design {
    pub kernel: KernelSpec,
    pub standardization: Option<Standardization>,
    pub grams: GramSet,
}

impl Design {
    pub fn new(data: &Dataset, kernel: &KernelSpec, standardize: bool) -> Result<Self> {
        kernel.validate(data.topology())?;
        let raw = data.covariates();
        let standardization = standardize.then(|| Standardization::fit(&raw));
        let basis: Vec<Vec<f64>> = match &standardization {
            Some(s) => raw.iter().map(|z| s.apply(z)).collect(),
            None => raw,
        };
        let grams = gram(kernel, &basis)?;
        Ok(Design {
            kernel: kernel.clone(),
            standardization,
            grams,
        })
    }

    pub fn dim(&self) -> usize {
        self.grams.len() * self.grams.n_arms()
    }

    /// The fitted log-rate functions for weights `beta`.
    pub fn rate_function(&self, data: &Dataset, beta: &WeightVector) -> Result<RateFunction> {
        RateFunction::kernelized(
            data.topology().clone(),
            &self.kernel,
            data.covariates(),
            self.standardization.clone(),
            beta,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    Zero,
    Given { values: Vec<f64> },
    RandomNormal { scale: f64, seed: u64 },
}

impl InitStrategy {
    pub fn materialize(&self, dim: usize) -> Result<Vec<f64>> {
        match self {
            InitStrategy::Zero => Ok(vec![0.0; dim]),
            InitStrategy::Given { values } if values.len() == dim => Ok(values.clone()),
            InitStrategy::Given { values } => Err(Error::DimensionMismatch {
                expected: dim,
                got: values.len(),
            }),
            InitStrategy::RandomNormal { scale, seed } => {
                let mut rng = substream(*seed, Purpose::Init, 0);
                Ok((0..dim)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        scale * x
                    })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreqConfig {
    /// Ridge weight; `None` means `0.1 / L`.
    pub lambda: Option<f64>,
    pub max_iters: usize,
    /// Relative to `max(1, |loss|)`.
    pub grad_tol: f64,
    pub memory: usize,
    pub init: InitStrategy,
}

impl Default for FreqConfig {
    fn default() -> Self {
        FreqConfig {
            lambda: None,
            max_iters: 500,
            grad_tol: 1e-5,
            memory: 10,
            init: InitStrategy::Zero,
        }
    }
}

impl FreqConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "lambda must be >= 0, got {l}"
                )));
            }
        }
        self.lbfgs().validate()
    }

    pub fn lambda_for(&self, n_trajectories: usize) -> f64 {
        self.lambda.unwrap_or(0.1 / n_trajectories as f64)
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            relative_tol: true,
            memory: self.memory,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub initial_loss: f64,
    pub clamp_events: usize,
    pub line_search_failures: usize,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub beta: WeightVector,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub grad_tol: f64,
    pub diagnostics: FitDiagnostics,
    pub trace: Vec<TraceRow>,
}

/// Minimizes `loss + penalty` from `init` with L-BFGS.
pub fn minimize_penalized(
    data: &Dataset,
    design: &Design,
    penalty: &Penalty,
    init: Vec<f64>,
    lbfgs: &LbfgsConfig,
) -> Result<FitResult> {
    let objective = Objective::new(data, &design.grams)?;
    let n_arms = design.grams.n_arms();
    if n_arms == 0 {
        return Err(Error::InvalidConfig(
            "topology has no nonparametric arm to fit".into(),
        ));
    }
    let eval = |x: &[f64]| {
        let lv = objective.evaluate(x, penalty, true)?;
        Ok(Evaluation {
            value: lv.value,
            gradient: lv.gradient.expect("gradient requested"),
            clamp_events: lv.clamp_events,
        })
    };
    let min = minimize(eval, init, lbfgs)?;
    Ok(FitResult {
        beta: WeightVector::from_stacked(min.x, n_arms)?,
        final_loss: min.value,
        iterations: min.iterations,
        converged: min.converged,
        grad_norm: min.grad_norm,
        grad_tol: min.grad_tol,
        diagnostics: FitDiagnostics {
            initial_loss: min.trace[0].loss,
            clamp_events: min.clamp_events,
            line_search_failures: min.line_search_failures,
            evaluations: min.evaluations,
        },
        trace: min.trace,
    })
}

/// Point estimate of the weights under a ridge penalty.
pub fn fit_frequentist(data: &Dataset, design: &Design, cfg: &FreqConfig) -> Result<FitResult> {
    cfg.validate()?;
    let init = cfg.init.materialize(design.dim())?;
    let penalty = Penalty::Ridge(cfg.lambda_for(data.len()));
    minimize_penalized(data, design, &penalty, init, &cfg.lbfgs())
}

pub fn write_trace_csv<W: std::io::Write>(trace: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "loss", "grad_norm"])?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            row.loss.to_string(),
            row.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
