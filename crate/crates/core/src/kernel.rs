//! Scalar kernels, Gram matrices and kernel-expansion log-rate functions.
//!
//! The matrix-valued kernel is block diagonal: each nonparametric arm has
//! its own scalar kernel, and its log-rate is
//! `lngen(arm, z) = sum_l k_arm(z, z_l) * beta_l^(arm)` over the training
//! covariates `z_1..z_L`.

use std::str::FromStr;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{Arm, ArmKind, ChainTopology, GeneratorMatrix, Polynomial};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScalarKernel {
    /// `exp(-|z - z'|^2 / (2 bandwidth^2))`
    Rbf { bandwidth: f64 },
    /// `(<z, z'> + offset)^degree`
    Polynomial { degree: u32, offset: f64 },
    /// `<z, z'>`
    Linear,
}

impl Default for ScalarKernel {
    fn default() -> Self {
        ScalarKernel::Rbf { bandwidth: 1.0 }
    }
}

impl ScalarKernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarKernel::Rbf { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                Error::InvalidConfig(format!("RBF bandwidth must be positive, got {bandwidth}")),
            ),
            ScalarKernel::Polynomial { degree: 0, .. } => Err(Error::InvalidConfig(
                "polynomial kernel degree must be at least 1".into(),
            )),
            ScalarKernel::Polynomial { offset, .. } if !offset.is_finite() => Err(
                Error::InvalidConfig("polynomial kernel offset must be finite".into()),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            ScalarKernel::Rbf { bandwidth } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-0.5 * d2 / (bandwidth * bandwidth)).exp()
            }
            ScalarKernel::Polynomial { degree, offset } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (dot + offset).powi(degree as i32)
            }
            ScalarKernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }
}

impl FromStr for ScalarKernel {
    type Err = Error;

    /// `rbf[:SIGMA]`, `linear`, `poly:DEGREE[:OFFSET]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number '{p}' in kernel '{s}'")))
        };
        let k = match parts.as_slice() {
            ["rbf"] => ScalarKernel::Rbf { bandwidth: 1.0 },
            ["rbf", sigma] => ScalarKernel::Rbf {
                bandwidth: num(sigma)?,
            },
            ["linear"] => ScalarKernel::Linear,
            ["poly", deg] | ["poly", deg, _] => {
                let degree = deg
                    .parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad degree '{deg}' in kernel '{s}'")))?;
                let offset = if parts.len() == 3 {
                    num(parts[2])?
                } else {
                    1.0
                };
                ScalarKernel::Polynomial { degree, offset }
            }
            _ => return Err(Error::Format(format!("unknown kernel '{s}'"))),
        };
        k.validate()?;
        Ok(k)
    }
}

/// One scalar kernel per nonparametric arm, in topology order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernels: Vec<ScalarKernel>,
}

impl KernelSpec {
    pub fn uniform(kernel: ScalarKernel, topology: &ChainTopology) -> Self {
        KernelSpec {
            kernels: vec![kernel; topology.n_nonparametric()],
        }
    }

    pub fn validate(&self, topology: &ChainTopology) -> Result<()> {
        if self.kernels.len() != topology.n_nonparametric() {
            return Err(Error::InvalidConfig(format!(
                "kernel spec has {} entries for {} nonparametric arms",
                self.kernels.len(),
                topology.n_nonparametric()
            )));
        }
        self.kernels.iter().try_for_each(ScalarKernel::validate)
    }
}

/// Per-coordinate affine map `z -> (z - mean) / scale` applied before kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and (population) standard deviations; constant columns get scale 1.
    pub fn fit(covariates: &[Vec<f64>]) -> Self {
        let d = covariates.first().map_or(0, Vec::len);
        let n = covariates.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| covariates.iter().map(|z| z[j]).sum::<f64>() / n)
            .collect();
        let scale = (0..d)
            .map(|j| {
                let var = covariates
                    .iter()
                    .map(|z| (z[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, scale }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Gram matrices `K[l][m] = k_arm(z_l, z_m)`, one per nonparametric arm.
#[derive(Clone, Debug)]
pub struct GramSet {
    pub covariates: Vec<Vec<f64>>,
    pub matrices: Vec<Array2<f64>>,
}

impl GramSet {
    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn n_arms(&self) -> usize {
        self.matrices.len()
    }
}

fn check_dims(covariates: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = covariates.first() else {
        return Err(Error::InvalidConfig(
            "at least one covariate is required".into(),
        ));
    };
    let d = first.len();
    for z in covariates {
        if z.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: z.len(),
            });
        }
    }
    Ok(d)
}

/// Builds one Gram matrix per kernel over `covariates` (already standardized
/// if standardization is in use).
pub fn gram(spec: &KernelSpec, covariates: &[Vec<f64>]) -> Result<GramSet> {
    check_dims(covariates)?;
    spec.kernels.iter().try_for_each(ScalarKernel::validate)?;
    let n = covariates.len();
    let matrices = spec
        .kernels
        .iter()
        .map(|kernel| {
            let mut k = Array2::<f64>::zeros((n, n));
            k.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(l, mut row)| {
                    for (m, v) in row.iter_mut().enumerate() {
                        *v = kernel.eval(&covariates[l], &covariates[m]);
                    }
                });
            k
        })
        .collect();
    Ok(GramSet {
        covariates: covariates.to_vec(),
        matrices,
    })
}

/// Stacked representer weights: entry `l * n_arms + a` belongs to training
/// point `l` and nonparametric arm `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    n_arms: usize,
}

impl WeightVector {
    pub fn zeros(n_points: usize, n_arms: usize) -> Self {
        WeightVector {
            values: vec![0.0; n_points * n_arms],
            n_arms,
        }
    }

    pub fn from_stacked(values: Vec<f64>, n_arms: usize) -> Result<Self> {
        if n_arms == 0 || !values.len().is_multiple_of(n_arms) {
            return Err(Error::InvalidConfig(format!(
                "weight vector of length {} does not split into {n_arms} arms",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "weight vector has non-finite entries".into(),
            ));
        }
        Ok(WeightVector { values, n_arms })
    }

    /// Interleaves per-arm blocks (each of length `L`) into the stacked layout.
    pub fn from_arm_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let n_arms = blocks.len();
        let n = blocks.first().map_or(0, Vec::len);
        if blocks.iter().any(|b| b.len() != n) {
            return Err(Error::InvalidConfig("arm blocks differ in length".into()));
        }
        let mut values = vec![0.0; n * n_arms];
        for (a, block) in blocks.iter().enumerate() {
            for (l, &v) in block.iter().enumerate() {
                values[l * n_arms + a] = v;
            }
        }
        WeightVector::from_stacked(values, n_arms)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn n_points(&self) -> usize {
        self.values.len() / self.n_arms
    }

    pub fn get(&self, point: usize, arm: usize) -> f64 {
        self.values[point * self.n_arms + arm]
    }

    pub fn arm_block(&self, arm: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(arm)
            .step_by(self.n_arms)
            .copied()
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Log-rate model of a single arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ArmFunction {
    Polynomial(Polynomial),
    Kernel {
        kernel: ScalarKernel,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArmEntry {
    from: usize,
    to: usize,
    model: ArmFunction,
}

const FORMAT_TAG: &str = "ctmc-rkhs/rate-function";

#[derive(Serialize, Deserialize)]
struct RateFunctionRepr {
    format: String,
    version: u32,
    topology: ChainTopology,
    #[serde(default)]
    standardization: Option<Standardization>,
    #[serde(default)]
    training_covariates: Option<Vec<Vec<f64>>>,
    arms: Vec<ArmEntry>,
}

/// Covariate-dependent rates `q(arm, z) = exp(lngen(arm, z))` for every arm of
/// a topology. Either fully parametric (polynomial log-rates, e.g. a
/// generative truth) or a kernel expansion over training covariates with
/// optional fixed polynomial arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateFunctionRepr", into = "RateFunctionRepr")]
pub struct RateFunction {
    topology: ChainTopology,
    arms: Vec<ArmFunction>,
    standardization: Option<Standardization>,
    training: Option<Vec<Vec<f64>>>,
    /// Training covariates after standardization; derived.
    basis: Vec<Vec<f64>>,
}

impl From<RateFunction> for RateFunctionRepr {
    fn from(rf: RateFunction) -> Self {
        let arms = rf
            .topology
            .arms()
            .iter()
            .zip(rf.arms)
            .map(|(spec, model)| ArmEntry {
                from: spec.from,
                to: spec.to,
                model,
            })
            .collect();
        RateFunctionRepr {
            format: FORMAT_TAG.into(),
            version: 1,
            topology: rf.topology,
            standardization: rf.standardization,
            training_covariates: rf.training,
            arms,
        }
    }
}

impl TryFrom<RateFunctionRepr> for RateFunction {
    type Error = Error;

    fn try_from(r: RateFunctionRepr) -> Result<Self> {
        if r.format != FORMAT_TAG {
            return Err(Error::Format(format!(
                "expected format '{FORMAT_TAG}', got '{}'",
                r.format
            )));
        }
        if r.arms.len() != r.topology.n_arms() {
            return Err(Error::Format("arm list does not match topology".into()));
        }
        for (entry, spec) in r.arms.iter().zip(r.topology.arms()) {
            if entry.from != spec.from || entry.to != spec.to {
                return Err(Error::Format(format!(
                    "arm {}->{} listed out of topology order",
                    entry.from, entry.to
                )));
            }
        }
        let arms = r.arms.into_iter().map(|e| e.model).collect();
        RateFunction::assemble(r.topology, arms, r.training_covariates, r.standardization)
    }
}

impl RateFunction {
    fn assemble(
        topology: ChainTopology,
        arms: Vec<ArmFunction>,
        training: Option<Vec<Vec<f64>>>,
        standardization: Option<Standardization>,
    ) -> Result<Self> {
        let has_kernel = arms.iter().any(|a| matches!(a, ArmFunction::Kernel { .. }));
        let basis = match (&training, has_kernel) {
            (Some(cov), _) => {
                let d = check_dims(cov)?;
                if let Some(s) = &standardization {
                    if s.mean.len() != d || s.scale.len() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: s.mean.len(),
                        });
                    }
                }
                match &standardization {
                    Some(s) => cov.iter().map(|z| s.apply(z)).collect(),
                    None => cov.clone(),
                }
            }
            (None, true) => {
                return Err(Error::Format("kernel arms need training covariates".into()));
            }
            (None, false) => Vec::new(),
        };
        for (spec, model) in topology.arms().iter().zip(&arms) {
            if let ArmFunction::Kernel { kernel, weights } = model {
                kernel.validate()?;
                if weights.len() != basis.len() {
                    return Err(Error::Format(format!(
                        "arm {} has {} weights for {} training points",
                        spec.arm(),
                        weights.len(),
                        basis.len()
                    )));
                }
                if weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Format(format!(
                        "arm {} has non-finite weights",
                        spec.arm()
                    )));
                }
            }
        }
        Ok(RateFunction {
            topology,
            arms,
            standardization,
            training,
            basis,
        })
    }

    /// Polynomial log-rates, one per topology arm.
    pub fn parametric(topology: ChainTopology, polys: Vec<Polynomial>) -> Result<Self> {
        if polys.len() != topology.n_arms() {
            return Err(Error::InvalidConfig(format!(
                "{} polynomials for {} arms",
                polys.len(),
                topology.n_arms()
            )));
        }
        let arms = polys.into_iter().map(ArmFunction::Polynomial).collect();
        RateFunction::assemble(topology, arms, None, None)
    }

    /// Kernel expansion over `covariates` (raw scale). Fixed-parametric arms of
    /// the topology keep their polynomial.
    pub fn kernelized(
        topology: ChainTopology,
        spec: &KernelSpec,
        covariates: Vec<Vec<f64>>,
        standardization: Option<Standardization>,
        weights: &WeightVector,
    ) -> Result<Self> {
        spec.validate(&topology)?;
        if weights.n_arms() != topology.n_nonparametric() || weights.n_points() != covariates.len()
        {
            return Err(Error::InvalidConfig(format!(
                "weight vector shape {}x{} does not match {} points x {} arms",
                weights.n_points(),
                weights.n_arms(),
                covariates.len(),
                topology.n_nonparametric()
            )));
        }
        let arms = topology
            .arms()
            .iter()
            .enumerate()
            .map(|(i, a)| match &a.kind {
                ArmKind::FixedParametric(p) => ArmFunction::Polynomial(p.clone()),
                ArmKind::Nonparametric => {
                    let pos = topology
                        .nonparametric_position(i)
                        .expect("nonparametric arm");
                    ArmFunction::Kernel {
                        kernel: spec.kernels[pos],
                        weights: weights.arm_block(pos),
                    }
                }
            })
            .collect();
        RateFunction::assemble(topology, arms, Some(covariates), standardization)
    }

    pub fn topology(&self) -> &ChainTopology {
        &self.topology
    }

    pub fn arm_functions(&self) -> &[ArmFunction] {
        &self.arms
    }

    pub fn training_covariates(&self) -> Option<&[Vec<f64>]> {
        self.training.as_deref()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Covariate dimension, when it is pinned by training data.
    pub fn dim(&self) -> Option<usize> {
        self.training.as_ref().and_then(|t| t.first()).map(Vec::len)
    }

    /// Stacked weights of the kernel arms, in topology order.
    pub fn weight_vector(&self) -> Option<WeightVector> {
        let blocks: Vec<Vec<f64>> = self
            .arms
            .iter()
            .filter_map(|a| match a {
                ArmFunction::Kernel { weights, .. } => Some(weights.clone()),
                ArmFunction::Polynomial(_) => None,
            })
            .collect();
        if blocks.is_empty() {
            None
        } else {
            WeightVector::from_arm_blocks(&blocks).ok()
        }
    }

    /// Log-rate of arm `index` (topology order) at `z`.
    pub fn lngen_at(&self, index: usize, z: &[f64]) -> f64 {
        match &self.arms[index] {
            ArmFunction::Polynomial(p) => p.eval(z),
            ArmFunction::Kernel { kernel, weights } => {
                let scaled;
                let zs = match &self.standardization {
                    Some(s) => {
                        scaled = s.apply(z);
                        &scaled[..]
                    }
                    None => z,
                };
                self.basis
                    .iter()
                    .zip(weights)
                    .map(|(zl, w)| kernel.eval(zs, zl) * w)
                    .sum()
            }
        }
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if let Some(d) = self.dim() {
            if z.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: z.len(),
                });
            }
        }
        Ok(())
    }

    /// `lngen(arm, z)`.
    pub fn eval_lngen(&self, arm: Arm, z: &[f64]) -> Result<f64> {
        let idx = self.topology.arm_index(arm).ok_or(Error::UnknownArm(arm))?;
        self.check_z(z)?;
        Ok(self.lngen_at(idx, z))
    }

    /// `q(arm, z) = exp(lngen(arm, z))`.
    pub fn eval_rate(&self, arm: Arm, z: &[f64]) -> Result<f64> {
        self.eval_lngen(arm, z).map(f64::exp)
    }

    /// Rates of every arm at `z`, in topology order.
    pub fn arm_rates(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        (0..self.arms.len())
            .map(|i| {
                let q = self.lngen_at(i, z).exp();
                if q.is_finite() {
                    Ok(q)
                } else {
                    Err(Error::NonFiniteRate {
                        arm: self.topology.arms()[i].arm(),
                    })
                }
            })
            .collect()
    }

    /// Generator matrix at `z`.
    pub fn eval_rates(&self, z: &[f64]) -> Result<GeneratorMatrix> {
        self.check_z(z)?;
        let rates = (0..self.arms.len())
            .map(|i| {
                let lngen = self.lngen_at(i, z);
                let q = lngen.exp();
                if q.is_finite() {
                    Ok(q)
                } else {
                    Err(Error::OverflowingRate {
                        arm: self.topology.arms()[i].arm(),
                        lngen,
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        GeneratorMatrix::from_arm_rates(&self.topology, &rates)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
