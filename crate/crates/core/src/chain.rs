//! Chain topology, generator matrices, trajectories and the Gillespie
//! simulator with censoring.
//!
//! States are numbered from 1, as in every on-disk format this crate reads
//! or writes. The order of `ChainTopology::arms` is the vectorization order of
//! every stacked structure (rates, weights, kernel specs).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::RateFunction;
use crate::rng::{substream, Purpose};

/// Hard stop for chains that can cycle forever without censoring.
pub const MAX_JUMPS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Arm {
    pub from: usize,
    pub to: usize,
}

impl Arm {
    pub fn new(from: usize, to: usize) -> Self {
        Arm { from, to }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

impl FromStr for Arm {
    type Err = Error;

    /// Accepts `1-2`, `1->2`, `1,2` or `12` (single-digit states).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parts: Vec<&str> = s
            .split(['-', '>', ',', ':'])
            .filter(|p| !p.is_empty())
            .collect();
        let bad = || Error::Format(format!("cannot parse arm '{s}'"));
        match parts.as_slice() {
            [a, b] => Ok(Arm::new(
                a.parse().map_err(|_| bad())?,
                b.parse().map_err(|_| bad())?,
            )),
            [ab] if ab.len() == 2 && ab.chars().all(|c| c.is_ascii_digit()) => {
                let d: Vec<usize> = ab.chars().map(|c| c as usize - '0' as usize).collect();
                Ok(Arm::new(d[0], d[1]))
            }
            _ => Err(bad()),
        }
    }
}

/// Polynomial log-rate `c0 + c1 x + c2 x^2 + ...` in one covariate coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub coordinate: usize,
}

impl Polynomial {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Polynomial {
            coefficients,
            coordinate: 0,
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let x = z.get(self.coordinate).copied().unwrap_or(0.0);
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * x + c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmKind {
    Nonparametric,
    FixedParametric(Polynomial),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub from: usize,
    pub to: usize,
    #[serde(flatten)]
    pub kind: ArmKind,
}

impl ArmSpec {
    pub fn nonparametric(from: usize, to: usize) -> Self {
        ArmSpec {
            from,
            to,
            kind: ArmKind::Nonparametric,
        }
    }

    pub fn fixed(from: usize, to: usize, poly: Polynomial) -> Self {
        ArmSpec {
            from,
            to,
            kind: ArmKind::FixedParametric(poly),
        }
    }

    pub fn arm(&self) -> Arm {
        Arm::new(self.from, self.to)
    }
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    n_states: usize,
    arms: Vec<ArmSpec>,
}

/// States `1..=n_states` and the permitted transition arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct ChainTopology {
    n_states: usize,
    arms: Vec<ArmSpec>,
    outgoing: Vec<Vec<usize>>,
    nonparametric: Vec<usize>,
}

impl TryFrom<TopologyRepr> for ChainTopology {
    type Error = Error;
    fn try_from(r: TopologyRepr) -> Result<Self> {
        ChainTopology::new(r.n_states, r.arms)
    }
}

impl From<ChainTopology> for TopologyRepr {
    fn from(t: ChainTopology) -> Self {
        TopologyRepr {
            n_states: t.n_states,
            arms: t.arms,
        }
    }
}

impl ChainTopology {
    pub fn new(n_states: usize, arms: Vec<ArmSpec>) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidTopology("need at least one state".into()));
        }
        let mut outgoing = vec![Vec::new(); n_states];
        for (idx, spec) in arms.iter().enumerate() {
            let Arm { from, to } = spec.arm();
            if from == 0 || to == 0 || from > n_states || to > n_states {
                return Err(Error::InvalidTopology(format!(
                    "arm {} references a state outside 1..={n_states}",
                    spec.arm()
                )));
            }
            if from == to {
                return Err(Error::InvalidTopology(format!("self-loop {}", spec.arm())));
            }
            if arms[..idx].iter().any(|a| a.arm() == spec.arm()) {
                return Err(Error::InvalidTopology(format!(
                    "duplicate arm {}",
                    spec.arm()
                )));
            }
            outgoing[from - 1].push(idx);
        }
        let nonparametric = arms
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a.kind, ArmKind::Nonparametric))
            .map(|(i, _)| i)
            .collect();
        Ok(ChainTopology {
            n_states,
            arms,
            outgoing,
            nonparametric,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn arms(&self) -> &[ArmSpec] {
        &self.arms
    }

    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn arm_index(&self, arm: Arm) -> Option<usize> {
        self.arms.iter().position(|a| a.arm() == arm)
    }

    /// Indices (into `arms()`) of the arms leaving `state`.
    pub fn outgoing(&self, state: usize) -> &[usize] {
        &self.outgoing[state - 1]
    }

    pub fn is_absorbing(&self, state: usize) -> bool {
        self.outgoing[state - 1].is_empty()
    }

    pub fn absorbing_states(&self) -> Vec<usize> {
        (1..=self.n_states)
            .filter(|&s| self.is_absorbing(s))
            .collect()
    }

    /// Arm indices of the nonparametric arms, in topology order.
    pub fn nonparametric_arms(&self) -> &[usize] {
        &self.nonparametric
    }

    pub fn n_nonparametric(&self) -> usize {
        self.nonparametric.len()
    }

    /// Position of an arm among the nonparametric arms.
    pub fn nonparametric_position(&self, arm_index: usize) -> Option<usize> {
        self.nonparametric.iter().position(|&i| i == arm_index)
    }

    /// Same arms, all flagged nonparametric.
    pub fn all_nonparametric(&self) -> ChainTopology {
        let arms = self
            .arms
            .iter()
            .map(|a| ArmSpec::nonparametric(a.from, a.to))
            .collect();
        ChainTopology::new(self.n_states, arms).expect("arms already validated")
    }
}

/// Dense `n × n` rate matrix with zero row sums.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorMatrix {
    n: usize,
    rates: Vec<f64>,
}

impl GeneratorMatrix {
    /// Builds the matrix from one nonnegative rate per topology arm.
    pub fn from_arm_rates(topology: &ChainTopology, arm_rates: &[f64]) -> Result<Self> {
        let n = topology.n_states();
        let mut rates = vec![0.0; n * n];
        for (spec, &q) in topology.arms().iter().zip(arm_rates) {
            if !q.is_finite() || q < 0.0 {
                return Err(Error::NonFiniteRate { arm: spec.arm() });
            }
            rates[(spec.from - 1) * n + spec.to - 1] = q;
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| rates[i * n + j]).sum();
            rates[i * n + i] = -off;
        }
        Ok(GeneratorMatrix { n, rates })
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    /// Entry `q(i, j)` with 1-based states.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rates[(i - 1) * self.n + j - 1]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rates[(i - 1) * self.n..i * self.n].iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// One observed subject: covariate, jump records starting at `(0, initial)`,
/// and whether the final record is a censoring event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub covariate: Vec<f64>,
    pub jumps: Vec<Jump>,
    pub censored: bool,
}

/// One holding interval of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub state: usize,
    pub duration: f64,
    /// Destination when the interval ends in a jump; `None` when censored.
    pub next: Option<usize>,
}

impl Trajectory {
    pub fn new(covariate: Vec<f64>, jumps: Vec<Jump>, censored: bool) -> Self {
        Trajectory {
            covariate,
            jumps,
            censored,
        }
    }

    pub fn initial_state(&self) -> usize {
        self.jumps[0].state
    }

    pub fn final_state(&self) -> usize {
        self.jumps.last().map(|j| j.state).unwrap_or(0)
    }

    pub fn intervals(&self) -> impl Iterator<Item = Interval> + '_ {
        let n = self.jumps.len();
        self.jumps.windows(2).enumerate().map(move |(k, w)| {
            let censoring = self.censored && k + 2 == n;
            Interval {
                state: w[0].state,
                duration: w[1].time - w[0].time,
                next: if censoring { None } else { Some(w[1].state) },
            }
        })
    }

    /// Checks every trajectory invariant against a topology.
    pub fn validate(&self, topology: &ChainTopology, index: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidTrajectory { index, reason });
        let Some(first) = self.jumps.first() else {
            return fail("no jump records".into());
        };
        if first.time != 0.0 {
            return fail(format!("first record at time {} instead of 0", first.time));
        }
        if self.covariate.iter().any(|v| !v.is_finite()) {
            return fail("non-finite covariate".into());
        }
        for j in &self.jumps {
            if j.state == 0 || j.state > topology.n_states() {
                return fail(format!("state {} out of range", j.state));
            }
        }
        let n = self.jumps.len();
        if self.censored && n < 2 {
            return fail("censored trajectory needs a censoring record".into());
        }
        for (k, w) in self.jumps.windows(2).enumerate() {
            if !(w[1].time > w[0].time) || !w[1].time.is_finite() {
                return fail(format!("times not strictly increasing at record {}", k + 1));
            }
            let last = k + 2 == n;
            if last && self.censored {
                if w[1].state != w[0].state {
                    return fail("censoring record must repeat the current state".into());
                }
                continue;
            }
            if w[1].state == w[0].state {
                return fail(format!(
                    "repeated state at record {} of an uncensored trajectory",
                    k + 1
                ));
            }
            let arm = Arm::new(w[0].state, w[1].state);
            if topology.arm_index(arm).is_none() {
                return Err(Error::TopologyViolation {
                    trajectory: index,
                    arm,
                });
            }
        }
        Ok(())
    }
}

mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "inf" => Ok(f64::INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!(
                "expected number or \"inf\", got {s}"
            ))),
        }
    }
}

/// Law of the censoring time `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CensoringModel {
    Exponential {
        rate: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Deterministic end of follow-up; `inf` disables censoring.
    FixedHorizon {
        #[serde(with = "serde_inf")]
        t_max: f64,
    },
}

impl Default for CensoringModel {
    fn default() -> Self {
        CensoringModel::Exponential { rate: 0.05 }
    }
}

impl CensoringModel {
    pub fn none() -> Self {
        CensoringModel::FixedHorizon {
            t_max: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CensoringModel::Exponential { rate } => rate.is_finite() && rate > 0.0,
            CensoringModel::Uniform { lo, hi } => lo >= 0.0 && hi > lo && hi.is_finite(),
            CensoringModel::FixedHorizon { t_max } => t_max > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid censoring model {self:?}"
            )))
        }
    }

    /// Density `g(t)`. The fixed horizon is a point mass and reports 0 here.
    pub fn density(&self, t: f64) -> f64 {
        match *self {
            CensoringModel::Exponential { rate } => {
                if t < 0.0 {
                    0.0
                } else {
                    rate * (-rate * t).exp()
                }
            }
            CensoringModel::Uniform { lo, hi } => {
                if (lo..=hi).contains(&t) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            CensoringModel::FixedHorizon { .. } => 0.0,
        }
    }

    /// Distribution function `G(t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        match *self {
            CensoringModel::Exponential { rate } => {
                if t <= 0.0 {
                    0.0
                } else {
                    -(-rate * t).exp_m1()
                }
            }
            CensoringModel::Uniform { lo, hi } => ((t - lo) / (hi - lo)).clamp(0.0, 1.0),
            CensoringModel::FixedHorizon { t_max } => {
                if t >= t_max {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `ln g(t)`; the fixed horizon contributes 0 (counting measure on `t_max`).
    pub fn log_density(&self, t: f64) -> f64 {
        match *self {
            CensoringModel::FixedHorizon { .. } => 0.0,
            _ => self.density(t).ln(),
        }
    }

    /// `ln(1 - G(t))`.
    pub fn log_survival(&self, t: f64) -> f64 {
        match *self {
            CensoringModel::Exponential { rate } => -rate * t.max(0.0),
            _ => (1.0 - self.cdf(t)).ln(),
        }
    }

    /// Draws a strictly positive censoring time.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let t = match *self {
                CensoringModel::Exponential { rate } => {
                    Exp::new(rate).expect("validated rate").sample(rng)
                }
                CensoringModel::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
                CensoringModel::FixedHorizon { t_max } => t_max,
            };
            if t > 0.0 {
                return t;
            }
        }
    }
}

impl FromStr for CensoringModel {
    type Err = Error;

    /// `exp:RATE`, `uniform:LO:HI`, `horizon:T` or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number '{p}' in '{s}'")))
        };
        let model = match parts.as_slice() {
            ["none"] => CensoringModel::none(),
            ["exp" | "exponential", r] => CensoringModel::Exponential { rate: num(r)? },
            ["uniform", lo, hi] => CensoringModel::Uniform {
                lo: num(lo)?,
                hi: num(hi)?,
            },
            ["horizon", t] => CensoringModel::FixedHorizon { t_max: num(t)? },
            _ => return Err(Error::Format(format!("unknown censoring model '{s}'"))),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Sampling law of the covariate vector for synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Uniform { lo: f64, hi: f64, dim: usize },
    Normal { mean: f64, sd: f64, dim: usize },
}

impl Default for CovariateLaw {
    fn default() -> Self {
        CovariateLaw::Uniform {
            lo: -1.0,
            hi: 1.0,
            dim: 1,
        }
    }
}

impl CovariateLaw {
    pub fn dim(&self) -> usize {
        match *self {
            CovariateLaw::Uniform { dim, .. } | CovariateLaw::Normal { dim, .. } => dim,
        }
    }

    pub fn with_dim(self, dim: usize) -> Self {
        match self {
            CovariateLaw::Uniform { lo, hi, .. } => CovariateLaw::Uniform { lo, hi, dim },
            CovariateLaw::Normal { mean, sd, .. } => CovariateLaw::Normal { mean, sd, dim },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CovariateLaw::Uniform { lo, hi, dim } => {
                dim >= 1 && hi > lo && lo.is_finite() && hi.is_finite()
            }
            CovariateLaw::Normal { mean, sd, dim } => {
                dim >= 1 && sd > 0.0 && mean.is_finite() && sd.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid covariate law {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            CovariateLaw::Uniform { lo, hi, dim } => (0..dim)
                .map(|_| lo + (hi - lo) * rng.random::<f64>())
                .collect(),
            CovariateLaw::Normal { mean, sd, dim } => {
                let n = rand_distr::Normal::new(mean, sd).expect("validated sd");
                (0..dim).map(|_| n.sample(rng)).collect()
            }
        }
    }
}

impl FromStr for CovariateLaw {
    type Err = Error;

    /// `uniform:LO:HI` or `normal:MEAN:SD`, dimension 1 (see `with_dim`).
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number '{p}' in '{s}'")))
        };
        let law = match parts.as_slice() {
            ["uniform", lo, hi] => CovariateLaw::Uniform {
                lo: num(lo)?,
                hi: num(hi)?,
                dim: 1,
            },
            ["normal", m, sd] => CovariateLaw::Normal {
                mean: num(m)?,
                sd: num(sd)?,
                dim: 1,
            },
            _ => return Err(Error::Format(format!("unknown covariate law '{s}'"))),
        };
        law.validate()?;
        Ok(law)
    }
}

/// Draws the holding time and destination out of `current_state`.
///
/// `rates_out` pairs each outgoing arm with its rate. Waiting time is
/// exponential with the total rate; the destination is categorical with
/// probabilities proportional to the individual rates.
pub fn waiting_time_and_jump<R: Rng + ?Sized>(
    current_state: usize,
    rates_out: &[(Arm, f64)],
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    for &(arm, q) in rates_out {
        if !q.is_finite() || q < 0.0 {
            return Err(Error::NonFiniteRate { arm });
        }
        total += q;
    }
    if !(total > 0.0) {
        return Err(Error::ZeroTotalRate {
            state: current_state,
        });
    }
    let exp = Exp::new(total).map_err(|_| Error::ZeroTotalRate {
        state: current_state,
    })?;
    let dt = loop {
        let dt = exp.sample(rng);
        if dt > 0.0 {
            break dt;
        }
    };
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut next = rates_out.last().map(|(a, _)| a.to).unwrap_or(current_state);
    for &(arm, q) in rates_out {
        acc += q;
        if u < acc && q > 0.0 {
            next = arm.to;
            break;
        }
    }
    Ok((dt, next))
}

/// Gillespie simulation of one trajectory given the covariate `z`.
///
/// Stops on entering an absorbing state or at the censoring time drawn from
/// `censoring` (first draw from `rng`). A state whose outgoing rates are all
/// zero waits for censoring.
pub fn simulate_with_rng<R: Rng + ?Sized>(
    topology: &ChainTopology,
    rate_fn: &RateFunction,
    z: &[f64],
    censoring: &CensoringModel,
    initial_state: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if initial_state == 0 || initial_state > topology.n_states() {
        return Err(Error::InvalidConfig(format!(
            "initial state {initial_state} out of range"
        )));
    }
    let arm_rates = rate_fn.arm_rates(z)?;
    let arms: Vec<Arm> = topology.arms().iter().map(ArmSpec::arm).collect();
    let c_time = censoring.sample(rng);

    let mut jumps = vec![Jump {
        time: 0.0,
        state: initial_state,
    }];
    let mut t = 0.0;
    let mut state = initial_state;
    let mut rates_out = Vec::new();
    loop {
        if topology.is_absorbing(state) {
            return Ok(Trajectory::new(z.to_vec(), jumps, false));
        }
        rates_out.clear();
        rates_out.extend(
            topology
                .outgoing(state)
                .iter()
                .map(|&i| (arms[i], arm_rates[i])),
        );
        let censor = |mut jumps: Vec<Jump>| {
            jumps.push(Jump {
                time: c_time,
                state,
            });
            Trajectory::new(z.to_vec(), jumps, true)
        };
        match waiting_time_and_jump(state, &rates_out, rng) {
            Ok((dt, next)) => {
                if t + dt >= c_time {
                    return Ok(censor(jumps));
                }
                t += dt;
                state = next;
                jumps.push(Jump { time: t, state });
                if jumps.len() > MAX_JUMPS {
                    return Err(Error::RunawaySimulation(MAX_JUMPS));
                }
            }
            Err(Error::ZeroTotalRate { state: s }) => {
                if c_time.is_finite() {
                    return Ok(censor(jumps));
                }
                return Err(Error::ZeroTotalRate { state: s });
            }
            Err(e) => return Err(e),
        }
    }
}

/// Seeded single-trajectory simulation (initial state 1).
pub fn gillespie_simulate(
    topology: &ChainTopology,
    rate_fn: &RateFunction,
    z: &[f64],
    censoring: &CensoringModel,
    rng_seed: u64,
) -> Result<Trajectory> {
    let mut rng = substream(rng_seed, Purpose::Path, 0);
    simulate_with_rng(topology, rate_fn, z, censoring, 1, &mut rng)
}

/// Settings shared by every synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub covariate_law: CovariateLaw,
    pub censoring: CensoringModel,
    pub initial_state: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            covariate_law: CovariateLaw::default(),
            censoring: CensoringModel::default(),
            initial_state: 1,
        }
    }
}

/// Simulates `n` independent trajectories. Trajectory `k` draws its
/// covariate and path from streams indexed by `k`, so the first `m`
/// trajectories of a size-`n` dataset equal a size-`m` dataset.
pub fn simulate_trajectories(
    rate_fn: &RateFunction,
    settings: &SimulationSettings,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    settings.covariate_law.validate()?;
    settings.censoring.validate()?;
    let topology = rate_fn.topology();
    (0..n)
        .into_par_iter()
        .map(|k| {
            let z =
                settings
                    .covariate_law
                    .sample(&mut substream(seed, Purpose::Covariate, k as u64));
            let mut rng = substream(seed, Purpose::Path, k as u64);
            simulate_with_rng(
                topology,
                rate_fn,
                &z,
                &settings.censoring,
                settings.initial_state,
                &mut rng,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_arm() -> ChainTopology {
        ChainTopology::new(
            3,
            vec![ArmSpec::nonparametric(1, 2), ArmSpec::nonparametric(1, 3)],
        )
        .unwrap()
    }

    #[test]
    fn topology_rejects_bad_arms() {
        assert!(ChainTopology::new(3, vec![ArmSpec::nonparametric(1, 1)]).is_err());
        assert!(ChainTopology::new(3, vec![ArmSpec::nonparametric(1, 4)]).is_err());
        assert!(ChainTopology::new(3, vec![ArmSpec::nonparametric(0, 2)]).is_err());
        assert!(ChainTopology::new(
            3,
            vec![ArmSpec::nonparametric(1, 2), ArmSpec::nonparametric(1, 2)]
        )
        .is_err());
    }

    #[test]
    fn absorbing_states_have_no_outgoing_arm() {
        let t = two_arm();
        assert_eq!(t.absorbing_states(), vec![2, 3]);
        assert!(!t.is_absorbing(1));
    }

    #[test]
    fn arm_parsing() {
        assert_eq!("1-2".parse::<Arm>().unwrap(), Arm::new(1, 2));
        assert_eq!("2->4".parse::<Arm>().unwrap(), Arm::new(2, 4));
        assert_eq!("13".parse::<Arm>().unwrap(), Arm::new(1, 3));
        assert!("x".parse::<Arm>().is_err());
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let g = GeneratorMatrix::from_arm_rates(&two_arm(), &[1.5, 2.25]).unwrap();
        assert_eq!(g.get(1, 1), -3.75);
        for i in 1..=3 {
            assert!(g.row_sum(i).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_arm_always_jumps_there() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rates = [(Arm::new(1, 2), 2.0)];
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (dt, next) = waiting_time_and_jump(1, &rates, &mut rng).unwrap();
            assert_eq!(next, 2);
            sum += dt;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.025, "mean {mean}");
    }

    #[test]
    fn jump_probabilities_follow_rate_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rates = [(Arm::new(1, 2), 1.0), (Arm::new(1, 3), 3.0)];
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| waiting_time_and_jump(1, &rates, &mut rng).unwrap().1 == 3)
            .count();
        let p = hits as f64 / n as f64;
        assert!((p - 0.75).abs() < 0.01, "p {p}");
    }

    #[test]
    fn empty_rates_is_zero_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            waiting_time_and_jump(2, &[], &mut rng),
            Err(Error::ZeroTotalRate { state: 2 })
        ));
    }

    #[test]
    fn censoring_density_integrates_to_one() {
        for model in [
            CensoringModel::Exponential { rate: 0.05 },
            CensoringModel::Exponential { rate: 3.0 },
            CensoringModel::Uniform { lo: 1.0, hi: 4.0 },
        ] {
            // midpoint rule on a truncated range, tail handled by the CDF
            let upper = match model {
                CensoringModel::Exponential { rate } => 40.0 / rate,
                _ => 5.0,
            };
            let n = 400_000;
            let h = upper / n as f64;
            let integral: f64 = (0..n)
                .map(|i| model.density((i as f64 + 0.5) * h) * h)
                .sum();
            let tail = 1.0 - model.cdf(upper);
            assert!(
                (integral + tail - 1.0).abs() < 1e-6,
                "{model:?}: {integral}"
            );
            let mut prev = 0.0;
            for i in 0..200 {
                let g = model.cdf(i as f64 * upper / 100.0);
                assert!(g >= prev);
                prev = g;
            }
            assert!((model.cdf(1e9) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn censoring_parses() {
        assert_eq!(
            "exp:0.05".parse::<CensoringModel>().unwrap(),
            CensoringModel::Exponential { rate: 0.05 }
        );
        assert_eq!(
            "none".parse::<CensoringModel>().unwrap(),
            CensoringModel::none()
        );
        assert!("exp:-1".parse::<CensoringModel>().is_err());
        let json = serde_json::to_string(&CensoringModel::none()).unwrap();
        assert_eq!(
            serde_json::from_str::<CensoringModel>(&json).unwrap(),
            CensoringModel::none()
        );
    }

    #[test]
    fn trajectory_validation() {
        let t = two_arm();
        let ok = Trajectory::new(
            vec![0.0],
            vec![
                Jump {
                    time: 0.0,
                    state: 1,
                },
                Jump {
                    time: 0.7,
                    state: 2,
                },
            ],
            false,
        );
        ok.validate(&t, 0).unwrap();
        let cens = Trajectory::new(
            vec![0.0],
            vec![
                Jump {
                    time: 0.0,
                    state: 1,
                },
                Jump {
                    time: 0.7,
                    state: 1,
                },
            ],
            true,
        );
        cens.validate(&t, 0).unwrap();
        let bad_flag = Trajectory::new(
            vec![0.0],
            vec![
                Jump {
                    time: 0.0,
                    state: 1,
                },
                Jump {
                    time: 0.7,
                    state: 1,
                },
            ],
            false,
        );
        assert!(bad_flag.validate(&t, 0).is_err());
        let bad_arm = Trajectory::new(
            vec![0.0],
            vec![
                Jump {
                    time: 0.0,
                    state: 2,
                },
                Jump {
                    time: 0.7,
                    state: 3,
                },
            ],
            false,
        );
        assert!(matches!(
            bad_arm.validate(&t, 4),
            Err(Error::TopologyViolation { trajectory: 4, .. })
        ));
        let bad_time = Trajectory::new(
            vec![0.0],
            vec![
                Jump {
                    time: 0.0,
                    state: 1,
                },
                Jump {
                    time: 0.0,
                    state: 2,
                },
            ],
            false,
        );
        assert!(bad_time.validate(&t, 0).is_err());
    }
}
