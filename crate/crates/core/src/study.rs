//! Simulation-study harness: topology presets with polynomial generative
//! log-rates, replicate loops, and aggregate tables.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{simulate_trajectories, ArmSpec, ChainTopology, Polynomial, SimulationSettings};
use crate::dataset::{Dataset, DatasetMetadata};
use crate::error::{Error, Result};
use crate::fit_emvs::{fit_emvs, write_em_trace_csv, EmvsConfig};
use crate::fit_freq::{fit_frequentist, write_trace_csv, Design, FreqConfig};
use crate::kernel::{KernelSpec, RateFunction, ScalarKernel};
use crate::metrics::{
    absorption_distance, grid_points, mse_lngen, AbsorptionReport, AbsorptionSettings,
    CovariateSource, EvalSet, MseReport, Outcome, PathCoupling,
};
use crate::optim::TraceRow;
use crate::rng::{derive_seed, Purpose};

/// Known log-rate of the (1,3) arm in the one-arm scenario.
pub const FIXED_ARM_13: [f64; 2] = [0.07, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// States 1..3, arms 1->2 (nonparametric) and 1->3 (known).
    ThreeStateOneArm,
    /// States 1..3, arms 1->2 and 1->3, both nonparametric.
    ThreeStateTwoArm,
    /// States 1..4, arms 1->2, 1->3, 2->4, all nonparametric.
    FourStateTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    Quadratic,
    Cubic,
    Quartic,
}

impl Case {
    /// Polynomial coefficients of the generative log-rate, lowest degree first.
    pub fn coefficients(self) -> Vec<f64> {
        match self {
            Case::Quadratic => vec![0.5, 0.01, -2.0],
            Case::Cubic => vec![-2.0, 0.1, -0.05, 1.0],
            Case::Quartic => vec![2.0, 0.02, -4.0, 0.0, 0.5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Case::Quadratic => "quadratic",
            Case::Cubic => "cubic",
            Case::Quartic => "quartic",
        }
    }
}

impl FromStr for Case {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" | "1" => Ok(Case::Quadratic),
            "cubic" | "2" => Ok(Case::Cubic),
            "quartic" | "3" => Ok(Case::Quartic),
            _ => Err(Error::Format(format!(
                "unknown case '{s}' (quadratic, cubic, quartic)"
            ))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::ThreeStateOneArm => "three-state-one-arm",
            Preset::ThreeStateTwoArm => "three-state-two-arm",
            Preset::FourStateTree => "four-state-tree",
        }
    }

    /// Topology as seen by the estimator.
    pub fn topology(self) -> ChainTopology {
        let arms = match self {
            Preset::ThreeStateOneArm => vec![
                ArmSpec::nonparametric(1, 2),
                ArmSpec::fixed(1, 3, Polynomial::new(FIXED_ARM_13.to_vec())),
            ],
            Preset::ThreeStateTwoArm => {
                vec![ArmSpec::nonparametric(1, 2), ArmSpec::nonparametric(1, 3)]
            }
            Preset::FourStateTree => vec![
                ArmSpec::nonparametric(1, 2),
                ArmSpec::nonparametric(1, 3),
                ArmSpec::nonparametric(2, 4),
            ],
        };
        let n = if self == Preset::FourStateTree { 4 } else { 3 };
        ChainTopology::new(n, arms).expect("preset topologies are valid")
    }

    /// Generative rate function for a case.
    pub fn truth(self, case: Case) -> RateFunction {
        let topology = self.topology();
        let polys = topology
            .arms()
            .iter()
            .map(|a| match &a.kind {
                crate::chain::ArmKind::FixedParametric(p) => p.clone(),
                crate::chain::ArmKind::Nonparametric => Polynomial::new(case.coefficients()),
            })
            .collect();
        RateFunction::parametric(topology, polys).expect("one polynomial per arm")
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three-state-one-arm" => Ok(Preset::ThreeStateOneArm),
            "three-state-two-arm" => Ok(Preset::ThreeStateTwoArm),
            "four-state-tree" => Ok(Preset::FourStateTree),
            _ => Err(Error::Format(format!(
                "unknown preset '{s}' (three-state-one-arm, three-state-two-arm, four-state-tree)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(alias = "freq")]
    Frequentist,
    Emvs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Frequentist => "freq",
            Method::Emvs => "emvs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[serde(alias = "freq")]
    Frequentist,
    Emvs,
    Both,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Frequentist => vec![Method::Frequentist],
            MethodChoice::Emvs => vec![Method::Emvs],
            MethodChoice::Both => vec![Method::Frequentist, Method::Emvs],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalChoice {
    /// The replicate's own training covariates.
    Sample,
    Grid {
        lo: f64,
        hi: f64,
        count: usize,
    },
}

/// Everything except the scenario identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    pub kernel: ScalarKernel,
    pub standardize: bool,
    pub simulation: SimulationSettings,
    pub freq: FreqConfig,
    pub emvs: EmvsConfig,
    pub n_sims: usize,
    pub coupling: PathCoupling,
    pub eval: EvalChoice,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            kernel: ScalarKernel::Rbf { bandwidth: 1.0 },
            standardize: false,
            simulation: SimulationSettings::default(),
            freq: FreqConfig::default(),
            emvs: EmvsConfig::default(),
            n_sims: 1000,
            coupling: PathCoupling::Independent,
            eval: EvalChoice::Sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub preset: Preset,
    pub case: Case,
    pub n: usize,
    pub replicates: usize,
    pub method: MethodChoice,
    pub seed: u64,
    #[serde(default)]
    pub settings: StudySettings,
}

impl ScenarioSpec {
    pub fn new(
        preset: Preset,
        case: Case,
        n: usize,
        replicates: usize,
        method: MethodChoice,
        seed: u64,
    ) -> Self {
        ScenarioSpec {
            preset,
            case,
            n,
            replicates,
            method,
            seed,
            settings: StudySettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "N and replicates must be at least 1".into(),
            ));
        }
        if self.settings.n_sims == 0 {
            return Err(Error::InvalidConfig("n_sims must be at least 1".into()));
        }
        self.settings.kernel.validate()?;
        self.settings.freq.validate()?;
        self.settings.emvs.validate()?;
        self.settings.simulation.censoring.validate()?;
        self.settings.simulation.covariate_law.validate()
    }

    pub fn name(&self) -> String {
        format!("{}-{}-n{}", self.preset.name(), self.case.name(), self.n)
    }

    /// Seed of replicate `r`; independent of `n`, so datasets of different
    /// sizes within a replicate are nested.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, Purpose::Replicate, r as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub mse: MseReport,
    pub absorption: AbsorptionReport,
    pub converged: bool,
    pub iterations: usize,
    pub final_loss: f64,
    #[serde(skip)]
    pub rate_function: Option<RateFunction>,
    #[serde(skip)]
    pub trace: Option<MethodTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MethodTrace {
    Frequentist(Vec<TraceRow>),
    Emvs(Vec<crate::fit_emvs::EmTraceRow>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    #[serde(flatten)]
    pub result: MethodResult,
    /// Wall-clock time; kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodResult {
    Ok(Box<MethodMetrics>),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub seed: u64,
    pub methods: Vec<MethodOutcome>,
    #[serde(skip)]
    pub dataset: Option<Dataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub metric: String,
    pub key: String,
    pub mean: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: ScenarioSpec,
    pub replicates: Vec<ReplicateReport>,
    pub aggregates: Vec<AggregateRow>,
}

impl StudyReport {
    pub fn aggregate(&self, method: Method, metric: &str, key: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.metric == metric && a.key == key)
    }
}

fn run_method(
    method: Method,
    spec: &ScenarioSpec,
    data: &Dataset,
    design: &Design,
    truth: &RateFunction,
    abs_seed: u64,
) -> Result<MethodMetrics> {
    let s = &spec.settings;
    let (rf, converged, iterations, final_loss, trace) = match method {
        Method::Frequentist => {
            let fit = fit_frequentist(data, design, &s.freq)?;
            let rf = design.rate_function(data, &fit.beta)?;
            (
                rf,
                fit.converged,
                fit.iterations,
                fit.final_loss,
                MethodTrace::Frequentist(fit.trace),
            )
        }
        Method::Emvs => {
            let fit = fit_emvs(data, design, &s.emvs)?;
            let rf = design.rate_function(data, &fit.state.beta)?;
            (
                rf,
                fit.converged,
                fit.state.iterations,
                -fit.state.q0,
                MethodTrace::Emvs(fit.trace),
            )
        }
    };
    let (points, eval_set) = match &s.eval {
        EvalChoice::Sample => (data.covariates(), EvalSet::Sample { count: data.len() }),
        EvalChoice::Grid { lo, hi, count } => (
            grid_points(*lo, *hi, *count),
            EvalSet::Grid {
                lo: *lo,
                hi: *hi,
                count: *count,
            },
        ),
    };
    let mse = mse_lngen(truth, &rf, &points, eval_set)?;
    let settings = AbsorptionSettings {
        censoring: s.simulation.censoring.clone(),
        n_sims: s.n_sims,
        seed: abs_seed,
        coupling: s.coupling,
        initial_state: s.simulation.initial_state,
    };
    let source = CovariateSource::Law(s.simulation.covariate_law.clone());
    let absorption = absorption_distance(truth.topology(), truth, &rf, &source, &settings)?;
    Ok(MethodMetrics {
        mse,
        absorption,
        converged,
        iterations,
        final_loss,
        rate_function: Some(rf),
        trace: Some(trace),
    })
}

fn run_replicate(spec: &ScenarioSpec, r: usize, truth: &RateFunction) -> ReplicateReport {
    let seed = spec.replicate_seed(r);
    let s = &spec.settings;
    let fail_all = |e: Error| ReplicateReport {
        replicate: r,
        seed,
        methods: spec
            .method
            .methods()
            .into_iter()
            .map(|m| MethodOutcome {
                method: m,
                result: MethodResult::Failed(e.to_string()),
                runtime_secs: 0.0,
            })
            .collect(),
        dataset: None,
    };
    let data = match simulate_trajectories(truth, &s.simulation, spec.n, seed)
        .and_then(|t| Dataset::new(spec.preset.topology(), t))
    {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let design = match Design::new(
        &data,
        &KernelSpec::uniform(s.kernel, data.topology()),
        s.standardize,
    ) {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let abs_seed = derive_seed(seed, Purpose::Replicate, 1);
    let methods = spec
        .method
        .methods()
        .into_iter()
        .map(|m| {
            let start = Instant::now();
            let result = match run_method(m, spec, &data, &design, truth, abs_seed) {
                Ok(metrics) => MethodResult::Ok(Box::new(metrics)),
                Err(e) => MethodResult::Failed(e.to_string()),
            };
            MethodOutcome {
                method: m,
                result,
                runtime_secs: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    ReplicateReport {
        replicate: r,
        seed,
        methods,
        dataset: Some(data),
    }
}

fn aggregates(spec: &ScenarioSpec, reps: &[ReplicateReport]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for method in spec.method.methods() {
        let ok: Vec<&MethodMetrics> = reps
            .iter()
            .flat_map(|r| &r.methods)
            .filter(|m| m.method == method)
            .filter_map(|m| match &m.result {
                MethodResult::Ok(x) => Some(x.as_ref()),
                MethodResult::Failed(_) => None,
            })
            .collect();
        let n_failed = reps.len() - ok.len();
        let Some(first) = ok.first() else {
            continue;
        };
        let mean = |f: &dyn Fn(&MethodMetrics) -> f64| {
            ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
        };
        for arm in &first.mse.arms {
            let a = arm.arm;
            rows.push(AggregateRow {
                method,
                metric: "mse".into(),
                key: a.to_string(),
                mean: mean(&|m| m.mse.get(a).map_or(f64::NAN, |x| x.mse)),
                n_replicates: ok.len(),
                n_failed,
            });
        }
        for row in &first.absorption.rows {
            let o: Outcome = row.outcome;
            rows.push(AggregateRow {
                method,
                metric: "d_absorption".into(),
                key: o.to_string(),
                mean: mean(&|m| m.absorption.get(o).map_or(f64::NAN, |x| x.abs_diff)),
                n_replicates: ok.len(),
                n_failed,
            });
        }
    }
    rows
}

/// Runs every replicate of a scenario (in parallel) and aggregates the
/// metrics over successful replicates.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<StudyReport> {
    spec.validate()?;
    let truth = spec.preset.truth(spec.case);
    let replicates: Vec<ReplicateReport> = (0..spec.replicates)
        .into_par_iter()
        .map(|r| run_replicate(spec, r, &truth))
        .collect();
    let aggregates = aggregates(spec, &replicates);
    Ok(StudyReport {
        scenario: spec.clone(),
        replicates,
        aggregates,
    })
}

/// Study configuration file: a grid of scenarios sharing settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    pub presets: Vec<Preset>,
    pub cases: Vec<Case>,
    #[serde(default = "default_method")]
    pub method: MethodChoice,
    #[serde(default)]
    pub settings: StudySettings,
}

fn default_replicates() -> usize {
    5
}

fn default_n_grid() -> Vec<usize> {
    vec![100, 200, 400, 600, 800, 1000]
}

fn default_method() -> MethodChoice {
    MethodChoice::Both
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
    }

    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        let mut out = Vec::new();
        for &preset in &self.presets {
            for &case in &self.cases {
                for &n in &self.n_grid {
                    out.push(ScenarioSpec {
                        preset,
                        case,
                        n,
                        replicates: self.replicates,
                        method: self.method,
                        seed: self.seed,
                        settings: self.settings.clone(),
                    });
                }
            }
        }
        out
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `scenario/replicate_k/{data.csv, metadata.json, fit.json, metrics.json, traces/}`.
/// Run times go to `scenario/timings.csv`, the only non-reproducible file.
pub fn write_scenario_outputs(report: &StudyReport, dir: &Path) -> Result<()> {
    let sdir = dir.join(report.scenario.name());
    std::fs::create_dir_all(&sdir)?;
    write_json(&sdir.join("report.json"), report)?;
    let mut timings = csv::Writer::from_path(sdir.join("timings.csv"))?;
    timings.write_record(["replicate", "method", "runtime_secs"])?;
    for rep in &report.replicates {
        let rdir = sdir.join(format!("replicate_{}", rep.replicate));
        let tdir = rdir.join("traces");
        std::fs::create_dir_all(&tdir)?;
        if let Some(data) = &rep.dataset {
            data.save_csv(&rdir.join("data.csv"))?;
            let s = &report.scenario.settings.simulation;
            DatasetMetadata {
                seed: rep.seed,
                n_trajectories: data.len(),
                topology: data.topology().clone(),
                censoring: s.censoring.clone(),
                covariate_law: s.covariate_law.clone(),
                initial_state: s.initial_state,
                preset: Some(report.scenario.preset.name().into()),
                case: Some(report.scenario.case.name().into()),
            }
            .save(&rdir.join("metadata.json"))?;
        }
        let mut fits = serde_json::Map::new();
        for m in &rep.methods {
            timings.write_record([
                rep.replicate.to_string(),
                m.method.name().into(),
                format!("{:.3}", m.runtime_secs),
            ])?;
            if let MethodResult::Ok(x) = &m.result {
                if let Some(rf) = &x.rate_function {
                    fits.insert(m.method.name().into(), serde_json::to_value(rf)?);
                }
                match &x.trace {
                    Some(MethodTrace::Frequentist(t)) => {
                        write_trace_csv(t, std::fs::File::create(tdir.join("freq_trace.csv"))?)?
                    }
                    Some(MethodTrace::Emvs(t)) => {
                        write_em_trace_csv(t, std::fs::File::create(tdir.join("em_trace.csv"))?)?
                    }
                    None => {}
                }
            }
        }
        write_json(&rdir.join("fit.json"), &fits)?;
        write_json(&rdir.join("metrics.json"), &rep.methods)?;
    }
    timings.flush()?;
    Ok(())
}

/// Appends this report's aggregate rows to a summary CSV writer.
pub fn write_summary_rows<W: std::io::Write>(reports: &[StudyReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "preset",
        "case",
        "n",
        "method",
        "metric",
        "key",
        "mean",
        "n_replicates",
        "n_failed",
    ])?;
    for r in reports {
        for a in &r.aggregates {
            w.write_record([
                r.scenario.preset.name().to_string(),
                r.scenario.case.name().to_string(),
                r.scenario.n.to_string(),
                a.method.name().to_string(),
                a.metric.clone(),
                a.key.clone(),
                a.mean.to_string(),
                a.n_replicates.to_string(),
                a.n_failed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Arm;

    #[test]
    fn preset_functions() {
        let t = Preset::ThreeStateOneArm.truth(Case::Quadratic);
        let z = [0.3];
        let v = t.eval_lngen(Arm::new(1, 2), &z).unwrap();
        assert!((v - (0.5 + 0.01 * 0.3 - 2.0 * 0.09)).abs() < 1e-15);
        assert!((t.eval_lngen(Arm::new(1, 3), &[1.0]).unwrap() - 0.67).abs() < 1e-12);
        assert_eq!(Preset::ThreeStateOneArm.topology().n_nonparametric(), 1);

        let tree = Preset::FourStateTree.truth(Case::Cubic);
        for arm in [Arm::new(1, 2), Arm::new(1, 3), Arm::new(2, 4)] {
            let v = tree.eval_lngen(arm, &[2.0]).unwrap();
            assert!((v - (-2.0 + 0.2 - 0.2 + 8.0)).abs() < 1e-12);
        }
        assert_eq!(
            Preset::FourStateTree.topology().absorbing_states(),
            vec![3, 4]
        );
        assert_eq!(
            Preset::ThreeStateTwoArm
                .truth(Case::Quartic)
                .eval_lngen(Arm::new(1, 3), &[0.0])
                .unwrap(),
            2.0
        );
    }

    #[test]
    fn parse_names() {
        assert_eq!(
            "four-state-tree".parse::<Preset>().unwrap(),
            Preset::FourStateTree
        );
        assert_eq!("cubic".parse::<Case>().unwrap(), Case::Cubic);
        assert!("pentic".parse::<Case>().is_err());
    }

    #[test]
    fn minimal_run_is_valid() {
        let mut spec = ScenarioSpec::new(
            Preset::ThreeStateTwoArm,
            Case::Quadratic,
            1,
            1,
            MethodChoice::Both,
            9,
        );
        spec.settings.n_sims = 50;
        let report = run_scenario(&spec).unwrap();
        assert_eq!(report.replicates.len(), 1);
        for m in &report.replicates[0].methods {
            match &m.result {
                MethodResult::Ok(x) => assert!(x.mse.arms.iter().all(|a| a.mse.is_finite())),
                MethodResult::Failed(e) => panic!("{e}"),
            }
        }
    }
}
