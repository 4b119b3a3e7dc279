use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ctmc_rkhs::chain::{ArmSpec, CovariateLaw};
use ctmc_rkhs::dataset::load_trajectories_csv;
use ctmc_rkhs::fit_emvs::write_em_trace_csv;
use ctmc_rkhs::fit_freq::write_trace_csv;
use ctmc_rkhs::likelihood::rate_function_loss;
use ctmc_rkhs::metrics::{
    grid_points, write_absorption_csv, write_mse_csv, AbsorptionSettings, CovariateSource,
    CurveSlice, EvalSet, PathCoupling,
};
use ctmc_rkhs::study::{
    write_scenario_outputs, write_summary_rows, MethodChoice, StudyConfig, StudySettings,
};
use ctmc_rkhs::{
    absorption_distance, curve_export, fit_emvs, fit_frequentist, mse_lngen, run_scenario,
    simulate_trajectories, Arm, Case, CensoringModel, ChainTopology, Dataset, DatasetMetadata,
    Design, EmvsConfig, EmvsInit, FreqConfig, KernelSpec, Preset, RateFunction, ScalarKernel,
    ScenarioSpec, SimulationSettings,
};

#[derive(Parser)]
#[command(
    name = "ctmc-rkhs",
    version,
    about = "Kernel estimation of covariate-dependent CTMC transition rates"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories from a preset or a saved rate function.
    Simulate(SimulateArgs),
    /// Fit rate functions to a trajectory CSV.
    Fit(FitArgs),
    /// Compare a fitted rate function against the truth.
    Eval(EvalArgs),
    /// Run simulation-study scenarios.
    Study(StudyArgs),
    /// Tabulate log-rate curves of a saved rate function.
    ExportCurves(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "truth", required_unless_present = "truth")]
    preset: Option<Preset>,
    #[arg(long, default_value = "quadratic")]
    case: Case,
    /// Rate-function JSON to simulate from instead of a preset.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    /// exp:RATE, uniform:LO:HI, horizon:T or none.
    #[arg(long, default_value = "exp:0.05")]
    censoring: CensoringModel,
    /// uniform:LO:HI[:DIM] or normal:MEAN:SD[:DIM].
    #[arg(long, default_value = "uniform:-1:1")]
    covariates: CovariateLaw,
    #[arg(long, default_value_t = 1)]
    initial_state: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    Freq,
    Emvs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Zero,
    Mixture,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Topology JSON; defaults to metadata.json next to the data, then to
    /// all observed transitions as nonparametric arms.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "freq")]
    method: FitMethod,
    /// Ridge weight, or a comma list to choose by cross-validation.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Folds used when several lambdas are given.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// rbf[:SIGMA], linear or poly:DEGREE[:OFFSET].
    #[arg(long, default_value = "rbf:1")]
    kernel: ScalarKernel,
    #[arg(long, value_enum, default_value = "on")]
    standardize: OnOff,
    #[arg(long, default_value_t = ctmc_rkhs::fit_emvs::DEFAULT_NU0)]
    nu0: f64,
    #[arg(long, default_value_t = ctmc_rkhs::fit_emvs::DEFAULT_NU1)]
    nu1: f64,
    #[arg(long, default_value_t = ctmc_rkhs::fit_emvs::DEFAULT_A0)]
    a0: f64,
    #[arg(long, default_value_t = ctmc_rkhs::fit_emvs::DEFAULT_A1)]
    a1: f64,
    #[arg(long, default_value_t = ctmc_rkhs::fit_emvs::DEFAULT_THETA)]
    theta: f64,
    #[arg(long, value_enum, default_value = "zero")]
    init: InitArg,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 100)]
    max_em_iters: usize,
    /// Extra EMVS runs from random starts.
    #[arg(long, default_value_t = 0)]
    restarts: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_sims: usize,
    #[arg(long, default_value = "exp:0.05")]
    censoring: CensoringModel,
    /// Covariate law for the absorption simulation; the dimension defaults to the fit's.
    #[arg(long, default_value = "uniform:-1:1")]
    covariates: CovariateLaw,
    /// Use the same path stream for truth and estimate.
    #[arg(long)]
    common_paths: bool,
    /// MSE on an evenly spaced grid LO:HI:COUNT instead of the training covariates.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    #[arg(long, default_value_t = 1)]
    initial_state: usize,
}

#[derive(Args)]
struct StudyArgs {
    /// TOML or JSON study configuration; overrides the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "three-state-two-arm")]
    preset: Vec<Preset>,
    #[arg(long, value_delimiter = ',', default_value = "quadratic")]
    case: Vec<Case>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "100,200,400,600,800,1000"
    )]
    n: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    replicates: usize,
    #[arg(long, value_enum, default_value = "both")]
    method: StudyMethod,
    #[arg(long, default_value_t = 1000)]
    n_sims: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyMethod {
    Freq,
    Emvs,
    Both,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Arms to export (default: all).
    #[arg(long, value_delimiter = ',')]
    arm: Vec<Arm>,
    /// LO:HI:COUNT
    #[arg(long, default_value = "-1:1:201", allow_hyphen_values = true)]
    range: String,
    /// For multivariate covariates: COORD:B1,B2,... varies COORD and holds the rest at B.
    #[arg(long, allow_hyphen_values = true)]
    slice: Option<String>,
}

fn parse_range(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        bail!("expected LO:HI:COUNT, got '{s}'");
    };
    let (lo, hi, n): (f64, f64, usize) = (lo.parse()?, hi.parse()?, n.parse()?);
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) || n < 2 {
        bail!("need LO < HI and COUNT >= 2, got '{s}'");
    }
    Ok((lo, hi, n))
}

fn parse_slice(s: &str) -> Result<CurveSlice> {
    let (coord, base) = s
        .split_once(':')
        .with_context(|| format!("expected COORD:B1,B2,..., got '{s}'"))?;
    let base = base
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CurveSlice {
        coordinate: coord.parse()?,
        base,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn load_rate_function(path: &Path) -> Result<RateFunction> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RateFunction::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(common: &Common, a: SimulateArgs) -> Result<()> {
    let (truth, preset) = match (&a.preset, &a.truth) {
        (Some(p), _) => (p.truth(a.case), Some(*p)),
        (None, Some(path)) => (load_rate_function(path)?, None),
        (None, None) => unreachable!("clap requires one of --preset/--truth"),
    };
    let covariate_law = match truth.dim() {
        Some(d) if d != a.covariates.dim() => a.covariates.with_dim(d),
        _ => a.covariates,
    };
    let settings = SimulationSettings {
        covariate_law,
        censoring: a.censoring,
        initial_state: a.initial_state,
    };
    let trajectories = simulate_trajectories(&truth, &settings, a.n, common.seed)?;
    let data = Dataset::new(truth.topology().clone(), trajectories)?;
    fs::create_dir_all(&common.out)?;
    data.save_csv(&common.out.join("data.csv"))?;
    DatasetMetadata {
        seed: common.seed,
        n_trajectories: data.len(),
        topology: truth.topology().clone(),
        censoring: settings.censoring,
        covariate_law: settings.covariate_law,
        initial_state: settings.initial_state,
        preset: preset.map(|p| p.name().to_string()),
        case: preset.map(|_| a.case.name().to_string()),
    }
    .save(&common.out.join("metadata.json"))?;
    fs::write(common.out.join("truth.json"), truth.to_json()? + "\n")?;
    Ok(())
}

/// Every observed transition becomes a nonparametric arm.
fn infer_topology(trajectories: &[ctmc_rkhs::Trajectory]) -> Result<ChainTopology> {
    let mut arms = BTreeSet::new();
    let mut n_states = 0;
    for t in trajectories {
        for w in t.jumps.windows(2) {
            arms.insert((w[0].state, w[1].state));
        }
        n_states = t.jumps.iter().map(|j| j.state).fold(n_states, usize::max);
    }
    let specs = arms
        .into_iter()
        .map(|(i, j)| ArmSpec::nonparametric(i, j))
        .collect();
    Ok(ChainTopology::new(n_states, specs)?)
}

fn load_dataset(data: &Path, topology: Option<&Path>) -> Result<Dataset> {
    let trajectories =
        load_trajectories_csv(data).with_context(|| format!("reading {}", data.display()))?;
    let sidecar = data.with_file_name("metadata.json");
    let topology = match topology {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None if sidecar.exists() => DatasetMetadata::load(&sidecar)?.topology,
        None => infer_topology(&trajectories)?,
    };
    Ok(Dataset::new(topology, trajectories)?)
}

#[derive(Serialize)]
struct CvRow {
    lambda: f64,
    held_out_loss: f64,
}

/// K-fold choice of the ridge weight by held-out negative log-likelihood.
fn choose_lambda(
    data: &Dataset,
    a: &FitArgs,
    kernel: &KernelSpec,
    base: &FreqConfig,
) -> Result<(f64, Vec<CvRow>)> {
    let folds = a.folds.clamp(2, data.len());
    let mut rows = Vec::new();
    for &lambda in &a.lambda {
        let mut total = 0.0;
        for f in 0..folds {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|k| k % folds == f);
            let train = data.select(&train)?;
            let design = Design::new(&train, kernel, a.standardize == OnOff::On)?;
            let cfg = FreqConfig {
                lambda: Some(lambda),
                ..base.clone()
            };
            let fit = fit_frequentist(&train, &design, &cfg)?;
            let rf = design.rate_function(&train, &fit.beta)?;
            total += rate_function_loss(&rf, &data.select(&test)?)?;
        }
        rows.push(CvRow {
            lambda,
            held_out_loss: total,
        });
    }
    let best = rows
        .iter()
        .min_by(|x, y| x.held_out_loss.total_cmp(&y.held_out_loss))
        .expect("non-empty grid");
    Ok((best.lambda, rows))
}

fn fit(common: &Common, a: FitArgs) -> Result<()> {
    a.kernel.validate()?;
    let data = load_dataset(&a.data, a.topology.as_deref())?;
    let kernel = KernelSpec::uniform(a.kernel, data.topology());
    let mut freq = FreqConfig {
        max_iters: a.max_iters,
        ..FreqConfig::default()
    };
    if a.lambda.len() == 1 {
        freq.lambda = Some(a.lambda[0]);
    }
    let emvs = EmvsConfig {
        nu0: a.nu0,
        nu1: a.nu1,
        a0: a.a0,
        a1: a.a1,
        theta_init: a.theta,
        max_em_iters: a.max_em_iters,
        inner: freq.clone(),
        init: match a.init {
            InitArg::Zero => EmvsInit::Zero,
            InitArg::Mixture => EmvsInit::Mixture,
        },
        restarts: a.restarts,
        restart_seed: common.seed,
        ..EmvsConfig::default()
    };
    freq.validate()?;
    emvs.validate()?;
    if a.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        bail!("--lambda values must be finite and >= 0");
    }
    fs::create_dir_all(&common.out)?;
    if a.lambda.len() > 1 {
        let (best, rows) = choose_lambda(&data, &a, &kernel, &freq)?;
        let mut w = csv::Writer::from_path(common.out.join("cv.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        freq.lambda = Some(best);
    }
    let design = Design::new(&data, &kernel, a.standardize == OnOff::On)?;
    let summary = match a.method {
        FitMethod::Freq => {
            let fit = fit_frequentist(&data, &design, &freq)?;
            let rf = design.rate_function(&data, &fit.beta)?;
            fs::write(common.out.join("fit.json"), rf.to_json()? + "\n")?;
            write_trace_csv(&fit.trace, File::create(common.out.join("trace.csv"))?)?;
            serde_json::json!({
                "method": "freq",
                "n_trajectories": data.len(),
                "lambda": freq.lambda_for(data.len()),
                "final_loss": fit.final_loss,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "grad_norm": fit.grad_norm,
                "grad_tol": fit.grad_tol,
                "diagnostics": fit.diagnostics,
            })
        }
        FitMethod::Emvs => {
            let fit = fit_emvs(&data, &design, &emvs)?;
            let rf = design.rate_function(&data, &fit.state.beta)?;
            fs::write(common.out.join("fit.json"), rf.to_json()? + "\n")?;
            let sparse = design.rate_function(&data, &fit.sparsified)?;
            fs::write(
                common.out.join("fit_sparsified.json"),
                sparse.to_json()? + "\n",
            )?;
            write_em_trace_csv(&fit.trace, File::create(common.out.join("em_trace.csv"))?)?;
            serde_json::json!({
                "method": "emvs",
                "n_trajectories": data.len(),
                "nu0": fit.nu0,
                "nu1": fit.nu1,
                "theta_init": fit.theta_init,
                "theta": fit.state.theta,
                "iterations": fit.state.iterations,
                "converged": fit.converged,
                "q0": fit.state.q0,
                "log_posterior": fit.log_posterior,
                "n_selected": fit.selection.iter().filter(|s| **s).count(),
                "n_weights": fit.selection.len(),
                "selection": fit.selection,
                "p_star": fit.state.p_star,
                "mixture": fit.mixture,
                "clamp_events": fit.clamp_events,
            })
        }
    };
    write_json(&common.out.join("fit_summary.json"), &summary)
}

fn eval(common: &Common, a: EvalArgs) -> Result<()> {
    let est = load_rate_function(&a.fit)?;
    let truth = load_rate_function(&a.truth)?;
    let (points, eval_set) = match (&a.grid, est.training_covariates()) {
        (Some(g), _) => {
            let (lo, hi, count) = parse_range(g)?;
            (grid_points(lo, hi, count), EvalSet::Grid { lo, hi, count })
        }
        (None, Some(z)) => (z.to_vec(), EvalSet::Sample { count: z.len() }),
        (None, None) => (
            grid_points(-1.0, 1.0, 101),
            EvalSet::Grid {
                lo: -1.0,
                hi: 1.0,
                count: 101,
            },
        ),
    };
    let mse = mse_lngen(&truth, &est, &points, eval_set)?;
    let law = match est.dim().or(truth.dim()) {
        Some(d) => a.covariates.with_dim(d),
        None => a.covariates,
    };
    let settings = AbsorptionSettings {
        censoring: a.censoring,
        n_sims: a.n_sims,
        seed: common.seed,
        coupling: if a.common_paths {
            PathCoupling::Common
        } else {
            PathCoupling::Independent
        },
        initial_state: a.initial_state,
    };
    let absorption = absorption_distance(
        truth.topology(),
        &truth,
        &est,
        &CovariateSource::Law(law),
        &settings,
    )?;
    fs::create_dir_all(&common.out)?;
    write_mse_csv(&mse, File::create(common.out.join("mse.csv"))?)?;
    write_json(&common.out.join("mse.json"), &mse)?;
    write_absorption_csv(
        &absorption,
        File::create(common.out.join("absorption.csv"))?,
    )?;
    write_json(&common.out.join("absorption.json"), &absorption)?;
    Ok(())
}

fn study(common: &Common, a: StudyArgs) -> Result<()> {
    let config = match &a.config {
        Some(path) => StudyConfig::load(path)?,
        None => StudyConfig {
            seed: common.seed,
            replicates: a.replicates,
            n_grid: a.n.clone(),
            presets: a.preset.clone(),
            cases: a.case.clone(),
            method: match a.method {
                StudyMethod::Freq => MethodChoice::Frequentist,
                StudyMethod::Emvs => MethodChoice::Emvs,
                StudyMethod::Both => MethodChoice::Both,
            },
            settings: StudySettings {
                n_sims: a.n_sims,
                ..StudySettings::default()
            },
        },
    };
    let scenarios: Vec<ScenarioSpec> = config.scenarios();
    for s in &scenarios {
        s.validate()?;
    }
    fs::create_dir_all(&common.out)?;
    let mut reports = Vec::new();
    for s in &scenarios {
        eprintln!("running {} ({} replicates)", s.name(), s.replicates);
        let report = run_scenario(s)?;
        write_scenario_outputs(&report, &common.out)?;
        reports.push(report);
    }
    write_summary_rows(&reports, File::create(common.out.join("summary.csv"))?)?;
    Ok(())
}

fn export_curves(common: &Common, a: ExportArgs) -> Result<()> {
    let rf = load_rate_function(&a.fit)?;
    let grid = parse_range(&a.range)?;
    let slice = a.slice.as_deref().map(parse_slice).transpose()?;
    let arms: Vec<Arm> = if a.arm.is_empty() {
        rf.topology().arms().iter().map(ArmSpec::arm).collect()
    } else {
        a.arm
    };
    fs::create_dir_all(&common.out)?;
    let mut w = csv::Writer::from_path(common.out.join("curves.csv"))?;
    w.write_record(["arm", "z", "lngen", "q"])?;
    for arm in arms {
        for row in curve_export(&rf, arm, grid, slice.as_ref())? {
            w.write_record([
                arm.to_string(),
                row.z.to_string(),
                row.lngen.to_string(),
                row.q.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(&cli.common, a),
        Command::Fit(a) => fit(&cli.common, a),
        Command::Eval(a) => eval(&cli.common, a),
        Command::Study(a) => study(&cli.common, a),
        Command::ExportCurves(a) => export_curves(&cli.common, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
