//! Command-line front end: `surroshap <command>`.
//!
//! Every subcommand is a thin wrapper that loads its input files, calls one
//! library entry point and writes the result files. Commands that produce
//! files also drop a `<output>.manifest.json` beside the primary output
//! recording the argv, the resolved configuration, SHA-256 hashes of all
//! inputs and outputs, the seed and per-stage timings, so a run can be
//! re-executed and verified byte for byte (timings excluded).
//!
//! Exit codes: 0 success, 2 bad arguments or invalid input files, 3
//! capacity limits (exact enumeration too large), 4 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::allocation::{load_allocation_rows, save_allocations, AllocationResult, Method};
use crate::bounds::{epsilon_from_metrics, estimate_eta, total_bound, EtaConfig};
use crate::error::{Error, Result};
use crate::grid::io::{load_scenario, load_system, save_scenario, save_system, system_hash};
use crate::grid::{
    generate_scenario_with_voll, synthesize_system, EntityKind, GridSystem, Scenario, DEFAULT_VOLL,
};
use crate::pipeline::{
    allocate_horizon, check_model_matches, surroshap_allocate_period_with, HorizonAllocation,
    MethodSpec, SurroShapConfig, SurrogateOracle,
};
use crate::properties::{
    check_signs, evidence_to_csv, perturb_and_compare, reshape_profile_search, Perturbation,
    PropertyReport,
};
use crate::rng::period_seed;
use crate::sampler::{kernelshap_allocate_with, KernelShapConfig, OpfOracle, Trajectory};
use crate::surrogate::{
    evaluate_metrics, generate_dataset, load_dataset, load_model, model_hash, save_dataset,
    save_model, train, Split, SurrogateModel, TrainConfig,
};

/// Parses the process arguments, runs the selected command and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real usage
            // errors exit nonzero.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    match cli.command.execute() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the worker count from `--threads` or `SURROSHAP_THREADS`. Results
/// never depend on it; only wall time does.
fn init_threads(flag: Option<usize>) {
    let threads = flag.or_else(|| {
        std::env::var("SURROSHAP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads.filter(|&n| n > 0) {
        // Fails when a pool already exists; the existing pool then stays
        // in charge, which is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

#[derive(Parser)]
#[command(
    name = "surroshap",
    version,
    about = "Shapley carbon-emission allocation for power networks",
    propagate_version = true
)]
struct Cli {
    /// Worker thread cap (SURROSHAP_THREADS as fallback; default all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or validate grid system files.
    #[command(subcommand)]
    System(SystemCmd),
    /// Generate an operating-conditions scenario for a system.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Generate a surrogate training dataset.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a dispatch-emissions surrogate on a dataset.
    Train(TrainArgs),
    /// Allocate emission responsibility over a scenario.
    Allocate(AllocateArgs),
    /// Estimate the sampling and surrogate components of the error budget.
    Errors(ErrorsArgs),
    /// Check allocation behaviour: signs, perturbation responses, reshaping.
    Properties(PropertiesArgs),
    /// Print the relative L2 distance between two allocation CSVs.
    Compare(CompareArgs),
}

impl Command {
    fn execute(self) -> Result<()> {
        match self {
            Command::System(SystemCmd::Gen(args)) => cmd_system_gen(args),
            Command::System(SystemCmd::Validate(args)) => cmd_system_validate(args),
            Command::Scenario(ScenarioCmd::Gen(args)) => cmd_scenario_gen(args),
            Command::Dataset(DatasetCmd::Gen(args)) => cmd_dataset_gen(args),
            Command::Train(args) => cmd_train(args),
            Command::Allocate(args) => cmd_allocate(args),
            Command::Errors(args) => cmd_errors(args),
            Command::Properties(args) => cmd_properties(args),
            Command::Compare(args) => cmd_compare(args),
        }
    }
}

#[derive(Subcommand)]
enum SystemCmd {
    /// Synthesize a random system and write it as JSON.
    Gen(SystemGenArgs),
    /// Load a system file, report warnings and print its hash.
    Validate(SystemValidateArgs),
}

#[derive(Args)]
struct SystemGenArgs {
    /// Thermal generator count.
    #[arg(long, default_value_t = 2)]
    thermal: usize,
    /// Renewable generator count.
    #[arg(long, default_value_t = 1)]
    renewable: usize,
    /// Load count.
    #[arg(long, default_value_t = 2)]
    load: usize,
    /// Bus count.
    #[arg(long, default_value_t = 4)]
    buses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output system JSON path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SystemValidateArgs {
    /// System JSON path.
    path: PathBuf,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Draw diurnal offers, availabilities and demands for T periods.
    Gen(ScenarioGenArgs),
}

#[derive(Args)]
struct ScenarioGenArgs {
    /// System JSON path.
    #[arg(long)]
    system: PathBuf,
    /// Number of periods.
    #[arg(long, default_value_t = 24)]
    periods: usize,
    /// Value of lost load, currency per MWh shed.
    #[arg(long, default_value_t = DEFAULT_VOLL)]
    voll: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output scenario CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Sample labeled (conditions, coalition) -> emissions rows.
    Gen(DatasetGenArgs),
}

#[derive(Args)]
struct DatasetGenArgs {
    /// System JSON path.
    #[arg(long)]
    system: PathBuf,
    /// Total rows; split 70/20/10 into train/val/test.
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path (a .json sidecar is written next to it).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset path from `dataset gen`.
    #[arg(long)]
    dataset: PathBuf,
    /// Hidden layout: "4x128" (count x width) or "128,64,32".
    #[arg(long, default_value = "4x128")]
    hidden: String,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model path (a .json sidecar is written next to it).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AllocateArgs {
    /// exact, kernelshap, surroshap or stratified.
    #[arg(long)]
    method: Method,
    /// System JSON path.
    #[arg(long)]
    system: PathBuf,
    /// Scenario CSV path.
    #[arg(long)]
    scenario: PathBuf,
    /// Trained surrogate (surroshap only).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Coalition samples per period (marginals per entity for stratified).
    #[arg(long)]
    samples: Option<u64>,
    /// Budget cap for the automatic stopping rule: keep growing the sample
    /// count by 10% and stop once that moves the estimate by under 0.1%.
    #[arg(long, conflicts_with = "samples")]
    auto_samples: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output allocation CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ErrorsArgs {
    /// System JSON path.
    #[arg(long)]
    system: PathBuf,
    /// Scenario CSV path.
    #[arg(long)]
    scenario: PathBuf,
    /// Coalition sample budget per period for the convergence trajectory.
    #[arg(long)]
    samples: u64,
    /// Fraction of the budget treated as the fitted tail window.
    #[arg(long, default_value_t = 0.1)]
    tail: f64,
    /// Trained surrogate; adds the surrogate-bias component and runs the
    /// trajectory against the surrogate it budgets for.
    #[arg(long, requires = "dataset")]
    model: Option<PathBuf>,
    /// Dataset whose test split measures the conditional prediction bias.
    #[arg(long, requires = "model")]
    dataset: Option<PathBuf>,
    /// Also write the fitted tail deviations as CSV (t,m,phi,fitted).
    #[arg(long)]
    fit_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output error-budget JSON path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PropertiesArgs {
    /// System JSON path.
    #[arg(long)]
    system: PathBuf,
    /// Scenario CSV path.
    #[arg(long)]
    scenario: PathBuf,
    /// Allocation method the checks run against.
    #[arg(long, default_value = "exact")]
    method: Method,
    /// Coalition samples per period (sampling methods only).
    #[arg(long)]
    samples: Option<u64>,
    /// Trained surrogate (surroshap only).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Tolerance granted to sampled allocations; pass the total error
    /// bound. A floor of 1e-6 always applies.
    #[arg(long, default_value_t = 0.0)]
    slack: f64,
    /// Scale-factor ladder for the perturbation checks.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.75,0.5")]
    factors: Vec<f64>,
    /// Profile-reshaping step as a fraction of the entity's scale.
    #[arg(long, default_value_t = 0.05)]
    reshape_step: f64,
    /// Profile-reshaping move budget; 0 disables the search.
    #[arg(long, default_value_t = 6)]
    reshape_budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report JSON path.
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the per-check evidence rows as CSV.
    #[arg(long)]
    evidence_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Reference allocation CSV.
    #[arg(long)]
    reference: PathBuf,
    /// Allocation CSV measured against the reference.
    #[arg(long)]
    other: PathBuf,
}

// ---------------------------------------------------------------------------
// Run manifests

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    /// Input path -> SHA-256 of its bytes.
    inputs: BTreeMap<String, String>,
    /// Output path -> SHA-256 of its bytes, hashed after writing.
    outputs: BTreeMap<String, String>,
    version: String,
    /// Wall-clock only; excluded from reproducibility comparisons.
    timings_ms: BTreeMap<String, u128>,
}

struct Manifest {
    inner: RunManifest,
}

impl Manifest {
    fn new(config: serde_json::Value, seed: u64) -> Self {
        Manifest {
            inner: RunManifest {
                command: std::env::args().collect(),
                config,
                seed: Some(seed),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                timings_ms: BTreeMap::new(),
            },
        }
    }

    fn input(mut self, path: &Path) -> Result<Self> {
        self.inner
            .inputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(self)
    }

    fn output(mut self, path: &Path) -> Result<Self> {
        self.inner
            .outputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(self)
    }

    fn stage(mut self, name: &str, elapsed: Duration) -> Self {
        self.inner.timings_ms.insert(name.into(), elapsed.as_millis());
        self
    }

    /// Writes the manifest next to the primary output as
    /// `<output>.manifest.json`.
    fn write(self, primary: &Path) -> Result<()> {
        let path = suffixed(primary, ".manifest.json");
        let text = serde_json::to_string_pretty(&self.inner).expect("manifest serializes");
        std::fs::write(&path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    name.into()
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("hashing {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

// ---------------------------------------------------------------------------
// system / scenario / dataset / train

fn cmd_system_gen(args: SystemGenArgs) -> Result<()> {
    let start = Instant::now();
    let system = synthesize_system(args.thermal, args.renewable, args.load, args.buses, args.seed)?;
    save_system(&system, &args.output)?;
    let c = system.counts();
    println!(
        "wrote {}: {} thermal + {} renewable + {} load on {} buses, {} branches",
        args.output.display(),
        c.thermal,
        c.renewable,
        c.load,
        system.network.n_bus,
        system.network.branches.len()
    );
    println!("system hash {}", system_hash(&system));
    Manifest::new(
        json!({
            "thermal": args.thermal,
            "renewable": args.renewable,
            "load": args.load,
            "buses": args.buses,
        }),
        args.seed,
    )
    .output(&args.output)?
    .stage("total", start.elapsed())
    .write(&args.output)
}

fn cmd_system_validate(args: SystemValidateArgs) -> Result<()> {
    let report = load_system(&args.path)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let c = report.system.counts();
    println!(
        "{} is valid: {} thermal + {} renewable + {} load on {} buses",
        args.path.display(),
        c.thermal,
        c.renewable,
        c.load,
        report.system.network.n_bus
    );
    println!("system hash {}", system_hash(&report.system));
    Ok(())
}

fn cmd_scenario_gen(args: ScenarioGenArgs) -> Result<()> {
    let start = Instant::now();
    let system = load_warned(&args.system)?;
    let scenario = generate_scenario_with_voll(&system, args.periods, args.seed, args.voll)?;
    save_scenario(&system, &scenario, &args.output)?;
    let peak = scenario
        .periods
        .iter()
        .map(|p| p.d_max.iter().sum::<f64>())
        .fold(0.0, f64::max);
    println!(
        "wrote {}: {} periods, peak total demand {:.2} MW, voll {}",
        args.output.display(),
        scenario.periods.len(),
        peak,
        args.voll
    );
    Manifest::new(
        json!({ "periods": args.periods, "voll": args.voll }),
        args.seed,
    )
    .input(&args.system)?
    .output(&args.output)?
    .stage("total", start.elapsed())
    .write(&args.output)
}

fn cmd_dataset_gen(args: DatasetGenArgs) -> Result<()> {
    let start = Instant::now();
    let system = load_warned(&args.system)?;
    let dataset = generate_dataset(&system, args.samples, args.seed)?;
    let generated = start.elapsed();
    save_dataset(&dataset, &args.output)?;
    println!(
        "wrote {}: {} rows x {} features, split {}/{}/{} train/val/test",
        args.output.display(),
        dataset.n_samples(),
        dataset.n_features(),
        dataset.indices_of(Split::Train).len(),
        dataset.indices_of(Split::Val).len(),
        dataset.indices_of(Split::Test).len(),
    );
    Manifest::new(json!({ "samples": args.samples }), args.seed)
        .input(&args.system)?
        .output(&args.output)?
        .output(&suffixed(&args.output, ".json"))?
        .stage("generate", generated)
        .stage("total", start.elapsed())
        .write(&args.output)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let dataset = load_dataset(&args.dataset)?;
    let config = TrainConfig {
        hidden: parse_hidden(&args.hidden)?,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let train_start = Instant::now();
    let model = train(&dataset, &config)?;
    let trained = train_start.elapsed();
    for (name, split) in [("val", Split::Val), ("test", Split::Test)] {
        let m = evaluate_metrics(&model, &dataset, split)?;
        for w in &m.warnings {
            eprintln!("warning: {name}: {w}");
        }
        println!(
            "{name}: rmse {:.6}  mbe {:+.6}  r2 {:.6}  ({} rows)",
            m.rmse, m.mbe, m.r_squared, m.n_rows
        );
    }
    save_model(&model, &args.output)?;
    println!(
        "wrote {} (hash {}), trained in {:.1?}",
        args.output.display(),
        model_hash(&model),
        trained
    );
    Manifest::new(json!(config), args.seed)
        .input(&args.dataset)?
        .input(&suffixed(&args.dataset, ".json"))?
        .output(&args.output)?
        .output(&suffixed(&args.output, ".json"))?
        .stage("train", trained)
        .stage("total", start.elapsed())
        .write(&args.output)
}

/// Parses "4x128" (count x width) or an explicit "128,64" list.
fn parse_hidden(text: &str) -> Result<Vec<usize>> {
    let bad = || {
        Error::Argument(format!(
            "cannot parse hidden layout {text:?}; use \"4x128\" or \"128,64\""
        ))
    };
    if let Some((count, width)) = text.split_once(['x', 'X']) {
        let count: usize = count.trim().parse().map_err(|_| bad())?;
        let width: usize = width.trim().parse().map_err(|_| bad())?;
        if count == 0 || width == 0 {
            return Err(bad());
        }
        return Ok(vec![width; count]);
    }
    let layers = text
        .split(',')
        .map(|part| part.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() || layers.contains(&0) {
        return Err(bad());
    }
    Ok(layers)
}

fn load_warned(path: &Path) -> Result<GridSystem> {
    let report = load_system(path)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report.system)
}

// ---------------------------------------------------------------------------
// allocate

fn cmd_allocate(args: AllocateArgs) -> Result<()> {
    let start = Instant::now();
    let system = load_warned(&args.system)?;
    let scenario = load_scenario(&system, &args.scenario)?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        check_model_matches(&system, m)?;
    }
    check_method_flags(args.method, &model, args.samples.or(args.auto_samples))?;
    if args.method == Method::Stratified && args.auto_samples.is_some() {
        return Err(Error::Argument(
            "the automatic stopping rule drives the kernel estimator; \
             stratified runs take a fixed --samples"
                .into(),
        ));
    }

    let run_start = Instant::now();
    let periods = if let Some(cap) = args.auto_samples {
        auto_allocate(&system, &scenario, args.method, model.as_ref(), cap, args.seed)?
    } else {
        let spec = method_spec(args.method, &model, args.samples);
        allocate_horizon(&system, &scenario, &spec, args.seed)?.periods
    };
    let ran = run_start.elapsed();

    for a in &periods {
        println!(
            "t={} samples={} efficiency residual {:.3e}",
            a.t, a.samples, a.efficiency_residual
        );
    }
    let horizon = HorizonAllocation::from_periods(periods);
    save_allocations(&system, &horizon.periods, &args.output)?;
    println!(
        "wrote {}: {} periods x {} entities, total {:.3} tCO2eq, wall {:.2?}",
        args.output.display(),
        horizon.periods.len(),
        system.n_entities(),
        horizon.total_emissions,
        start.elapsed()
    );

    let mut manifest = Manifest::new(
        json!({
            "method": args.method.to_string(),
            "samples": args.samples,
            "auto_samples": args.auto_samples,
        }),
        args.seed,
    )
    .input(&args.system)?
    .input(&args.scenario)?;
    if let Some(path) = &args.model {
        manifest = manifest.input(path)?;
    }
    manifest
        .output(&args.output)?
        .stage("allocate", ran)
        .stage("total", start.elapsed())
        .write(&args.output)
}

/// Rejects flag combinations that contradict the method before any work
/// runs: sampling methods need a budget, exact refuses one, and only the
/// surrogate-accelerated method takes a model.
fn check_method_flags(
    method: Method,
    model: &Option<SurrogateModel>,
    budget: Option<u64>,
) -> Result<()> {
    match method {
        Method::Exact if budget.is_some() => Err(Error::Argument(
            "exact enumeration takes no sample budget; drop --samples".into(),
        )),
        Method::KernelShap | Method::Stratified | Method::SurroShap if budget.is_none() => Err(
            Error::Argument(format!("{method} needs --samples or --auto-samples")),
        ),
        Method::SurroShap if model.is_none() => {
            Err(Error::Argument("surroshap needs --model".into()))
        }
        _ if method != Method::SurroShap && model.is_some() => Err(Error::Argument(format!(
            "--model only applies to surroshap, not {method}"
        ))),
        _ => Ok(()),
    }
}

/// The fixed-budget method specification. `check_method_flags` must have
/// accepted the combination first.
fn method_spec<'a>(
    method: Method,
    model: &'a Option<SurrogateModel>,
    samples: Option<u64>,
) -> MethodSpec<'a> {
    match method {
        Method::Exact => MethodSpec::Exact,
        Method::KernelShap => MethodSpec::KernelShap {
            samples: samples.expect("checked"),
        },
        Method::Stratified => MethodSpec::Stratified {
            samples: samples.expect("checked"),
        },
        Method::SurroShap => MethodSpec::SurroShap {
            model: model.as_ref().expect("checked"),
            samples: samples.expect("checked"),
            config: SurroShapConfig::default(),
        },
    }
}

/// Relative movement below which the estimate counts as settled.
const AUTO_SETTLE_RTOL: f64 = 1e-3;
/// Sample-budget growth per settling step.
const AUTO_GROWTH: f64 = 1.1;

/// Runs the kernel estimator once per period with geometrically spaced
/// checkpoints and keeps the estimate at the first checkpoint where 10%
/// more samples moved the allocation by less than 0.1% in relative L2
/// norm. Falls back to the full cap when the rule never triggers.
fn auto_allocate(
    system: &GridSystem,
    scenario: &Scenario,
    method: Method,
    model: Option<&SurrogateModel>,
    cap: u64,
    seed: u64,
) -> Result<Vec<AllocationResult>> {
    scenario.validate(system)?;
    let checkpoints = auto_checkpoints(system.n_entities(), cap)?;
    let kernel = KernelShapConfig {
        checkpoints,
        ..KernelShapConfig::default()
    };
    let mut out = Vec::with_capacity(scenario.periods.len());
    for cond in &scenario.periods {
        let seed_t = period_seed(seed, cond.t);
        let (full, trajectory) = match method {
            Method::KernelShap => {
                let oracle = OpfOracle { system, cond };
                kernelshap_allocate_with(&oracle, cap, seed_t, &kernel)?
            }
            Method::SurroShap => {
                let config = SurroShapConfig {
                    kernel: kernel.clone(),
                    ..SurroShapConfig::default()
                };
                let model = model.expect("checked by the caller");
                surroshap_allocate_period_with(system, model, cond, cap, seed_t, &config)?
            }
            Method::Exact | Method::Stratified => {
                return Err(Error::Argument(format!(
                    "the automatic stopping rule does not apply to {method}"
                )));
            }
        };
        out.push(settle(full, &trajectory).with_period(cond.t));
    }
    Ok(out)
}

/// Even sample counts growing by 10% per step up to the cap. The floor
/// keeps the first checkpoint's moment matrix comfortably conditioned.
fn auto_checkpoints(n_entities: usize, cap: u64) -> Result<Vec<u64>> {
    let floor = even_at_least(8 * n_entities as u64).max(128);
    if cap % 2 != 0 || cap < floor + 2 {
        return Err(Error::Argument(format!(
            "the stopping rule needs an even cap of at least {}, got {cap}; \
             raise --auto-samples or use a fixed --samples",
            floor + 2
        )));
    }
    let mut points = Vec::new();
    let mut m = floor;
    while m < cap {
        points.push(m);
        m = even_at_least((m as f64 * AUTO_GROWTH).ceil() as u64).max(m + 2);
    }
    points.push(cap);
    Ok(points)
}

fn even_at_least(v: u64) -> u64 {
    v + v % 2
}

/// The first trajectory point whose 10%-smaller predecessor lies within
/// 0.1% relative L2 distance, or the full-budget estimate when none does.
fn settle(full: AllocationResult, trajectory: &Trajectory) -> AllocationResult {
    for pair in trajectory.points.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let scale = prev.norm();
        if scale == 0.0 {
            continue;
        }
        let moved = prev
            .x
            .iter()
            .zip(&next.x)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        if moved / scale < AUTO_SETTLE_RTOL {
            let mut settled = full.clone();
            settled.x = next.x.clone();
            settled.samples = next.samples;
            settled.efficiency_residual =
                next.x.iter().sum::<f64>() - settled.grand_emissions;
            return settled;
        }
    }
    full
}

// ---------------------------------------------------------------------------
// errors

fn cmd_errors(args: ErrorsArgs) -> Result<()> {
    let start = Instant::now();
    let system = load_warned(&args.system)?;
    let scenario = load_scenario(&system, &args.scenario)?;
    let eta_config = EtaConfig {
        tail_fraction: args.tail,
        ..EtaConfig::default()
    };

    let (model, epsilon) = match (&args.model, &args.dataset) {
        (Some(model_path), Some(dataset_path)) => {
            let model = load_model(model_path)?;
            check_model_matches(&system, &model)?;
            let dataset = load_dataset(dataset_path)?;
            let metrics = evaluate_metrics(&model, &dataset, Split::Test)?;
            for w in &metrics.warnings {
                eprintln!("warning: {w}");
            }
            (Some(model), epsilon_from_metrics(&metrics)?)
        }
        _ => (None, 0.0),
    };

    let mut per_period = Vec::new();
    let mut fit_csv = csv::Writer::from_writer(Vec::new());
    fit_csv
        .write_record(["t", "m", "phi", "fitted"])
        .expect("in-memory write");
    let mut eta_sum = 0.0;
    let mut norm_sum = 0.0;
    for cond in &scenario.periods {
        let seed_t = period_seed(args.seed, cond.t);
        let (alloc, estimate) = match &model {
            Some(model) => {
                let oracle = SurrogateOracle { model, cond };
                estimate_eta(&oracle, args.samples, seed_t, &eta_config)?
            }
            None => {
                let oracle = OpfOracle {
                    system: &system,
                    cond,
                };
                estimate_eta(&oracle, args.samples, seed_t, &eta_config)?
            }
        };
        let x_norm = alloc.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        eta_sum += estimate.eta;
        norm_sum += x_norm;
        for &(m, phi) in &estimate.points {
            fit_csv
                .write_record([
                    cond.t.to_string(),
                    m.to_string(),
                    phi.to_string(),
                    estimate.fit.evaluate(m).to_string(),
                ])
                .expect("in-memory write");
        }
        println!(
            "t={} eta {:.4e} ({:.4}% of the estimate norm)",
            cond.t,
            estimate.eta,
            100.0 * estimate.relative
        );
        per_period.push(json!({
            "t": cond.t,
            "eta": estimate.eta,
            "relative": estimate.relative,
            "anchor_samples": estimate.anchor_samples,
            "x_norm": x_norm,
            "fit": estimate.fit,
        }));
    }

    let t_count = scenario.periods.len() as f64;
    let budget = total_bound(eta_sum / t_count, epsilon, norm_sum / t_count);
    println!(
        "eta {:.4e}  epsilon {:.4e}  total {:.4e}  relative {:.4}%",
        budget.eta,
        budget.epsilon,
        budget.total,
        100.0 * budget.relative
    );

    let doc = json!({
        "eta": budget.eta,
        "epsilon": budget.epsilon,
        "total": budget.total,
        "x_norm": budget.x_norm,
        "relative": budget.relative,
        "samples": args.samples,
        "tail_fraction": args.tail,
        "periods": per_period,
    });
    let text = serde_json::to_string_pretty(&doc).expect("budget serializes");
    std::fs::write(&args.output, text + "\n")
        .map_err(|e| Error::io(format!("writing {}", args.output.display()), e))?;
    println!("wrote {}", args.output.display());
    if let Some(path) = &args.fit_csv {
        let bytes = fit_csv.into_inner().expect("in-memory write");
        std::fs::write(path, bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        println!("wrote {}", path.display());
    }

    let mut manifest = Manifest::new(
        json!({ "samples": args.samples, "tail": args.tail }),
        args.seed,
    )
    .input(&args.system)?
    .input(&args.scenario)?;
    if let Some(path) = &args.model {
        manifest = manifest.input(path)?;
    }
    if let Some(path) = &args.dataset {
        manifest = manifest.input(path)?;
    }
    manifest = manifest.output(&args.output)?;
    if let Some(path) = &args.fit_csv {
        manifest = manifest.output(path)?;
    }
    manifest.stage("total", start.elapsed()).write(&args.output)
}

// ---------------------------------------------------------------------------
// properties

fn cmd_properties(args: PropertiesArgs) -> Result<()> {
    let start = Instant::now();
    let system = load_warned(&args.system)?;
    let scenario = load_scenario(&system, &args.scenario)?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        check_model_matches(&system, m)?;
    }
    check_method_flags(args.method, &model, args.samples)?;
    let spec = method_spec(args.method, &model, args.samples);
    let slack = args.slack;

    let mut reports: Vec<PropertyReport> = Vec::new();

    // Sign structure, per period, merged into one report per property.
    let horizon = allocate_horizon(&system, &scenario, &spec, args.seed)?;
    let mut renewable_signs = Vec::new();
    let mut load_signs = Vec::new();
    for a in &horizon.periods {
        let (p1, p4) = check_signs(a, &system, slack)?;
        renewable_signs.push((a.t, p1));
        load_signs.push((a.t, p4));
    }
    reports.push(merge_sign_reports(renewable_signs));
    reports.push(merge_sign_reports(load_signs));

    // Perturbation responses per eligible entity.
    let thermals: Vec<usize> = entity_ids(&system, EntityKind::Thermal);
    let loads: Vec<usize> = entity_ids(&system, EntityKind::Load);
    if args.method == Method::SurroShap {
        // Scaling an emission rate changes the system itself, so the
        // surrogate trained on the original system cannot price it.
        reports.push(PropertyReport {
            property: Perturbation::BetaScale.property_id(),
            passed: true,
            vacuous: true,
            tolerance: slack.max(1e-6),
            summary: "skipped: emission-rate changes invalidate the trained surrogate".into(),
            evidence: Vec::new(),
        });
    } else {
        for &entity in &thermals {
            reports.push(perturb_and_compare(
                &system,
                &scenario,
                entity,
                Perturbation::BetaScale,
                &args.factors,
                &spec,
                args.seed,
                slack,
            )?);
        }
    }
    for &entity in &thermals {
        reports.push(perturb_and_compare(
            &system,
            &scenario,
            entity,
            Perturbation::OfferScale,
            &args.factors,
            &spec,
            args.seed,
            slack,
        )?);
    }
    for &entity in &loads {
        reports.push(perturb_and_compare(
            &system,
            &scenario,
            entity,
            Perturbation::LoadScale,
            &args.factors,
            &spec,
            args.seed,
            slack,
        )?);
    }

    // Profile reshaping needs at least two periods and a profile to move.
    if scenario.periods.len() >= 2 && args.reshape_budget > 0 {
        let candidate = entity_ids(&system, EntityKind::Renewable)
            .first()
            .copied()
            .or_else(|| loads.first().copied());
        if let Some(entity) = candidate {
            reports.push(reshape_profile_search(
                &system,
                &scenario,
                entity,
                args.reshape_step,
                args.reshape_budget,
                &spec,
                args.seed,
            )?);
        }
    }

    let mut failed = 0;
    for r in &reports {
        let status = if r.vacuous {
            "vacuous"
        } else if r.passed {
            "pass"
        } else {
            failed += 1;
            "FAIL"
        };
        println!("P{} {status}: {}", r.property, r.summary);
    }
    println!("{} checks, {failed} failed", reports.len());

    let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
    std::fs::write(&args.output, text + "\n")
        .map_err(|e| Error::io(format!("writing {}", args.output.display()), e))?;
    println!("wrote {}", args.output.display());
    if let Some(path) = &args.evidence_csv {
        std::fs::write(path, evidence_to_csv(&reports))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        println!("wrote {}", path.display());
    }

    let mut manifest = Manifest::new(
        json!({
            "method": args.method.to_string(),
            "samples": args.samples,
            "slack": args.slack,
            "factors": args.factors,
            "reshape_step": args.reshape_step,
            "reshape_budget": args.reshape_budget,
        }),
        args.seed,
    )
    .input(&args.system)?
    .input(&args.scenario)?;
    if let Some(path) = &args.model {
        manifest = manifest.input(path)?;
    }
    manifest = manifest.output(&args.output)?;
    if let Some(path) = &args.evidence_csv {
        manifest = manifest.output(path)?;
    }
    manifest.stage("total", start.elapsed()).write(&args.output)
}

fn entity_ids(system: &GridSystem, kind: EntityKind) -> Vec<usize> {
    (0..system.n_entities())
        .filter(|&i| system.kind_of(i) == kind)
        .collect()
}

/// Folds per-period sign reports into one: a pass means every period
/// passed, and each evidence row is tagged with its period.
fn merge_sign_reports(per_period: Vec<(usize, PropertyReport)>) -> PropertyReport {
    let (property, tolerance) = per_period
        .first()
        .map(|(_, r)| (r.property, r.tolerance))
        .unwrap_or((0, 0.0));
    let mut merged = PropertyReport {
        property,
        passed: true,
        vacuous: true,
        tolerance,
        summary: String::new(),
        evidence: Vec::new(),
    };
    let mut first_failure: Option<(usize, String)> = None;
    for (t, report) in per_period {
        if !report.passed && first_failure.is_none() {
            first_failure = Some((t, report.summary.clone()));
        }
        merged.passed &= report.passed;
        merged.vacuous &= report.vacuous;
        for mut e in report.evidence {
            e.change = format!("period {t}");
            merged.evidence.push(e);
        }
    }
    merged.summary = match first_failure {
        Some((t, summary)) => format!("period {t}: {summary}"),
        None if merged.vacuous => "no entities of the checked kind".into(),
        None => "all periods within tolerance".into(),
    };
    merged
}

// ---------------------------------------------------------------------------
// compare

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let reference = keyed_shares(&args.reference)?;
    let other = keyed_shares(&args.other)?;
    if !reference.keys().eq(other.keys()) {
        return Err(Error::Argument(format!(
            "{} and {} cover different (period, entity) sets and cannot be compared",
            args.reference.display(),
            args.other.display()
        )));
    }
    let mut squared_diff = 0.0;
    let mut squared_ref = 0.0;
    for (key, r) in &reference {
        let o = other[key];
        squared_diff += (o - r) * (o - r);
        squared_ref += r * r;
    }
    if squared_ref == 0.0 {
        return Err(Error::Argument(
            "the reference allocation is all zeros; relative distance is undefined".into(),
        ));
    }
    println!("relative distance {}", (squared_diff / squared_ref).sqrt());
    Ok(())
}

fn keyed_shares(path: &Path) -> Result<BTreeMap<(usize, usize), f64>> {
    let rows = load_allocation_rows(path)?;
    if rows.is_empty() {
        return Err(Error::Argument(format!(
            "{} holds no allocation rows",
            path.display()
        )));
    }
    let mut map = BTreeMap::new();
    for row in &rows {
        if map.insert((row.t, row.entity_id), row.x).is_some() {
            return Err(Error::Argument(format!(
                "{} repeats period {} entity {}",
                path.display(),
                row.t,
                row.entity_id
            )));
        }
    }
    Ok(map)
}
