//! `mmot` — command-line surface for the multimarginal entropic transport
//! library: dataset generation, the Sinkhorn and neural dual solvers, the
//! Gromov-Wasserstein alternation, and a runtime-scaling benchmark harness.
//!
//! Every solve emits a JSON run record snapshotting the resolved
//! configuration (flags take precedence over `--config` files, which take
//! precedence over built-in defaults) so any number in a report can be
//! reproduced from the record alone.
//!
//! Exit codes: 0 success, 2 usage or format errors, 3 resource refusals
//! (instances above the dense-tuple budget), 4 numerical failures, 1 I/O
//! errors.

mod bench;
mod records;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mmot::datagen::{generate, load_dataset, save_dataset, Family, GenSpec};
use mmot::emgw::{center_dataset, nemgw_alternating, EmgwConfig, PlanSource};
use mmot::error::{MmotError, Result};
use mmot::model::{CostGraph, CostKind, GraphKind, MarginalDataset, PairwiseCost};
use mmot::nemot::{
    build_l_matrices, neural_plan_discrete, save_model, train_nemot, NemotModel,
};
use mmot::neural::{Estimator, TrainConfig};
use mmot::numerics::Mat;
use mmot::sinkhorn::{
    increment_index, sinkhorn_circle, sinkhorn_full_with_options, tuple_count, SinkhornOptions,
    DEFAULT_DENSE_BUDGET_ENTRIES,
};

use records::{DatasetInfo, EpochTime, Platform, RunRecord, RunStatus, RECORD_FORMAT_VERSION};

/// Environment variable overriding the dense-tuple budget (`--budget` flags
/// still win over it).
const BUDGET_ENV_VAR: &str = "MMOT_BUDGET_ENTRIES";

#[derive(Parser)]
#[command(
    name = "mmot",
    version,
    about = "Multimarginal entropic optimal transport: solvers, estimators, benchmarks"
)]
struct Cli {
    /// Worker threads for intra-run data parallelism (0 keeps the library
    /// default). Use 1 for bit-reproducible timing-independent runs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Solve the regularized transport problem with block-ascent scaling.
    Sinkhorn(SinkhornArgs),
    /// Train the neural dual estimator and report its estimate.
    Nemot(NemotArgs),
    /// Run the Gromov-Wasserstein alternating estimator.
    Emgw(EmgwArgs),
    /// Execute a benchmark grid and fit runtime-scaling slopes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Family: uniform-cube (uniform), isotropic-gaussian (gaussian), or gmm.
    #[arg(long)]
    family: String,
    /// Samples per marginal.
    #[arg(long)]
    n: usize,
    /// Number of marginals.
    #[arg(long)]
    k: usize,
    /// Dimension of every marginal.
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Mixture components (gmm only).
    #[arg(long, default_value_t = 3)]
    gmm_components: usize,
    /// Component noise standard deviation (gmm only).
    #[arg(long, default_value_t = 0.1)]
    gmm_sigma: f64,
}

#[derive(Args)]
struct SinkhornArgs {
    /// Dataset directory (as written by `gen`).
    dataset: PathBuf,
    /// Cost graph: full, circle, or tree.
    #[arg(long)]
    graph: Option<String>,
    /// Pairwise cost: squared-euclidean or cosine-distance.
    #[arg(long)]
    cost: Option<String>,
    /// Scale factor applied to every edge cost (default 1/k).
    #[arg(long)]
    cost_normalization: Option<f64>,
    /// Regularization strength.
    #[arg(long)]
    eps: Option<f64>,
    /// Convergence tolerance on the worst marginal violation.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Dense-tuple budget; also settable via MMOT_BUDGET_ENTRIES.
    #[arg(long)]
    budget: Option<f64>,
    /// Force tuple enumeration over the matrix-elimination paths.
    #[arg(long)]
    prefer_enumeration: bool,
    /// JSON file with the same keys as the resolved config snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exit 0 on budget refusals (a skip record is emitted either way).
    #[arg(long)]
    allow_skip: bool,
    /// Write the run record here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NemotArgs {
    /// Dataset directory (as written by `gen`).
    dataset: PathBuf,
    #[arg(long)]
    graph: Option<String>,
    #[arg(long)]
    cost: Option<String>,
    #[arg(long)]
    cost_normalization: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Objective estimator: aligned or ustat-circle.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Multiplicative learning-rate decay factor.
    #[arg(long)]
    decay_factor: Option<f64>,
    /// Epochs between decays.
    #[arg(long)]
    decay_every: Option<usize>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    train_seed: Option<u64>,
    /// Row-chunk size for full-dataset evaluation.
    #[arg(long)]
    eval_chunk: Option<usize>,
    /// JSON file with the same keys as the resolved config snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Persist the trained networks to this file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the plan induced by the trained potentials on the sample atoms
    /// (budget-guarded dense enumeration; CSV).
    #[arg(long)]
    plan_out: Option<PathBuf>,
    /// With `--plan-out`: write only this pairwise plan marginal as an
    /// `n x n` CSV matrix (circle-shaped graphs).
    #[arg(long, num_args = 2, value_names = ["I", "J"], requires = "plan_out")]
    pairwise_plan: Option<Vec<usize>>,
    /// Dense-tuple budget for `--plan-out`; also MMOT_BUDGET_ENTRIES.
    #[arg(long)]
    plan_budget: Option<f64>,
    /// Write the run record here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmgwArgs {
    /// Dataset directory (as written by `gen`).
    dataset: PathBuf,
    #[arg(long)]
    eps: Option<f64>,
    /// Cost-graph shape over the marginals: circle, full, or path.
    #[arg(long)]
    edges: Option<String>,
    /// Maximum alignment steps.
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Inner transport solver: sinkhorn or nemot.
    #[arg(long)]
    inner: Option<String>,
    /// Alignment step size (default 1/64, the exact per-round minimizer).
    #[arg(long)]
    a_step_lr: Option<f64>,
    /// Stop when the alignment step norm falls below this.
    #[arg(long)]
    step_tol: Option<f64>,
    /// Inner solver convergence tolerance (sinkhorn inner).
    #[arg(long)]
    inner_tol: Option<f64>,
    /// Inner solver iteration cap (sinkhorn inner).
    #[arg(long)]
    inner_max_iter: Option<usize>,
    /// Dense-tuple budget for inner plans; also MMOT_BUDGET_ENTRIES.
    #[arg(long)]
    budget: Option<f64>,
    /// Training epochs per round (nemot inner).
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size (nemot inner).
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate (nemot inner).
    #[arg(long)]
    lr0: Option<f64>,
    /// Training seed (nemot inner).
    #[arg(long)]
    train_seed: Option<u64>,
    /// JSON file with the same keys as the resolved config snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the run record here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid file (JSON axes; see the benchmark module docs).
    #[arg(long)]
    grid: PathBuf,
    /// Override the grid's repeat count.
    #[arg(long)]
    repeats: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the flat per-cell CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Working directory for datasets and per-cell records
    /// (default: a process-scoped directory under the system temp dir).
    #[arg(long)]
    workdir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore "already initialized": only the first builder wins, which
        // can only happen in-process during tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match cli.command {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Sinkhorn(a) => cmd_sinkhorn(a),
        Cmd::Nemot(a) => cmd_nemot(a),
        Cmd::Emgw(a) => cmd_emgw(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(1, 255) as u8)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared resolution helpers
// ---------------------------------------------------------------------------

/// Prints to stdout, treating a broken pipe (e.g. piping into `head`) as a
/// quiet success instead of a panic or an error.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write as _;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(e.into()),
    }
}

fn parse_cost_kind(s: &str) -> Result<CostKind> {
    match s {
        "squared-euclidean" | "sq-euclidean" | "sq" => Ok(CostKind::SquaredEuclidean),
        "cosine-distance" | "cosine" => Ok(CostKind::CosineDistance),
        other => Err(MmotError::InvalidArgument(format!(
            "unknown cost '{other}' (expected squared-euclidean or cosine-distance)"
        ))),
    }
}

fn cost_kind_name(kind: &CostKind) -> &'static str {
    match kind {
        CostKind::SquaredEuclidean => "squared-euclidean",
        CostKind::CosineDistance => "cosine-distance",
        CostKind::Precomputed(_) => "precomputed",
    }
}

fn parse_estimator(s: &str) -> Result<Estimator> {
    match s {
        "aligned" => Ok(Estimator::Aligned),
        "ustat-circle" | "ustat" => Ok(Estimator::UstatCircle),
        other => Err(MmotError::InvalidArgument(format!(
            "unknown estimator '{other}' (expected aligned or ustat-circle)"
        ))),
    }
}

fn budget_from_env() -> Result<Option<f64>> {
    match std::env::var(BUDGET_ENV_VAR) {
        Ok(text) => {
            let v: f64 = text.parse().map_err(|_| {
                MmotError::InvalidArgument(format!(
                    "{BUDGET_ENV_VAR} must be a number, got '{text}'"
                ))
            })?;
            if v <= 0.0 || v.is_nan() {
                return Err(MmotError::InvalidArgument(format!(
                    "{BUDGET_ENV_VAR} must be positive, got {v}"
                )));
            }
            Ok(Some(v))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(MmotError::InvalidArgument(format!(
            "cannot read {BUDGET_ENV_VAR}: {e}"
        ))),
    }
}

/// Budget precedence: explicit flag, then the environment override, then the
/// library default.
fn resolve_budget(flag: Option<f64>) -> Result<f64> {
    if let Some(b) = flag {
        if b <= 0.0 || b.is_nan() {
            return Err(MmotError::InvalidArgument(format!(
                "--budget must be positive, got {b}"
            )));
        }
        return Ok(b);
    }
    Ok(budget_from_env()?.unwrap_or(DEFAULT_DENSE_BUDGET_ENTRIES))
}

fn load_config_file<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| {
                MmotError::Format(format!("cannot parse config {}: {e}", p.display()))
            })
        }
    }
}

fn load_dataset_info(dir: &Path) -> Result<(MarginalDataset, DatasetInfo)> {
    let (data, manifest) = load_dataset(dir)?;
    Ok((
        data,
        DatasetInfo {
            path: dir.display().to_string(),
            family: manifest.family,
            n: manifest.n,
            k: manifest.k,
            dims: manifest.dims,
            seed: manifest.seed,
        },
    ))
}

fn write_matrix_csv(m: &Mat, path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> Result<()> {
    let family = Family::parse(&args.family)?;
    let mut spec = GenSpec::new(family, args.n, args.k, args.d, args.seed);
    spec.gmm_components = args.gmm_components;
    spec.gmm_sigma = args.gmm_sigma;
    let data = generate(&spec)?;
    let manifest = save_dataset(&data, &args.out, family.name(), args.seed)?;
    let summary = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MmotError::Format(format!("cannot serialize manifest summary: {e}")))?;
    print_stdout(&summary)
}

// ---------------------------------------------------------------------------
// sinkhorn
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SinkhornOverlay {
    graph: Option<String>,
    cost: Option<String>,
    cost_normalization: Option<f64>,
    eps: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    budget_entries: Option<f64>,
    prefer_enumeration: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct SinkhornConfig {
    graph: String,
    cost: String,
    cost_normalization: f64,
    eps: f64,
    tol: f64,
    max_iter: usize,
    budget_entries: f64,
    prefer_enumeration: bool,
}

fn cmd_sinkhorn(args: SinkhornArgs) -> Result<()> {
    let (data, info) = load_dataset_info(&args.dataset)?;
    let overlay: SinkhornOverlay = load_config_file(args.config.as_deref())?;
    let graph_name = args
        .graph
        .or(overlay.graph)
        .unwrap_or_else(|| "full".to_string());
    let graph = CostGraph::build(GraphKind::parse(&graph_name)?, info.k)?;
    let cost_name = args
        .cost
        .or(overlay.cost)
        .unwrap_or_else(|| "squared-euclidean".to_string());
    let kind = parse_cost_kind(&cost_name)?;
    let config = SinkhornConfig {
        graph: graph.kind_name().to_string(),
        cost: cost_kind_name(&kind).to_string(),
        cost_normalization: args
            .cost_normalization
            .or(overlay.cost_normalization)
            .unwrap_or_else(|| PairwiseCost::default_normalization(info.k)),
        eps: args.eps.or(overlay.eps).unwrap_or(1.0),
        tol: args.tol.or(overlay.tol).unwrap_or(1e-6),
        max_iter: args.max_iter.or(overlay.max_iter).unwrap_or(2000),
        budget_entries: resolve_budget(args.budget.or(overlay.budget_entries))?,
        prefer_enumeration: args.prefer_enumeration
            || overlay.prefer_enumeration.unwrap_or(false),
    };
    let cost = PairwiseCost {
        kind,
        normalization: config.cost_normalization,
    };
    let mut record = RunRecord {
        format_version: RECORD_FORMAT_VERSION,
        command: "sinkhorn".to_string(),
        status: RunStatus::Failed,
        reason: None,
        dataset: info.clone(),
        config: serde_json::to_value(&config)
            .map_err(|e| MmotError::Format(format!("cannot snapshot config: {e}")))?,
        seed: info.seed,
        value: None,
        extra_values: None,
        iterations: None,
        converged: None,
        marginal_violation: None,
        wall_secs: 0.0,
        epoch_times: None,
        eval_secs: None,
        backprop_secs: None,
        overflow_events: None,
        peak_plan_entries: None,
        platform: Platform::current(),
    };
    let start = Instant::now();
    let solved = if graph.is_circle_shaped() {
        sinkhorn_circle(&data, &cost, config.eps, config.tol, config.max_iter)
    } else {
        let options = SinkhornOptions {
            budget_entries: config.budget_entries,
            prefer_enumeration: config.prefer_enumeration,
        };
        sinkhorn_full_with_options(
            &data,
            &graph,
            &cost,
            config.eps,
            config.tol,
            config.max_iter,
            &options,
        )
    };
    record.wall_secs = start.elapsed().as_secs_f64();
    match solved {
        Ok((_pots, report)) => {
            record.status = RunStatus::Success;
            record.value = Some(report.value);
            record.iterations = Some(report.iterations);
            record.converged = Some(report.converged);
            record.marginal_violation = Some(report.marginal_violation);
            record.peak_plan_entries = Some(if graph.is_circle_shaped() {
                info.k as f64 * (info.n * info.n) as f64
            } else {
                tuple_count(info.n, info.k)
            });
            record.emit(args.out.as_deref())
        }
        Err(MmotError::ResourceLimit(msg)) => {
            record.status = RunStatus::Skipped;
            record.reason = Some(format!("memory budget: {msg}"));
            record.emit(args.out.as_deref())?;
            if args.allow_skip {
                Ok(())
            } else {
                Err(MmotError::ResourceLimit(msg))
            }
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// nemot
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct NemotOverlay {
    graph: Option<String>,
    cost: Option<String>,
    cost_normalization: Option<f64>,
    eps: Option<f64>,
    estimator: Option<String>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr0: Option<f64>,
    clip_norm: Option<f64>,
    decay_factor: Option<f64>,
    decay_every: Option<usize>,
    train_seed: Option<u64>,
    eval_chunk: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct NemotConfig {
    graph: String,
    cost: String,
    cost_normalization: f64,
    eps: f64,
    train: TrainConfig,
}

struct ResolvedNemot {
    graph: CostGraph,
    cost: PairwiseCost,
    train: TrainConfig,
    snapshot: NemotConfig,
}

/// Overlays the command-line flags onto the config file onto the defaults.
fn resolve_nemot_config(args: &NemotArgs, overlay: NemotOverlay, k: usize) -> Result<ResolvedNemot> {
    let graph_name = args
        .graph
        .clone()
        .or(overlay.graph)
        .unwrap_or_else(|| "full".to_string());
    let graph = CostGraph::build(GraphKind::parse(&graph_name)?, k)?;
    let cost_name = args
        .cost
        .clone()
        .or(overlay.cost)
        .unwrap_or_else(|| "squared-euclidean".to_string());
    let kind = parse_cost_kind(&cost_name)?;
    let normalization = args
        .cost_normalization
        .or(overlay.cost_normalization)
        .unwrap_or_else(|| PairwiseCost::default_normalization(k));
    let estimator = match args.estimator.clone().or(overlay.estimator) {
        Some(s) => parse_estimator(&s)?,
        None => Estimator::Aligned,
    };
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        lr0: args.lr0.or(overlay.lr0).unwrap_or(defaults.lr0),
        clip_norm: args
            .clip_norm
            .or(overlay.clip_norm)
            .unwrap_or(defaults.clip_norm),
        decay_factor: args
            .decay_factor
            .or(overlay.decay_factor)
            .unwrap_or(defaults.decay_factor),
        decay_every: args
            .decay_every
            .or(overlay.decay_every)
            .unwrap_or(defaults.decay_every),
        batch_size: args.batch.or(overlay.batch).unwrap_or(defaults.batch_size),
        epochs: args.epochs.or(overlay.epochs).unwrap_or(defaults.epochs),
        seed: args
            .train_seed
            .or(overlay.train_seed)
            .unwrap_or(defaults.seed),
        estimator,
        eval_chunk: args
            .eval_chunk
            .or(overlay.eval_chunk)
            .unwrap_or(defaults.eval_chunk),
    };
    let cost = PairwiseCost {
        kind,
        normalization,
    };
    let snapshot = NemotConfig {
        graph: graph.kind_name().to_string(),
        cost: cost_kind_name(&cost.kind).to_string(),
        cost_normalization: normalization,
        eps: args.eps.or(overlay.eps).unwrap_or(1.0),
        train: train.clone(),
    };
    Ok(ResolvedNemot {
        graph,
        cost,
        train,
        snapshot,
    })
}

fn cmd_nemot(args: NemotArgs) -> Result<()> {
    let (data, info) = load_dataset_info(&args.dataset)?;
    let overlay: NemotOverlay = load_config_file(args.config.as_deref())?;
    let ResolvedNemot {
        graph,
        cost,
        train,
        snapshot,
    } = resolve_nemot_config(&args, overlay, info.k)?;
    let mut model = NemotModel::new(data.dims(), snapshot.eps, graph, cost, train)?;
    let start = Instant::now();
    let estimate = train_nemot(&mut model, &data)?;
    let mut peak_plan = match model.config.estimator {
        Estimator::Aligned => model.config.batch_size.min(info.n) as f64,
        Estimator::UstatCircle => {
            let b = model.config.batch_size.min(info.n) as f64;
            info.k as f64 * b * b
        }
    };
    if let Some(path) = &args.checkpoint {
        save_model(&model, &data, path)?;
    }
    if let Some(plan_path) = &args.plan_out {
        match &args.pairwise_plan {
            Some(pair) => {
                let (u, v) = (pair[0], pair[1]);
                let mats = build_l_matrices(&model, &data, model.epsilon)?;
                let (u, v) = if u < v { (u, v) } else { (v, u) };
                let marginal = mats.pairwise_marginal(u, v)?;
                write_matrix_csv(&marginal, plan_path)?;
                peak_plan = peak_plan.max(info.k as f64 * (info.n * info.n) as f64);
            }
            None => {
                let budget = resolve_budget(args.plan_budget)?;
                let plan = neural_plan_discrete(&model, &data, budget)?;
                use std::io::Write as _;
                let mut f = std::fs::File::create(plan_path)?;
                let header: Vec<String> =
                    (0..info.k).map(|i| format!("index_{i}")).collect();
                writeln!(f, "{},value", header.join(","))?;
                let mut idx = vec![0usize; info.k];
                for &p in &plan.values {
                    let cells: Vec<String> = idx.iter().map(|v| v.to_string()).collect();
                    writeln!(f, "{},{p}", cells.join(","))?;
                    increment_index(&mut idx, &plan.dims);
                }
                peak_plan = peak_plan.max(tuple_count(info.n, info.k));
            }
        }
    }
    let wall_secs = start.elapsed().as_secs_f64();
    let epoch_times: Vec<EpochTime> = estimate
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| EpochTime {
            epoch: i,
            secs: e.secs,
            eval_secs: e.eval_secs,
            backprop_secs: e.backprop_secs,
            mean_objective: e.mean_objective,
            median_objective: e.median_objective,
        })
        .collect();
    let record = RunRecord {
        format_version: RECORD_FORMAT_VERSION,
        command: "nemot".to_string(),
        status: RunStatus::Success,
        reason: None,
        dataset: info,
        config: serde_json::to_value(&snapshot)
            .map_err(|e| MmotError::Format(format!("cannot snapshot config: {e}")))?,
        seed: model.config.seed,
        value: Some(estimate.value),
        extra_values: None,
        iterations: Some(estimate.epochs.len()),
        converged: None,
        marginal_violation: None,
        wall_secs,
        eval_secs: Some(epoch_times.iter().map(|e| e.eval_secs).sum()),
        backprop_secs: Some(epoch_times.iter().map(|e| e.backprop_secs).sum()),
        epoch_times: Some(epoch_times),
        overflow_events: Some(estimate.overflow_events),
        peak_plan_entries: Some(peak_plan),
        platform: Platform::current(),
    };
    record.emit(args.out.as_deref())
}

// ---------------------------------------------------------------------------
// emgw
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EmgwOverlay {
    eps: Option<f64>,
    edges: Option<String>,
    outer_iters: Option<usize>,
    inner: Option<String>,
    a_step_lr: Option<f64>,
    step_tol: Option<f64>,
    inner_tol: Option<f64>,
    inner_max_iter: Option<usize>,
    budget_entries: Option<f64>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr0: Option<f64>,
    train_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct EmgwConfigSnapshot {
    eps: f64,
    edges: String,
    outer_iters: usize,
    inner: String,
    a_step_lr: f64,
    step_tol: f64,
    inner_tol: f64,
    inner_max_iter: usize,
    budget_entries: f64,
    train: TrainConfig,
}

fn parse_edges(s: &str, k: usize) -> Result<CostGraph> {
    match s {
        "circle" => CostGraph::build(GraphKind::Circle, k),
        "full" => CostGraph::build(GraphKind::Full, k),
        "path" | "tree" => CostGraph::build(GraphKind::Tree, k),
        other => Err(MmotError::InvalidArgument(format!(
            "unknown edge shape '{other}' (expected circle, full, or path)"
        ))),
    }
}

fn cmd_emgw(args: EmgwArgs) -> Result<()> {
    let (data, info) = load_dataset_info(&args.dataset)?;
    let overlay: EmgwOverlay = load_config_file(args.config.as_deref())?;
    let edges_name = args.edges.or(overlay.edges).unwrap_or_else(|| {
        if info.k >= 3 {
            "circle".to_string()
        } else {
            "full".to_string()
        }
    });
    let graph = parse_edges(&edges_name, info.k)?;
    let inner_name = args
        .inner
        .or(overlay.inner)
        .unwrap_or_else(|| "sinkhorn".to_string());
    let plan_source = match inner_name.as_str() {
        "sinkhorn" => PlanSource::Sinkhorn,
        "nemot" => PlanSource::Nemot,
        other => {
            return Err(MmotError::InvalidArgument(format!(
                "unknown inner solver '{other}' (expected sinkhorn or nemot)"
            )))
        }
    };
    let eps = args.eps.or(overlay.eps).unwrap_or(1.0);
    let mut config = EmgwConfig::new(eps, graph);
    if let Some(v) = args.outer_iters.or(overlay.outer_iters) {
        config.outer_iters = v;
    }
    if let Some(v) = args.a_step_lr.or(overlay.a_step_lr) {
        config.a_step_lr = v;
    }
    if let Some(v) = args.step_tol.or(overlay.step_tol) {
        config.step_tol = v;
    }
    if let Some(v) = args.inner_tol.or(overlay.inner_tol) {
        config.inner_tol = v;
    }
    if let Some(v) = args.inner_max_iter.or(overlay.inner_max_iter) {
        config.inner_max_iter = v;
    }
    config.budget_entries = resolve_budget(args.budget.or(overlay.budget_entries))?;
    config.plan_source = plan_source;
    if let Some(v) = args.epochs.or(overlay.epochs) {
        config.inner_train.epochs = v;
    }
    if let Some(v) = args.batch.or(overlay.batch) {
        config.inner_train.batch_size = v;
    }
    if let Some(v) = args.lr0.or(overlay.lr0) {
        config.inner_train.lr0 = v;
    }
    if let Some(v) = args.train_seed.or(overlay.train_seed) {
        config.inner_train.seed = v;
    }
    let snapshot = EmgwConfigSnapshot {
        eps,
        edges: edges_name,
        outer_iters: config.outer_iters,
        inner: inner_name,
        a_step_lr: config.a_step_lr,
        step_tol: config.step_tol,
        inner_tol: config.inner_tol,
        inner_max_iter: config.inner_max_iter,
        budget_entries: config.budget_entries,
        train: config.inner_train.clone(),
    };
    let start = Instant::now();
    let centered = center_dataset(&data)?;
    let estimate = nemgw_alternating(&centered, &config)?;
    let wall_secs = start.elapsed().as_secs_f64();
    let rounds: Vec<serde_json::Value> = estimate
        .rounds
        .iter()
        .map(|r| {
            serde_json::json!({
                "penalty": r.penalty,
                "inner_value": r.inner_value,
                "objective": r.objective(),
                "step_norm": r.step_norm,
            })
        })
        .collect();
    let converged = estimate.rounds.len() <= config.outer_iters
        || estimate
            .rounds
            .last()
            .is_some_and(|r| r.step_norm < config.step_tol);
    let record = RunRecord {
        format_version: RECORD_FORMAT_VERSION,
        command: "emgw".to_string(),
        status: RunStatus::Success,
        reason: None,
        dataset: info.clone(),
        config: serde_json::to_value(&snapshot)
            .map_err(|e| MmotError::Format(format!("cannot snapshot config: {e}")))?,
        seed: config.inner_train.seed,
        value: Some(estimate.total),
        extra_values: Some(serde_json::json!({
            "s1": estimate.s1,
            "penalty": estimate.penalty,
            "inner_value": estimate.inner_value,
            "a_norms": estimate.a_norms,
            "rounds": rounds,
        })),
        iterations: Some(estimate.rounds.len()),
        converged: Some(converged),
        marginal_violation: None,
        wall_secs,
        epoch_times: None,
        eval_secs: None,
        backprop_secs: None,
        overflow_events: None,
        peak_plan_entries: Some(tuple_count(info.n, info.k).min(config.budget_entries)),
        platform: Platform::current(),
    };
    record.emit(args.out.as_deref())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut spec = bench::GridSpec::load(&args.grid)?;
    if let Some(r) = args.repeats {
        if r == 0 {
            return Err(MmotError::InvalidArgument(
                "--repeats must be at least 1".into(),
            ));
        }
        spec.repeats = r;
    }
    let workdir = match args.workdir {
        Some(d) => d,
        None => std::env::temp_dir().join(format!("mmot-bench-{}", std::process::id())),
    };
    let exe = std::env::current_exe()?;
    let report = bench::run_grid(&spec, &workdir, &exe)?;
    if let Some(csv) = &args.csv {
        bench::write_csv(&report, csv)?;
    }
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| MmotError::Format(format!("cannot serialize bench report: {e}")))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, text + "\n")?;
            Ok(())
        }
        None => print_stdout(&text),
    }
}
