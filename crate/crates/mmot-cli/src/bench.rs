//! Runtime-scaling benchmark harness.
//!
//! A grid file lists axes (`n`, `k`, `d`, `batch`, `graph`, `solver`); the
//! harness takes their product, runs every cell in its own subprocess with a
//! wall-clock timeout, and writes a JSON report plus a flat CSV with one row
//! per cell. For each solver series it fits the log-log slope of runtime
//! against `n`. Cells run sequentially so timings never contend with each
//! other.
//!
//! The CSV columns are stable:
//! `solver,graph,n,k,d,batch,repeat,status,reason,value,wall_secs,iterations`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use mmot::datagen::{generate, save_dataset, Family, GenSpec};
use mmot::error::{MmotError, Result};
use serde::{Deserialize, Serialize};

use crate::records::{read_record, RunStatus};

/// Current report format version.
pub const BENCH_FORMAT_VERSION: u32 = 1;

fn default_family() -> String {
    "uniform-cube".to_string()
}

fn default_eps() -> f64 {
    1.0
}

fn default_batch() -> Vec<usize> {
    vec![64]
}

fn default_graph() -> Vec<String> {
    vec!["full".to_string()]
}

fn default_repeats() -> usize {
    1
}

fn default_timeout() -> f64 {
    600.0
}

fn default_sinkhorn_tol() -> f64 {
    1e-6
}

fn default_sinkhorn_max_iter() -> usize {
    1000
}

fn default_nemot_epochs() -> usize {
    3
}

/// Benchmark grid: axes plus solver knobs shared by every cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Dataset seed; datasets are shared between cells with equal shapes.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub d: Vec<usize>,
    /// Mini-batch axis; only `nemot` cells consume it.
    #[serde(default = "default_batch")]
    pub batch: Vec<usize>,
    #[serde(default = "default_graph")]
    pub graph: Vec<String>,
    /// Solvers to run: `sinkhorn` and/or `nemot`.
    #[serde(default)]
    pub solver: Vec<String>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Per-cell wall-clock limit in seconds.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub cost: Option<String>,
    #[serde(default)]
    pub cost_normalization: Option<f64>,
    #[serde(default = "default_sinkhorn_tol")]
    pub sinkhorn_tol: f64,
    #[serde(default = "default_sinkhorn_max_iter")]
    pub sinkhorn_max_iter: usize,
    /// Dense-tuple budget passed to sinkhorn cells; the library default when
    /// absent.
    #[serde(default)]
    pub budget_entries: Option<f64>,
    #[serde(default = "default_nemot_epochs")]
    pub nemot_epochs: usize,
    #[serde(default)]
    pub nemot_lr0: Option<f64>,
    #[serde(default)]
    pub nemot_estimator: Option<String>,
    #[serde(default)]
    pub nemot_train_seed: Option<u64>,
}

/// One grid cell (one repeat of one axis combination).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCell {
    pub solver: String,
    pub graph: String,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// 0 for solvers that take no mini-batch.
    pub batch: usize,
    pub repeat: usize,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Solver-reported wall seconds (subprocess startup excluded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_secs: Option<f64>,
    /// Parent-measured seconds including process startup.
    pub harness_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_path: Option<String>,
}

/// Least-squares slope of `ln t` against `ln n` for one solver series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    pub solver: String,
    pub graph: String,
    pub k: usize,
    pub d: usize,
    pub batch: usize,
    /// `(n, mean wall seconds over repeats)` per successful grid point.
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub spec: GridSpec,
    pub cells: Vec<BenchCell>,
    pub slopes: Vec<SlopeFit>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<GridSpec> {
        let text = std::fs::read_to_string(path)?;
        let spec: GridSpec = serde_json::from_str(&text)
            .map_err(|e| MmotError::Format(format!("cannot parse grid {}: {e}", path.display())))?;
        for s in &spec.solver {
            if s != "sinkhorn" && s != "nemot" {
                return Err(MmotError::InvalidArgument(format!(
                    "unknown solver '{s}' in grid (expected sinkhorn or nemot)"
                )));
            }
        }
        if spec.timeout_secs <= 0.0 || spec.timeout_secs.is_nan() {
            return Err(MmotError::InvalidArgument(
                "grid timeout_secs must be positive".into(),
            ));
        }
        if spec.repeats == 0 {
            return Err(MmotError::InvalidArgument(
                "grid repeats must be at least 1".into(),
            ));
        }
        Ok(spec)
    }
}

struct CellKey {
    solver: String,
    graph: String,
    n: usize,
    k: usize,
    d: usize,
    batch: usize,
}

fn build_cells(spec: &GridSpec) -> Vec<CellKey> {
    let mut cells = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for solver in &spec.solver {
        for graph in &spec.graph {
            for &n in &spec.n {
                for &k in &spec.k {
                    for &d in &spec.d {
                        for &b in &spec.batch {
                            // Sinkhorn has no batch axis; collapse it so the
                            // same solve is not repeated per batch value.
                            let batch = if solver == "sinkhorn" { 0 } else { b };
                            if seen.insert((solver.clone(), graph.clone(), n, k, d, batch)) {
                                cells.push(CellKey {
                                    solver: solver.clone(),
                                    graph: graph.clone(),
                                    n,
                                    k,
                                    d,
                                    batch,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

fn dataset_for(
    spec: &GridSpec,
    workdir: &Path,
    cache: &mut HashMap<(usize, usize, usize), PathBuf>,
    n: usize,
    k: usize,
    d: usize,
) -> Result<PathBuf> {
    if let Some(p) = cache.get(&(n, k, d)) {
        return Ok(p.clone());
    }
    let family = Family::parse(&spec.family)?;
    let dir = workdir
        .join("data")
        .join(format!("{}-n{n}-k{k}-d{d}-s{}", family.name(), spec.seed));
    let gen_spec = GenSpec::new(family, n, k, d, spec.seed);
    let data = generate(&gen_spec)?;
    save_dataset(&data, &dir, family.name(), spec.seed)?;
    cache.insert((n, k, d), dir.clone());
    Ok(dir)
}

fn format_f64(v: f64) -> String {
    format!("{v}")
}

fn child_args(spec: &GridSpec, cell: &CellKey, data_dir: &Path, record: &Path) -> Vec<String> {
    let mut args = vec![
        cell.solver.clone(),
        data_dir.display().to_string(),
        "--graph".into(),
        cell.graph.clone(),
        "--eps".into(),
        format_f64(spec.eps),
        "--out".into(),
        record.display().to_string(),
    ];
    if let Some(c) = &spec.cost {
        args.extend(["--cost".into(), c.clone()]);
    }
    if let Some(nm) = spec.cost_normalization {
        args.extend(["--cost-normalization".into(), format_f64(nm)]);
    }
    match cell.solver.as_str() {
        "sinkhorn" => {
            args.extend([
                "--tol".into(),
                format_f64(spec.sinkhorn_tol),
                "--max-iter".into(),
                spec.sinkhorn_max_iter.to_string(),
                "--allow-skip".into(),
            ]);
            if let Some(b) = spec.budget_entries {
                args.extend(["--budget".into(), format_f64(b)]);
            }
        }
        "nemot" => {
            args.extend([
                "--epochs".into(),
                spec.nemot_epochs.to_string(),
                "--batch".into(),
                cell.batch.to_string(),
            ]);
            if let Some(lr) = spec.nemot_lr0 {
                args.extend(["--lr0".into(), format_f64(lr)]);
            }
            if let Some(e) = &spec.nemot_estimator {
                args.extend(["--estimator".into(), e.clone()]);
            }
            if let Some(s) = spec.nemot_train_seed {
                args.extend(["--train-seed".into(), s.to_string()]);
            }
        }
        _ => unreachable!("solvers validated at load"),
    }
    args
}

/// Runs the child to completion or the deadline, then reaps it either way.
fn run_with_timeout(mut cmd: Command, timeout: Duration) -> Result<(Option<i32>, bool, f64)> {
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    loop {
        match child.try_wait()? {
            Some(status) => {
                return Ok((status.code(), false, start.elapsed().as_secs_f64()));
            }
            None => {
                if start.elapsed() >= timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Ok((None, true, start.elapsed().as_secs_f64()));
                }
                std::thread::sleep(Duration::from_millis(15));
            }
        }
    }
}

fn tail_of_file(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let trimmed = text.trim();
    match trimmed.rfind('\n') {
        Some(pos) => trimmed[pos + 1..].to_string(),
        None => trimmed.to_string(),
    }
}

/// `(solver, graph, k, d, batch)` — everything that stays fixed along one
/// runtime-vs-n series.
type SeriesKey = (String, String, usize, usize, usize);

fn fit_slopes(cells: &[BenchCell]) -> Vec<SlopeFit> {
    // Group successful cells by everything except n and the repeat index.
    let mut groups: BTreeMap<SeriesKey, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for c in cells {
        if c.status != RunStatus::Success {
            continue;
        }
        let Some(t) = c.wall_secs else { continue };
        groups
            .entry((c.solver.clone(), c.graph.clone(), c.k, c.d, c.batch))
            .or_default()
            .entry(c.n)
            .or_default()
            .push(t);
    }
    let mut fits = Vec::new();
    for ((solver, graph, k, d, batch), by_n) in groups {
        if by_n.len() < 2 {
            continue;
        }
        let points: Vec<(usize, f64)> = by_n
            .into_iter()
            .map(|(n, ts)| (n, ts.iter().sum::<f64>() / ts.len() as f64))
            .collect();
        let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
        let ys: Vec<f64> = points
            .iter()
            .map(|&(_, t)| t.max(1e-9).ln())
            .collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xs.iter().zip(ys.iter()) {
            num += (x - mx) * (y - my);
            den += (x - mx) * (x - mx);
        }
        fits.push(SlopeFit {
            solver,
            graph,
            k,
            d,
            batch,
            points,
            slope: num / den,
        });
    }
    fits
}

/// Executes the whole grid sequentially and assembles the report.
pub fn run_grid(spec: &GridSpec, workdir: &Path, exe: &Path) -> Result<BenchReport> {
    std::fs::create_dir_all(workdir.join("records"))?;
    let cells = build_cells(spec);
    let timeout = Duration::from_secs_f64(spec.timeout_secs);
    let mut cache = HashMap::new();
    let mut results = Vec::new();
    let total = cells.len() * spec.repeats;
    let mut done = 0usize;
    for (ci, cell) in cells.iter().enumerate() {
        for rep in 0..spec.repeats {
            done += 1;
            let data_dir = dataset_for(spec, workdir, &mut cache, cell.n, cell.k, cell.d)?;
            let record_path = workdir.join("records").join(format!("cell{ci}-rep{rep}.json"));
            let stderr_path = workdir.join("records").join(format!("cell{ci}-rep{rep}.err"));
            let args = child_args(spec, cell, &data_dir, &record_path);
            let mut cmd = Command::new(exe);
            cmd.args(&args)
                .stdout(Stdio::null())
                .stderr(Stdio::from(std::fs::File::create(&stderr_path)?));
            let (code, timed_out, harness_secs) = run_with_timeout(cmd, timeout)?;
            let mut out = BenchCell {
                solver: cell.solver.clone(),
                graph: cell.graph.clone(),
                n: cell.n,
                k: cell.k,
                d: cell.d,
                batch: cell.batch,
                repeat: rep,
                status: RunStatus::Failed,
                reason: None,
                value: None,
                wall_secs: None,
                harness_secs,
                iterations: None,
                record_path: Some(record_path.display().to_string()),
            };
            if timed_out {
                out.reason = Some(format!(
                    "timeout after {:.1}s (limit {:.1}s)",
                    harness_secs, spec.timeout_secs
                ));
            } else if code == Some(0) {
                match read_record(&record_path) {
                    Ok(rec) => {
                        out.status = rec.status;
                        out.reason = rec.reason;
                        out.value = rec.value;
                        out.wall_secs = Some(rec.wall_secs);
                        out.iterations = rec.iterations;
                    }
                    Err(e) => {
                        out.reason = Some(format!("child succeeded but record unreadable: {e}"));
                    }
                }
            } else {
                out.reason = Some(format!(
                    "exit code {}: {}",
                    code.map_or_else(|| "none".to_string(), |c| c.to_string()),
                    tail_of_file(&stderr_path)
                ));
            }
            eprintln!(
                "[bench {done}/{total}] {} {} n={} k={} d={} rep={} -> {:?} ({:.2}s)",
                cell.solver, cell.graph, cell.n, cell.k, cell.d, rep, out.status, harness_secs
            );
            results.push(out);
        }
    }
    let slopes = fit_slopes(&results);
    Ok(BenchReport {
        format_version: BENCH_FORMAT_VERSION,
        spec: spec.clone(),
        cells: results,
        slopes,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes the flat per-cell table. Columns are stable; see the module doc.
pub fn write_csv(report: &BenchReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "solver,graph,n,k,d,batch,repeat,status,reason,value,wall_secs,iterations"
    )?;
    for c in &report.cells {
        let status = match c.status {
            RunStatus::Success => "success",
            RunStatus::Skipped => "skipped",
            RunStatus::Failed => "failed",
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&c.solver),
            csv_field(&c.graph),
            c.n,
            c.k,
            c.d,
            c.batch,
            c.repeat,
            status,
            csv_field(c.reason.as_deref().unwrap_or("")),
            c.value.map(|v| format!("{v}")).unwrap_or_default(),
            c.wall_secs.map(|v| format!("{v}")).unwrap_or_default(),
            c.iterations.map(|v| v.to_string()).unwrap_or_default(),
        )?;
    }
    Ok(())
}
