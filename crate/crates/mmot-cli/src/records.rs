//! Structured run artifacts: every subcommand emits one JSON record that
//! snapshots the resolved configuration, the result, and enough timing and
//! platform detail to audit or re-run it.

use std::io::Write;
use std::path::Path;

use mmot::error::{MmotError, Result};
use serde::{Deserialize, Serialize};

/// Current record format version.
pub const RECORD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Success,
    /// Refused up front (for example by the dense-tuple budget); the reason
    /// names the offending quantity.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: String,
    pub family: String,
    pub n: usize,
    pub k: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTime {
    pub epoch: usize,
    pub secs: f64,
    /// Objective-evaluation part (forward passes and exponential terms).
    pub eval_secs: f64,
    /// Gradient part (backward passes, clipping, optimizer updates).
    pub backprop_secs: f64,
    pub mean_objective: f64,
    pub median_objective: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Platform {
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Platform {
    pub fn current() -> Self {
        Platform {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
        }
    }
}

/// One run of one subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub command: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub dataset: DatasetInfo,
    /// Fully resolved configuration (flags over config file over defaults).
    pub config: serde_json::Value,
    /// Training / solver seed used for this run.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Command-specific extras (per-round traces, norms, decompositions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_values: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal_violation: Option<f64>,
    /// Wall-clock seconds of the solve itself (dataset loading excluded).
    pub wall_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_times: Option<Vec<EpochTime>>,
    /// Total objective-evaluation seconds across epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_secs: Option<f64>,
    /// Total gradient seconds across epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backprop_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overflow_events: Option<u64>,
    /// Largest plan-like tensor materialized during the run, in entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_plan_entries: Option<f64>,
    pub platform: Platform,
}

impl RunRecord {
    /// Checks the structural invariants before the record leaves the
    /// process: nonnegative times everywhere and a finite value on success.
    pub fn validate(&self) -> Result<()> {
        if self.wall_secs < 0.0 || !self.wall_secs.is_finite() {
            return Err(MmotError::Numerical(format!(
                "run record has invalid wall time {}",
                self.wall_secs
            )));
        }
        for v in [self.eval_secs, self.backprop_secs].into_iter().flatten() {
            if v < 0.0 || !v.is_finite() {
                return Err(MmotError::Numerical(format!(
                    "run record has invalid timing {v}"
                )));
            }
        }
        if let Some(times) = &self.epoch_times {
            for e in times {
                if e.secs < 0.0 || e.eval_secs < 0.0 || e.backprop_secs < 0.0 {
                    return Err(MmotError::Numerical(format!(
                        "epoch {} reported a negative time",
                        e.epoch
                    )));
                }
            }
        }
        if self.status == RunStatus::Success {
            match self.value {
                Some(v) if v.is_finite() => {}
                other => {
                    return Err(MmotError::Numerical(format!(
                        "successful run must report a finite value, got {other:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Validates and writes the record as pretty JSON to `out`, or to stdout
    /// when no path is given.
    pub fn emit(&self, out: Option<&Path>) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| MmotError::Format(format!("cannot serialize run record: {e}")))?;
        match out {
            Some(path) => {
                std::fs::write(path, text + "\n")?;
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                match writeln!(stdout, "{text}") {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }
}

/// Reads a record back from disk.
pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| MmotError::Format(format!("cannot parse run record {}: {e}", path.display())))
}
