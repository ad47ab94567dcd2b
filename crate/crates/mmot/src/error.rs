//! Error taxonomy shared across the crate.
//!
//! Variants map onto the process exit codes used by the CLI: usage problems
//! (`InvalidArgument`, `Format`, `CorruptData`) exit 2, resource refusals
//! (`ResourceLimit`) exit 3, and numerical/training failures (`Numerical`,
//! `Training`) exit 4.

use thiserror::Error;

/// Unified error type for all solver, dataset, and I/O failures.
#[derive(Debug, Error)]
pub enum MmotError {
    /// Caller passed inconsistent shapes, indices, or out-of-range values.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested computation exceeds a configured memory or enumeration
    /// budget; the message names the offending requirement.
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    /// A numerical invariant was violated (non-finite intermediate, exponent
    /// beyond the representable range).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file or directory does not match the documented on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// Stored data fails its integrity hash or internal invariants.
    #[error("corrupt data: {0}")]
    CorruptData(String),

    /// Training diverged; carries the epoch and batch where it happened.
    #[error("training failure at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MmotError>;

impl MmotError {
    /// Exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmotError::InvalidArgument(_)
            | MmotError::Format(_)
            | MmotError::CorruptData(_) => 2,
            MmotError::ResourceLimit(_) => 3,
            MmotError::Numerical(_) | MmotError::Training { .. } => 4,
            MmotError::Io(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_mapping() {
        assert_eq!(MmotError::InvalidArgument("x".into()).exit_code(), 2);
        assert_eq!(MmotError::Format("x".into()).exit_code(), 2);
        assert_eq!(MmotError::CorruptData("x".into()).exit_code(), 2);
        assert_eq!(MmotError::ResourceLimit("x".into()).exit_code(), 3);
        assert_eq!(MmotError::Numerical("x".into()).exit_code(), 4);
        let t = MmotError::Training {
            epoch: 3,
            batch: 7,
            message: "diverged".into(),
        };
        assert_eq!(t.exit_code(), 4);
        assert!(t.to_string().contains("epoch 3"));
        assert!(t.to_string().contains("batch 7"));
    }
}
