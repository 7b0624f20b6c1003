//! Library half of the `hexagan` binary: configuration handling and the
//! subcommand bodies, kept here so integration tests can drive them.

pub mod commands;
pub mod config;

use hexagan::HexaError;

/// Process exit status for a failed command.
///
/// | code | cause |
/// |------|-------|
/// | 2 | invalid configuration |
/// | 3 | unreadable or inconsistent data |
/// | 4 | training diverged |
/// | 1 | anything else |
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|cause| cause.downcast_ref::<HexaError>())
        .map(|e| match e.root() {
            HexaError::Config(_) => 2,
            HexaError::Data(_) | HexaError::Ingest { .. } | HexaError::Csv(_) => 3,
            HexaError::Divergence { .. } => 4,
            _ => 1,
        })
        .unwrap_or(1)
}
