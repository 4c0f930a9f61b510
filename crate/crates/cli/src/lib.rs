//! Command-line workflows: synthetic data, training, estimation,
//! evaluation and plotting, driven by one TOML run configuration.

pub mod config;
pub mod pipeline;
pub mod plot;

use posediff_core::Error;

/// Process exit status for a failed command: 2 when an internal invariant
/// broke, 1 for everything the user can fix.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let internal = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(
                Error::Shape(_)
                    | Error::DegenerateTimestamp { .. }
                    | Error::ScheduleInconsistency { .. }
                    | Error::Divergence(_)
                    | Error::UnsupportedOp(_)
            )
        )
    });
    if internal {
        2
    } else {
        1
    }
}
