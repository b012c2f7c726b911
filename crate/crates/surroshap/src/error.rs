//! Crate-wide error type and its mapping to process exit codes.

use thiserror::Error;

/// Everything that can go wrong across the crate.
///
/// The variants are grouped by the exit code the CLI maps them to:
/// argument and validation problems exit with 2, capacity guards with 3,
/// numeric failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input that never produced a domain object.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// A structurally well-formed input that violates model invariants.
    /// Every violation found is listed, not just the first.
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// Bad combination of caller-supplied arguments.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A requested computation exceeds a hard size guard.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// The dispatch LP is infeasible. With load shedding allowed this
    /// indicates corrupted input or a solver defect, so it carries context.
    #[error("dispatch problem infeasible ({context}): phase-1 objective {phase1_objective:.3e}")]
    Infeasible {
        context: String,
        phase1_objective: f64,
    },

    /// The LP solver failed to converge or hit its iteration limit.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A numeric routine outside the LP produced an unusable result.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The sampled normal-equation system is too ill-conditioned to invert;
    /// the estimate would be dominated by noise.
    #[error(
        "sampled system too ill-conditioned (estimate {condition:.3e} at M = {samples}); draw more samples"
    )]
    NeedsMoreSamples { condition: f64, samples: u64 },

    /// Training diverged: the loss became non-finite.
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// The trajectory fit did not converge to a usable parameter set.
    #[error("convergence fit failed: {0}")]
    Fit(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Argument(_) | Error::Io { .. } => {
                2
            }
            Error::Capacity(_) => 3,
            Error::Infeasible { .. }
            | Error::Solver(_)
            | Error::Numeric(_)
            | Error::NeedsMoreSamples { .. }
            | Error::Training { .. }
            | Error::Fit(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_group() {
        assert_eq!(Error::Argument("x".into()).exit_code(), 2);
        assert_eq!(Error::Validation(vec!["v".into()]).exit_code(), 2);
        assert_eq!(Error::Capacity("n".into()).exit_code(), 3);
        assert_eq!(Error::Solver("s".into()).exit_code(), 4);
        assert_eq!(
            Error::NeedsMoreSamples {
                condition: 1e13,
                samples: 10
            }
            .exit_code(),
            4
        );
    }

    #[test]
    fn validation_lists_every_failure() {
        let e = Error::Validation(vec!["first".into(), "second".into()]);
        let msg = e.to_string();
        assert!(msg.contains("first") && msg.contains("second"));
    }
}
