use thiserror::Error;

/// Errors produced by the `lovasz` crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("set function must vanish on the empty set, got {0}")]
    NonZeroEmptySet(f64),

    #[error("ground set of size {size} exceeds the exhaustive-check limit of {limit}")]
    GroundSetTooLarge { size: usize, limit: usize },

    #[error("label {label} is outside the class set of size {num_classes}")]
    UnknownClass { label: usize, num_classes: usize },

    #[error("proximal operator did not converge within {pieces} edge traversals")]
    ProxNotConverged { pieces: usize, partial: Vec<f64> },

    #[error("training diverged at step {step} (loss is not finite)")]
    Diverged { step: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{name}[{i}] = {} is not finite",
            values[i]
        )));
    }
    Ok(())
}
