use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkiError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: String, found: String },
    #[error("{what} is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { what: &'static str, asymmetry: f64 },
    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: &'static str },
    #[error("{what} has a negative eigenvalue {value:.3e} beyond tolerance")]
    NotPositiveSemidefinite { what: &'static str, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("inverse problem has no ground truth (u_truth and eps are both required)")]
    MissingTruth,
    #[error("data are noisy or outside ran(A) (residual {residual:.3e}); rate certificates need clean data")]
    NoisyData { residual: f64 },
    #[error("target is not in the range of the forward operator (residual {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("singular system in {0}")]
    Singular(&'static str),
    #[error("eigen-equation residual {residual:.3e} exceeds tolerance")]
    NotAnEigenpair { residual: f64 },
}

pub type Result<T> = std::result::Result<T, EkiError>;

pub(crate) fn check_square(context: &'static str, m: &nalgebra::DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(EkiError::DimensionMismatch {
            context,
            expected: format!("{n}x{n}"),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

pub(crate) fn check_len(context: &'static str, v: &nalgebra::DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(EkiError::DimensionMismatch { context, expected: n.to_string(), found: v.len().to_string() });
    }
    Ok(())
}
