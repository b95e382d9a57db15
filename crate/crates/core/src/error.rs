use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension unsupported: {0}")]
    DimensionUnsupported(String),
    #[error("too large for exact oracle: {0} particles (max {1})")]
    TooLarge(usize, usize),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("finite-difference step too small: {0}")]
    StepTooSmall(String),
    #[error("missing derivative data: {0}")]
    MissingDerivative(String),
    #[error("singular regression at step {step}")]
    SingularRegression { step: usize },
    #[error("admission rejected: lambda_T = {0} <= 0")]
    AdmissionRejected(f64),
    #[error("not contractive: gap increased for {consecutive} consecutive iterations (last gap {gap:e})")]
    NotContractive { consecutive: usize, gap: f64 },
    #[error("max iterations exceeded: {iters} iterations, final gap {gap:e}")]
    MaxItersExceeded { iters: usize, gap: f64 },
    #[error("CFL violation: {0}")]
    Cfl(String),
    #[error("scheme failure: {0}")]
    SchemeFailure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable kind used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid-dimension",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::DimensionUnsupported(_) => "dimension-unsupported",
            Error::TooLarge(..) => "too-large",
            Error::NumericalOverflow(_) => "numerical-overflow",
            Error::StepTooSmall(_) => "step-too-small",
            Error::MissingDerivative(_) => "missing-derivative",
            Error::SingularRegression { .. } => "singular-regression",
            Error::AdmissionRejected(_) => "admission-rejected",
            Error::NotContractive { .. } => "not-contractive",
            Error::MaxItersExceeded { .. } => "max-iters-exceeded",
            Error::Cfl(_) => "cfl-violation",
            Error::SchemeFailure(_) => "scheme-failure",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
