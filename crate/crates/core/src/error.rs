use thiserror::Error;

/// Failures raised anywhere in the identification pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsidError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Riccati iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("Riccati iteration diverges (pair not detectable/stabilizable): {0}")]
    NotDetectable(String),

    #[error("eigenvalue solver failed to converge")]
    EigenFailure,

    #[error("SVD failed to converge")]
    SvdFailure,

    #[error("Cholesky factorization failed: {0} is not positive definite")]
    CholeskyFailure(&'static str),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("regressors not persistently exciting: min eigenvalue {min_eig:e} below floor {floor:e}")]
    PersistenceFailure { min_eig: f64, floor: f64 },

    #[error("singular Gram matrix")]
    SingularGram,

    #[error("pseudo-inverse failed: sigma_n {sigma_n:e} below cutoff {cutoff:e}")]
    PinvFailure { sigma_n: f64, cutoff: f64 },

    #[error("trajectory carries no filter diagnostics")]
    MissingDiagnostics,

    #[error("V-bar does not dominate V: min eigenvalue of difference {0:e}")]
    NotDominated(f64),

    #[error("robustness condition violated: ||G - G_hat|| = {err_g} > sigma_n(G)/4 = {limit}")]
    RobustnessViolated { err_g: f64, limit: f64 },

    #[error("threshold scan exceeded cap {0}")]
    ScanLimit(u64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SsidError {
    fn from(e: std::io::Error) -> Self {
        SsidError::Io(e.to_string())
    }
}

impl From<csv::Error> for SsidError {
    fn from(e: csv::Error) -> Self {
        SsidError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SsidError {
    fn from(e: serde_json::Error) -> Self {
        SsidError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SsidError>;

impl SsidError {
    /// Short variant name, used as a status tag in result tables.
    pub fn kind(&self) -> &'static str {
        match self {
            SsidError::InvalidModel(_) => "InvalidModel",
            SsidError::DimensionMismatch(_) => "DimensionMismatch",
            SsidError::NonConvergence { .. } => "NonConvergence",
            SsidError::NotDetectable(_) => "NotDetectable",
            SsidError::EigenFailure => "EigenFailure",
            SsidError::SvdFailure => "SvdFailure",
            SsidError::CholeskyFailure(_) => "CholeskyFailure",
            SsidError::InsufficientSamples { .. } => "InsufficientSamples",
            SsidError::PersistenceFailure { .. } => "PersistenceFailure",
            SsidError::SingularGram => "SingularGram",
            SsidError::PinvFailure { .. } => "PinvFailure",
            SsidError::MissingDiagnostics => "MissingDiagnostics",
            SsidError::NotDominated(_) => "NotDominated",
            SsidError::RobustnessViolated { .. } => "RobustnessViolated",
            SsidError::ScanLimit(_) => "ScanLimit",
            SsidError::Config(_) => "Config",
            SsidError::Io(_) => "Io",
        }
    }

    /// Whether the error stems from bad user input rather than a numerical
    /// or runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, SsidError::Config(_) | SsidError::InvalidModel(_))
    }
}
