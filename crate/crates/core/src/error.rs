use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("scale factors must be finite and strictly positive, got {0:?}")]
    InvalidScale([f64; 3]),
    #[error("singular input: smallest singular value {smallest:e} vs largest {largest:e}")]
    SingularInput { smallest: f64, largest: f64 },

    #[error("streams overlap for {overlap:.3} s, need at least {required:.3} s")]
    InsufficientOverlap { overlap: f64, required: f64 },
    #[error("rate-norm sequence is flat (variance {variance:e}); cannot correlate")]
    FlatSignal { variance: f64 },
    #[error("query time {t} outside stream range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("stream has {got} samples, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("invalid stream: {0}")]
    InvalidStream(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("null vector has mixed signs: {0:?}")]
    IndefiniteNullspace(Vec<f64>),
    #[error("non-positive squared scale factor: {0:?}")]
    NonPositiveScale([f64; 3]),
    #[error("scale ratio {0} is not positive")]
    DegenerateRatio(f64),
    #[error("global scale is not observable on {0} for this configuration")]
    UnobservableScale(String),

    #[error("Gauss-Newton normal equations are singular")]
    SingularNormalEquations,
    #[error("scale-error system is singular (degenerate placement)")]
    SingularPhi,
    #[error("no convergence after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error("information matrix is singular; rates do not span 3 dof")]
    SingularInformation,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
