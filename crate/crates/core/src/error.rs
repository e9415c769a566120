use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("N = {n} is not a perfect {dim}-th power")]
    NonConformingN { n: usize, dim: usize },

    #[error("derivative order {requested} exceeds the precomputed maximum {max}")]
    OrderTooHigh { requested: usize, max: usize },

    #[error("quadrature too coarse: {nodes_per_window:.2} nodes across a 2*epsilon window, need at least {required}")]
    QuadratureTooCoarse { nodes_per_window: f64, required: usize },

    #[error("epsilon = {epsilon} too large for this domain (limit {limit})")]
    EpsilonTooLarge { epsilon: f64, limit: f64 },

    #[error("fast path requires constant coefficients")]
    NotConstantCoefficient,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("field does not provide derivative of order {order}")]
    DerivativeUnavailable { order: usize },

    #[error("state blew up at t = {t}: max |xi| = {magnitude}")]
    BlowUp { t: f64, magnitude: f64 },

    #[error("requested t = {t} beyond the validity horizon {valid_until}")]
    BeyondShock { t: f64, valid_until: f64 },

    #[error("characteristic bisection failed at x = {x}")]
    BisectionFailure { x: f64 },

    #[error("soliton tail {tail:e} at the seam exceeds {limit:e}")]
    TailTooFat { tail: f64, limit: f64 },

    #[error("degenerate data for rate fit: {reason}")]
    DegenerateData { reason: String },

    #[error("bound violated at N = {n}, t = {t}: error {error:e} > bound {bound:e}")]
    BoundViolated { n: usize, t: f64, error: f64, bound: f64 },

    #[error("time step {dt} does not divide the output interval {interval}")]
    StepMismatch { dt: f64, interval: f64 },

    #[error("no stored snapshot at t = {t}")]
    MissingSnapshot { t: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
