//! Error types, one enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("centerline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("consecutive centerline points {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
    #[error("query point is {distance:.3} m from the centerline, corridor half-width is {half_width:.3} m")]
    OutOfCorridor { distance: f64, half_width: f64 },
    #[error("projection is ambiguous: arc lengths {s_a:.6} m and {s_b:.6} m tie within {tie:.1e} m")]
    AmbiguousProjection { s_a: f64, s_b: f64, tie: f64 },
    #[error("arc length {s:.3} m outside [0, {length:.3}]")]
    OutOfRange { s: f64, length: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("projection direction has norm {0:.6}, expected unit")]
    NonUnitDirection(f64),
    #[error("braking deceleration must be positive, got {0}")]
    NonPositiveDeceleration(f64),
    #[error("required-distance needs vk >= v0, got v0={v0} vk={vk}")]
    InvalidSpeeds { v0: f64, vk: f64 },
    #[error("quantile argument {0} outside (0, 1)")]
    OutOfDomain(f64),
    #[error("active indicator `{0}` lacks its geometric input")]
    MissingSceneField(&'static str),
    #[error("variance must be non-negative, got {0}")]
    NegativeVariance(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dynamic single-track model is singular at v={0:.3} m/s with blending disabled")]
    LowSpeedSingularity(f64),
    #[error("invalid vehicle parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum NlpError {
    #[error("invalid horizon: need n > 2k and k >= 1, got n={n}, k={k}")]
    InvalidHorizon { n: usize, k: usize },
    #[error("maneuver weights must be non-negative, got ({0}, {1})")]
    NegativeWeight(f64, f64),
    #[error("object covariance is degenerate (eigenvalue {0:.3e})")]
    DegenerateCovariance(f64),
    #[error("projected variance {0:.3e} is not positive")]
    DegenerateVariance(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("non-finite value during {context}")]
    NonFiniteEvaluation { context: String },
    #[error("solver failed: {0}")]
    Failed(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("ego left the corridor at t={t:.2} s: {source}")]
    ScenarioDiverged {
        t: f64,
        #[source]
        source: GeometryError,
    },
    #[error("scene does not define a binary maneuver pair")]
    NoManeuverPair,
    #[error("comparison requires identical scenarios, got `{0}` vs `{1}`")]
    ScenarioMismatch(String, String),
    #[error("scenario field `{field}`: {message}")]
    BadScenario { field: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
