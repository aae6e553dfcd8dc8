use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty measure: at least one particle is required")]
    EmptyMeasure,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("particle {0} has zero weight; barycenter undefined")]
    ZeroWeightParticle(usize),
    #[error("brute-force oracle supports n <= {max} particles, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("solver did not expose dual potentials")]
    NoDuals,
    #[error("time grid error: {0}")]
    TimeGrid(String),
    #[error("simulation blow-up at t = {time}: particle {particle} reached |x| = {radius:e} (guard {guard:e})")]
    BlowUp {
        time: f64,
        particle: usize,
        radius: f64,
        guard: f64,
    },
    #[error("terminal power rule undefined: integral {integral} with exponent {power}")]
    PowerSingularity { integral: f64, power: f64 },
    #[error("contractivity ratio undefined: initial measures coincide (W1 = 0)")]
    CoincidentMeasures,
    #[error("needle error: {0}")]
    Needle(String),
    #[error("scenario error(s):\n  - {}", .0.join("\n  - "))]
    Scenario(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;
