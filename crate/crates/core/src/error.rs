//! Error types shared across the crate.

use thiserror::Error;

/// Coarse classification used by callers (e.g. the CLI) to map errors onto
/// exit codes without matching on every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad inputs: unknown labels, malformed configs, invalid specs.
    Validation,
    /// The data cannot support the requested estimand (empty cells,
    /// vanishing denominators, rank deficiency).
    Degeneracy,
    /// Anything else (numerical failure inside a solver, ...).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown treatment label `{0}`")]
    UnknownTreatment(String),

    #[error("unknown instrument label `{0}`")]
    UnknownInstrument(String),

    #[error("invalid type configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "unordered monotonicity violated for treatment `{treatment}`: types `{type_a}` and \
         `{type_b}` swap it between instruments `{instrument_a}` and `{instrument_b}`"
    )]
    MonotonicityViolated {
        treatment: String,
        instrument_a: String,
        instrument_b: String,
        type_a: String,
        type_b: String,
    },

    #[error("k = {k} is outside the admissible range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("the type set for ({treatment}, {k}) is empty")]
    EmptySigma { treatment: String, k: usize },

    #[error("W-set does not exist for ({t_prime}, {t}, {k})")]
    MissingWSet { t_prime: String, t: String, k: usize },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("{0}")]
    EmptyInstrumentCell(String),

    #[error("covariate cell {0} was not seen during fitting")]
    UnseenCovariateCell(String),

    #[error("series design matrix is rank deficient (degree too high for the observed support)")]
    RankDeficientDesign,

    #[error("degenerate subpopulation: |{parameter}| = {value:.3e} is below 1e-10")]
    DegenerateSubpopulation { parameter: String, value: f64 },

    #[error("missing companion estimate `{0}` for influence evaluation")]
    MissingCompanion(String),

    #[error("invalid moment specification: {0}")]
    InvalidMomentSpec(String),

    #[error("moment Jacobian is rank deficient; every parameter must move at least one moment")]
    JacobianRankDeficient,

    #[error("optimizer failed: {0}")]
    OptimizerFailed(String),

    #[error("gradient of the derived functional is not finite at the estimate")]
    NonFiniteGradient,

    #[error("{0}")]
    Estimation(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            UnknownTreatment(_) | UnknownInstrument(_) | InvalidConfig(_)
            | MonotonicityViolated { .. } | KOutOfRange { .. } | InvalidData(_)
            | InvalidMomentSpec(_) | EmptySigma { .. } => ErrorKind::Validation,
            MissingWSet { .. }
            | EmptyInstrumentCell(_)
            | UnseenCovariateCell(_)
            | RankDeficientDesign
            | DegenerateSubpopulation { .. }
            | JacobianRankDeficient => ErrorKind::Degeneracy,
            MissingCompanion(_) | OptimizerFailed(_) | NonFiniteGradient | Estimation(_) => {
                ErrorKind::Numeric
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
