use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("negative probability {0}")]
    NegativeProbability(f64),
    #[error("probabilities carry zero total mass")]
    ZeroMass,
    #[error("empty support")]
    EmptySupport,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("probabilities sum to {0}, expected 1")]
    ProbabilityNotNormalized(f64),

    #[error("placebo stratum {stratum} holds {size} menu(s); need at least 2")]
    StrataTooFine { stratum: usize, size: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite at epoch {epoch} (learning rate too high?)")]
    NonFiniteLoss { epoch: usize },

    #[error("menu {0} has no observed choice rate")]
    MissingChoiceRate(String),
    #[error("need at least {needed} menus, got {got}")]
    TooFewMenus { needed: usize, got: usize },
    #[error("no two-sided menus")]
    NoTwoSidedMenus,
    #[error("second-stage design has rank {rank}, need {needed}")]
    RankDeficientDesign { rank: usize, needed: usize },
    #[error("variance matrix is singular even after ridge")]
    SingularVariance,
    #[error("cell {cell} reached rank {achieved}, needed {needed}")]
    InfeasibleCell {
        cell: usize,
        achieved: usize,
        needed: usize,
    },

    #[error("simplex weights expected (sum {0})")]
    NotSimplex(f64),
    #[error("completeness denominator is not positive: baseline {baseline}, flexible {flexible}")]
    DegenerateDenominator { baseline: f64, flexible: f64 },
    #[error("trial-level records are missing")]
    MissingTrials,
    #[error("features were scaled by {features} but the model was frozen with {model}")]
    RescaleMismatch { model: f64, features: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unsupported document version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Errors caused by malformed user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::LengthMismatch(_)
                | Error::NegativeProbability(_)
                | Error::ZeroMass
                | Error::EmptySupport
                | Error::NonFinite(_)
                | Error::ProbabilityNotNormalized(_)
                | Error::MissingChoiceRate(_)
                | Error::ParseError { .. }
                | Error::SchemaViolation(_)
                | Error::UnsupportedVersion(_)
                | Error::InvalidArgument(_)
                | Error::RescaleMismatch { .. }
                | Error::MissingTrials
                | Error::Toml(_)
        )
    }
}
