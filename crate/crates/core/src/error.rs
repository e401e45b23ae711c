use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or misnamed columns, malformed schema files.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell in the input could not be parsed; `row` is the 1-based data row.
    #[error("parse error at data row {row}: {msg}")]
    ParseRow { row: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("no complete cases: every record is censored")]
    NoCompleteCases,

    #[error("design matrix is singular or rank-deficient")]
    SingularDesign,

    /// A model covariate has zero variance, so its coefficient is not identifiable.
    #[error("covariate column {column} is constant; coefficient not identifiable")]
    ConstantCovariate { column: usize },

    #[error("solver did not converge in {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        /// Last iterate, for diagnostics.
        last_beta: Vec<f64>,
        /// Set when the fitted probabilities of a logistic fit separate the
        /// outcomes perfectly.
        separation: bool,
    },

    #[error("partial likelihood is monotone; coefficients diverge (max |theta| = {norm:.2})")]
    Divergence { norm: f64, last_theta: Vec<f64> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("nonpositive degrees of freedom: {complete} complete cases, {params} parameters")]
    NonpositiveDof { complete: usize, params: usize },

    #[error("could not bracket target censoring fraction {target}")]
    CalibrationBracket { target: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
