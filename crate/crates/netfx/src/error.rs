//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset ingestion, model fitting, and estimation.
#[derive(Error, Debug)]
pub enum Error {
    /// CSV or dataset validation failure, with a 1-based data row when known.
    #[error("parse error{}: {msg}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Parse {
        /// 1-based row of the offending record, if attributable.
        row: Option<usize>,
        msg: String,
    },

    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Treatment enumeration was requested past the configured cap.
    #[error("cluster size {requested} exceeds the enumeration cap {cap} (2^M assignments per cluster)")]
    Capacity { requested: usize, cap: usize },

    /// Inconsistent or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An iterative fit ran out of iterations.
    #[error("{what} did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        grad_norm: f64,
    },

    /// Diverging logistic coefficients, the classic symptom of perfect separation.
    #[error("perfect separation suspected while fitting {what}: coefficient norm {norm:.3e}")]
    Separation { what: String, norm: f64 },

    /// Design matrix is rank deficient.
    #[error("rank-deficient design for type {type_label}: columns {columns:?} are linearly dependent")]
    RankDeficient {
        type_label: usize,
        columns: Vec<usize>,
    },

    /// Variance requested where it cannot be computed.
    #[error("variance unavailable: {0}")]
    VarianceUnavailable(String),

    /// Estimation failure tied to a cross-fitting fold.
    #[error("nuisance fit failed on fold {fold} ({model}): {source}")]
    FoldFit {
        fold: usize,
        model: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
