use thiserror::Error;

pub type Result<T, E = GrmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GrmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("posterior mode search did not converge after {iterations} Newton steps")]
    InnerFailure { iterations: usize },

    #[error("update of item {item} failed: {reason}")]
    ItemUpdate { item: usize, reason: String },

    #[error("item {item} is degenerate: {reason}")]
    DegenerateItem { item: usize, reason: String },

    #[error("simulation infeasible: not every item showed all categories after {attempts} attempts")]
    InfeasibleSimulation { attempts: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
