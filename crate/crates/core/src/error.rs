use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },

    #[error("scores not identified: probability of slot {slot} is not positive")]
    Identification { slot: usize },

    #[error("expected Hessian is singular for query {query_id}")]
    SingularHessian { query_id: u64 },

    #[error("set size {k} exceeds the enumeration limit {max}")]
    EnumerationLimit { k: usize, max: usize },

    #[error("degenerate arm: no exposed {0} observations")]
    DegenerateArm(&'static str),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
