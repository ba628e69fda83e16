use alloc::string::String;

/// Errors raised by the solver library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("time {t} outside [0, {horizon}]")]
    TimeDomain { t: f64, horizon: f64 },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("non-finite gradient entry {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite rollout {rollout}")]
    NonFiniteRollout { rollout: usize },
    #[error("degenerate reference: {0}")]
    DegenerateReference(String),
    #[error("no closed form: {0}")]
    NoClosedForm(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
