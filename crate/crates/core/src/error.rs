use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cluster id {id} out of range for {n_clusters} clusters")]
    ClusterOutOfRange { id: usize, n_clusters: usize },

    #[error("empty minibatch")]
    EmptyBatch,

    #[error("invalid cluster probabilities: {0}")]
    InvalidProbs(String),

    #[error("invalid hyperparameter `{name}`: {reason}")]
    InvalidHyperParam { name: &'static str, reason: String },

    #[error("optimizer {variant} cannot {operation}")]
    WrongVariant {
        variant: &'static str,
        operation: &'static str,
    },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("pooled Hessian is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("step size {mu} exceeds the admissible maximum {mu_max}")]
    OutOfRegime { mu: f64, mu_max: f64 },

    #[error("missing report from shard {0}")]
    MissingShard(usize),

    #[error("invalid sharding plan: {0}")]
    InvalidPlan(String),

    #[error("invalid problem definition: {0}")]
    InvalidProblem(String),

    #[error("{0}")]
    Unavailable(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
