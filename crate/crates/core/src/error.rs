use thiserror::Error;

/// Errors raised by the diffusion laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum VdmError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimension { expected: Vec<usize>, got: Vec<usize> },

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("times out of order: s={s} must be < t={t}")]
    Ordering { s: f64, t: f64 },

    #[error("schedule is not monotone: transition variance {sigma2_ts} <= 0 between s={s} and t={t}")]
    ScheduleMonotonicity { s: f64, t: f64, sigma2_ts: f64 },

    #[error("endpoint singularity: {what} = {value:e} is below the division threshold")]
    EndpointSingularity { what: &'static str, value: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("variance-preserving schedule infeasible: sigma2={sigma2} >= data variance {data_variance}")]
    InfeasibleVp { sigma2: f64, data_variance: f64 },

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("invalid importance distribution: p(lambda)=0 at lambda={lambda} where the integrand is nonzero")]
    InvalidImportance { lambda: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("grid does not cover the posterior: edge mass {edge_mass:e}")]
    Coverage { edge_mass: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}; last finite loss {last_finite:?}")]
    Diverged { step: usize, last_finite: Option<f64> },
}

pub type Result<T, E = VdmError> = std::result::Result<T, E>;
