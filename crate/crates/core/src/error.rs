use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time step {requested} violates the CFL bound; required dt <= {required}")]
    Cfl { requested: f64, required: f64 },

    #[error("non-finite value detected at step {step}")]
    NonFinite { step: usize },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("diffusion matrix is singular or ill-conditioned at node {node:?} (condition {condition})")]
    Singular { node: Vec<f64>, condition: f64 },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
