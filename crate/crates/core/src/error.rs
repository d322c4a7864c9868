use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is not positive definite (Cholesky pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is singular (LU pivot {pivot})")]
    Singular { pivot: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("operation `{0}` has no registered reverse-mode rule")]
    Unsupported(&'static str),

    #[error("mesh needs at least {min} nodes, got {n_u}")]
    MeshTooSmall { n_u: usize, min: usize },

    #[error("only periodic meshes are supported by this assembly routine")]
    UnsupportedBoundary,

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("point {0} lies outside the mesh domain")]
    OutOfRange(f64),

    #[error("Newton iteration diverged at step {step} after {iterations} iterations")]
    Divergence { step: usize, iterations: usize },

    #[error("filter failed at time index {step}: {source}")]
    Filter {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training failed at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}: {snapshot}")]
    NonFiniteLoss { epoch: usize, snapshot: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Filter { .. } => e,
            Error::Divergence { iterations, .. } => Error::Filter {
                step,
                source: Box::new(Error::Divergence { step, iterations }),
            },
            e => Error::Filter {
                step,
                source: Box::new(e),
            },
        }
    }
}
