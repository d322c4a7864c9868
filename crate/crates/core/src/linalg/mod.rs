//! Dense linear algebra and the reverse-mode tape built on it.

mod decomp;
mod matrix;
mod params;
pub mod tape;

pub use decomp::{psd_factor, symmetric_eigenvalues, Cholesky, Lu, CHOLESKY_JITTER};
pub use matrix::Matrix;
pub use params::{gradient, ParamSet, ParamVars};
pub use tape::{CustomOp, Gradients, SpdFactor, Tape, Var};

pub(crate) use matrix::gemm_into;
