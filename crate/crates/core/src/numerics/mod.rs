//! Tensors, counter-based random streams and symmetric-matrix routines.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{psd_sqrt, reconstruct, sym_eig, PSD_NEGATIVE_TOL};
pub use rng::RngStream;
pub use tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
