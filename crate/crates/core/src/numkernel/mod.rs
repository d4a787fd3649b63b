//! Dense tensors, a reverse-mode tape, Xavier initialization and Adam.

mod adam;
mod float;
mod init;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use float::{gemm, Float};
pub use init::{xavier_bound, xavier_init, xavier_init_with};
pub use tape::{NormStats, Normalized, Tape, Var, BN_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("infeasible state: every entry of a softmax slice is masked")]
    InfeasibleState,
    #[error("contract violation: {0}")]
    Contract(String),
}
