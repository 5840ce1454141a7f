//! N:M semi-structured activation sparsity for linear layers.
//!
//! The crate covers the whole pipeline at CPU scale: group-wise Top-K
//! selection with norm compensation, a packed N:M format, blocked sparse
//! matmul kernels (staged and fused), low-rank error compensation, toy
//! transformer stacks, and the measurement and benchmark tooling around them.

pub mod analysis;
pub mod bench;
pub mod error;
pub mod io;
pub mod lowrank;
pub mod model;
pub mod nm_format;
pub mod sparsify;
pub mod spmm;
pub mod tensor;

pub use error::{LynxError, Result};
pub use nm_format::{pack, unpack, NMPattern, PackedNM};
pub use sparsify::{sparsify_activation, topk_mask, CompensationGranularity, ScoreSpec};
pub use spmm::{fused_sparse_linear, fused_sparse_lora_linear, spmm, FusedTiming, KernelConfig};
pub use tensor::{gemm, DenseMatrix, RandomSpec};

/// Default norm-compensation epsilon.
pub const DEFAULT_EPS: f32 = 1e-8;
