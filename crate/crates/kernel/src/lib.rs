//! Desk-scale numeric reference of the visual-embedding editor.
//!
//! The editor transforms visual token embeddings conditioned on pooled
//! action-token embeddings: adaptive pooling produces a fixed-length action
//! sequence, a stack of cross-attention blocks (visual tokens as queries,
//! action tokens as keys/values) updates the visual tokens in place, and an
//! l1 objective compares the result against encoder embeddings of the
//! ground-truth edited image. Analytic gradients for every parameter are
//! verified against central finite differences.
//!
//! Everything runs in f64 on the CPU; this crate exists for correctness
//! checks and small experiments, not throughput.

mod backward;
mod diffmap;
mod forward;
mod matrix;
mod params;
mod selfcheck;

pub use backward::{backward, BlockGradients, EditorGradients};
pub use diffmap::{diff_map, roi, write_pgm, DiffMap};
pub use forward::{adaptive_pool, editor_block, editor_forward, editor_forward_cached, l1_loss};
pub use matrix::Matrix;
pub use params::{
    load_checkpoint, save_checkpoint, BlockParams, EditorConfig, EditorParams, SplitMix64,
};
pub use selfcheck::{run_selfcheck, CheckReport, SelfCheckOptions, SelfCheckReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {locus}")]
    NonFinite { locus: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
