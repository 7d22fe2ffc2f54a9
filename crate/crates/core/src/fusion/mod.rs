//! Equivalence-preserving aggressive fusion of residual blocks.
//!
//! A block `x → conv1 → bn1 → relu → conv2 → bn2 → add(x) → relu` is
//! rewritten so that the shortcut travels *through* the convolutions:
//!
//! * conv1 gains `C` passthrough filters built from identity weights
//!   (channel-wise fusion); bn1 gains matching identity channels.
//! * conv2 gains `C` input channels whose weights add the passthrough back
//!   (filter-wise fusion), pre-divided by bn2's scale so bn2 leaves the
//!   shortcut untouched. A 1×1 projection shortcut is folded with its BN
//!   and zero-padded to conv2's kernel size instead of using identities.
//! * The add node and any shortcut operators disappear.
//!
//! The passthrough crosses the block's internal relu, so the rewrite is
//! only exact when the block input is non-negative; see
//! [`is_provably_nonneg`].

mod pattern;
mod report;
mod rewrite;
mod weights;

use thiserror::Error;

use crate::graph::GraphError;
use crate::tensor::TensorError;

pub use pattern::{
    block_tag, find_residual_blocks, is_provably_nonneg, parse_block_tag, BlockKind, BlockMatch,
};
pub use report::{FusedBlock, FusedConv, FusionOption, FusionReport, Provenance, SkippedBlock};
pub use rewrite::{fold_bn, fuse, fuse_basic_block, fuse_projection_block, FuseOptions};
pub use weights::{
    adjust_identity_for_bn, make_identity_weights, pad_conv_weights, unit_variance, OMEGA_MIN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("node `{node}` has kernel {kernel:?}; fusion needs equal odd kernel sizes")]
    NonOddKernel {
        node: String,
        kernel: (usize, usize),
    },
    #[error("batch norm `{node}` channel {channel} has |omega| = {omega:e}, too small to invert")]
    NearZeroOmega {
        node: String,
        channel: usize,
        omega: f64,
    },
    #[error("block `{block}` cannot be fused: {detail}")]
    PatternMismatch { block: String, detail: String },
    #[error("block `{block}`: shortcut stride {shortcut:?} differs from conv1 stride {conv1:?}")]
    StrideMismatch {
        block: String,
        conv1: (usize, usize),
        shortcut: (usize, usize),
    },
    #[error("batch norm `{0}` is not directly preceded by a convolution it alone reads")]
    BnWithoutPrecedingConv(String),
    #[error("invalid fusion option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
