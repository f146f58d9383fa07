//! Proposal-free video grounding with a learnable regression token.
//!
//! The crate is layered bottom-up:
//!
//! ```text
//! tensor      dense arrays + reverse-mode tape
//! nn          linear / layer-norm / FFN / multi-head attention blocks
//! encoder     shared feature encoder + cross-modal co-attention
//! transformer [REG] token, position table, pre-norm blocks
//! heads       boundary regression, fore/background classification,
//!             attentive-regression ablation head
//! objectives  smooth-L1 + 1-D GIoU + BCE multi-task loss
//! metrics     tIoU, R@1 IoU@m, mIoU, IoU histogram
//! data        planted-moment generator, feature files, array container
//! train       Adam, training loop, evaluation, checkpoints, gradcheck
//! ```

pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
#[cfg(test)]
mod reference;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Result, VigtError};
pub use heads::{Interval, Moment};
pub use model::{ModelConfig, Vigt};
pub use tensor::{Graph, ParamStore, Precision, Scalar, Tensor, Var};
