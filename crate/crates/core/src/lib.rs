//! Decoupled mask/class volumetric segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense arrays, hand-written kernels with analytic gradients,
//!   a small reverse-mode tape and a finite-difference checker.
//! * [`backbone`] UNet-style encoder/decoder producing the feature pyramid.
//! * [`fsad`] full-scale deformable attention fusing the encoder skips.
//! * [`heads`] the five segmentation-head formulations and the shared
//!   transformer block.
//! * [`msshead`] shared queries propagated coarse to fine with masked
//!   cross-attention.
//! * [`matchloss`] bipartite matching and the deep-supervised set loss.
//! * [`optim`] SGD with momentum, two learning-rate groups, polynomial decay.
//! * [`harness`] phantoms, volume I/O, checkpoints, training and evaluation.

pub mod backbone;
pub mod error;
pub mod fsad;
pub mod harness;
pub mod heads;
pub mod matchloss;
pub mod model;
pub mod msshead;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
