//! Iterative structured pruning of small CNNs.
//!
//! Filters are scored with a first-order Taylor estimate of the loss change
//! their removal causes, ranked across several reshuffled scoring runs to
//! measure rank instability, physically removed, and the network fine-tuned.
//! Every intermediate model lives in a [`tree::PruneTree`].

pub mod criteria;
pub mod datasets;
mod error;
pub mod finetune;
pub mod instances;
pub mod model;
pub mod numkernel;
pub mod pruner;
pub mod tree;
pub mod vis;

pub use error::{Error, Result};
pub use model::{Architecture, FilterRef, ModelState};
pub use numkernel::{LayerSpec, Tensor};
