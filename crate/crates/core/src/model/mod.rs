//! Architectures, parameter containers, evaluation, cost accounting and checkpoints.

mod accounting;
mod arch;
pub mod checkpoint;
mod eval;
mod state;

pub use accounting::{arch_flops, arch_params, count_flops, count_params, layer_params};
pub use arch::{Architecture, FilterRef};
pub use checkpoint::{load_checkpoint, save_checkpoint, storage_bytes};
pub use eval::{dataset_loss, evaluate, predict, predict_dataset, ClassCount, Evaluation, EVAL_CHUNK};
pub use state::{build_model, LayerParams, ModelState};
