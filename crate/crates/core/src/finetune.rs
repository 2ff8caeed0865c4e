//! Retraining after surgery, with the three termination criteria and the
//! per-epoch trace used by the recovery statistics.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{evaluate, ModelState};
use crate::numkernel::{backward_pass, forward_pass, softmax_cross_entropy, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    /// Stop when consecutive epoch-mean training losses differ by less than this.
    pub delta_loss: f64,
    pub target_accuracy: f64,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    /// Drop the final partial batch of each epoch.
    pub drop_last: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            delta_loss: 1e-6,
            target_accuracy: 0.985,
            max_epochs: 30,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            batch_size: 100,
            seed: 0,
            drop_last: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::InvalidArgument(format!(
                "target_accuracy {} must lie in [0, 1]",
                self.target_accuracy
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.delta_loss.is_finite() || self.delta_loss < 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive and delta_loss non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    DeltaLoss,
    TargetAccuracy,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FineTuneTrace {
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<f64>,
    pub epoch_accuracies: Vec<f64>,
    pub epochs_used: usize,
    pub converged: bool,
    pub termination_reason: Option<TerminationReason>,
}

/// Progress record emitted after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressSnapshot {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_accuracy: f64,
    pub done: bool,
    pub reason: Option<TerminationReason>,
}

/// Checks target accuracy, then delta loss, then the epoch budget.
pub fn should_terminate(trace: &FineTuneTrace, config: &FineTuneConfig) -> Option<TerminationReason> {
    if let Some(&acc) = trace.epoch_accuracies.last() {
        if acc >= config.target_accuracy {
            return Some(TerminationReason::TargetAccuracy);
        }
    }
    if let [.., prev, last] = trace.epoch_losses.as_slice() {
        if (last - prev).abs() < config.delta_loss {
            return Some(TerminationReason::DeltaLoss);
        }
    }
    if trace.epochs_used >= config.max_epochs {
        return Some(TerminationReason::MaxEpochs);
    }
    None
}

/// One pass over shuffled training batches; returns the batch losses.
pub fn train_epoch(
    model: &mut ModelState,
    optimizer: &mut OptimizerState,
    train: &Dataset,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
    cancel: Option<&AtomicBool>,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    for idx in train.batches(batch_size, seed, true) {
        if drop_last && idx.len() < batch_size {
            continue;
        }
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            return Err(Error::Cancelled);
        }
        let (x, y) = train.batch(&idx)?;
        let (logits, cache) = forward_pass(model, &x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
        let grads = backward_pass(model, &cache, &dlogits)?;
        optimizer.step(&mut model.tensors_mut(), &grads.tensors())?;
        losses.push(f64::from(loss));
    }
    Ok(losses)
}

pub fn fine_tune(
    model: &ModelState,
    train: &Dataset,
    test: &Dataset,
    config: &FineTuneConfig,
) -> Result<(ModelState, FineTuneTrace)> {
    fine_tune_with(model, train, test, config, &mut |_| {}, None)
}

/// Fine-tunes a copy of `model`. `observer` sees a snapshot after each epoch;
/// setting `cancel` aborts with [`Error::Cancelled`] and leaves `model` untouched.
pub fn fine_tune_with(
    model: &ModelState,
    train: &Dataset,
    test: &Dataset,
    config: &FineTuneConfig,
    observer: &mut dyn FnMut(&ProgressSnapshot),
    cancel: Option<&AtomicBool>,
) -> Result<(ModelState, FineTuneTrace)> {
    config.validate()?;
    let mut trace = FineTuneTrace::default();
    if config.max_epochs == 0 {
        trace.termination_reason = Some(TerminationReason::MaxEpochs);
        return Ok((model.clone(), trace));
    }
    let mut tuned = model.clone();
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate);
    loop {
        let epoch = trace.epochs_used;
        let losses = train_epoch(
            &mut tuned,
            &mut optimizer,
            train,
            config.batch_size,
            config.seed.wrapping_add(epoch as u64),
            config.drop_last,
            cancel,
        )?;
        let mean = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let acc = evaluate(&tuned, test)?.accuracy;
        trace.batch_losses.extend(losses);
        trace.epoch_losses.push(mean);
        trace.epoch_accuracies.push(acc);
        trace.epochs_used += 1;
        let reason = should_terminate(&trace, config);
        observer(&ProgressSnapshot {
            epoch: trace.epochs_used,
            mean_loss: mean,
            test_accuracy: acc,
            done: reason.is_some(),
            reason,
        });
        log::info!(
            "epoch {}: loss {mean:.6}, test accuracy {:.4}",
            trace.epochs_used,
            acc
        );
        if let Some(reason) = reason {
            trace.termination_reason = Some(reason);
            trace.converged = reason != TerminationReason::MaxEpochs;
            return Ok((tuned, trace));
        }
    }
}

/// Recovery capability, loss fluctuation and recovery cost of one fine-tune.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStatistics {
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub final_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub recovery_cost: usize,
}

/// `None` for a trace with no epochs.
pub fn trace_statistics(trace: &FineTuneTrace) -> Option<TraceStatistics> {
    let final_accuracy = *trace.epoch_accuracies.last()?;
    Some(TraceStatistics {
        min_accuracy: trace.epoch_accuracies.iter().copied().fold(f64::INFINITY, f64::min),
        max_accuracy: trace.epoch_accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_accuracy,
        loss_curve: trace.batch_losses.clone(),
        recovery_cost: trace.epochs_used,
    })
}
