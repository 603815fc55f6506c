//! Self-supervised pretraining: flow matching and the masked-reconstruction
//! baseline. Trainers take spectrograms only, so labels are unreachable.

mod log;
mod mae;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Adam, Graph, Real, Tensor};
use crate::error::{invalid, Error, Result};
use crate::flow::{fm_loss, FlowBatch, FlowConfig};
use crate::model::{batch_tensor, FlowTransformer, Training};
use crate::signal::{Spectrogram, Split};

pub use log::{smoothed, TrainLog, TrainRecord, CSV_HEADER};
pub use mae::{mae_loss, random_mask, train_mae, MAE_FLOW_TIME};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub flow: FlowConfig,
    /// Fraction of frames hidden from the reconstruction baseline.
    pub mask_ratio: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    /// Saves `epoch-NNNN` under `checkpoint_dir` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only CSV of every record, written as training proceeds.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            flow: FlowConfig::default(),
            mask_ratio: 0.5,
            max_grad_norm: Some(1.0),
            max_steps: None,
            checkpoint_every: None,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(invalid(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(invalid("max_grad_norm must be positive"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(invalid("checkpoint_every must be >= 1"));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(invalid("checkpoint_every needs checkpoint_dir"));
        }
        self.flow.validate()
    }
}

/// Shared epoch/step bookkeeping for both objectives.
struct Loop<'c, T: Real> {
    config: &'c TrainConfig,
    kind: &'static str,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    log: TrainLog,
    step: usize,
    start: Instant,
}

impl<'c, T: Real> Loop<'c, T> {
    fn new(config: &'c TrainConfig, kind: &'static str) -> Result<Self> {
        config.validate()?;
        let log = match &config.log_path {
            Some(path) => TrainLog::with_sink(path)?,
            None => TrainLog::default(),
        };
        Ok(Self {
            config,
            kind,
            adam: Adam::new(config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            log,
            step: 0,
            start: Instant::now(),
        })
    }

    fn done(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// Finishes one optimizer step given the recorded loss.
    fn apply(
        &mut self,
        model: &mut FlowTransformer<T>,
        graph: &Graph<T>,
        loss: crate::diff::Var,
        epoch: usize,
        inputs: &Tensor<T>,
    ) -> Result<()> {
        let value = graph.value(loss).item().as_f64();
        if !value.is_finite() {
            let data = inputs.to_f64_vec();
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            return Err(Error::NonFiniteLoss {
                step: self.step,
                lr: self.config.learning_rate,
                batch_mean: mean,
                batch_std: var.sqrt(),
            });
        }
        graph.backward(loss, model.params_mut())?;
        if let Some(max) = self.config.max_grad_norm {
            model.params_mut().clip_grad_norm(T::lit(max));
        }
        self.adam.step(model.params_mut());
        let elapsed = self.elapsed();
        self.log.push(TrainRecord {
            step: self.step,
            epoch,
            split: Split::Train,
            loss: value,
            elapsed_seconds: elapsed,
        })?;
        self.step += 1;
        Ok(())
    }

    fn record_val(&mut self, epoch: usize, loss: f64) -> Result<()> {
        let elapsed = self.elapsed();
        self.log.push(TrainRecord {
            step: self.step,
            epoch,
            split: Split::Val,
            loss,
            elapsed_seconds: elapsed,
        })
    }

    fn maybe_checkpoint(&self, model: &FlowTransformer<T>, epoch: usize) -> Result<()> {
        if let (Some(every), Some(dir)) = (self.config.checkpoint_every, &self.config.checkpoint_dir) {
            if (epoch + 1).is_multiple_of(every) {
                model.save(&dir.join(format!("epoch-{:04}", epoch + 1)), self.kind)?;
            }
        }
        Ok(())
    }
}

fn check_data(train: &[Spectrogram]) -> Result<()> {
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    Ok(())
}

/// Mean of `loss_fn` over `items` in fixed chunks, weighted by chunk size.
fn chunked_mean(n: usize, chunk: usize, mut loss_fn: impl FnMut(std::ops::Range<usize>) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        total += loss_fn(start..end)? * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Held-out flow draws fixed once per run so validation losses are
/// comparable across epochs.
struct FlowValidation<T> {
    batches: Vec<FlowBatch<T>>,
    sizes: Vec<usize>,
}

impl<T: Real> FlowValidation<T> {
    fn new(val: &[Spectrogram], config: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batches = Vec::new();
        let mut sizes = Vec::new();
        for chunk in val.chunks(config.batch_size.max(32)) {
            let phi = batch_tensor(chunk)?;
            batches.push(FlowBatch::sample(phi, &config.flow, &mut rng)?);
            sizes.push(chunk.len());
        }
        Ok(Self { batches, sizes })
    }

    fn loss(&self, model: &FlowTransformer<T>) -> Result<f64> {
        let n: usize = self.sizes.iter().sum();
        let mut total = 0.0;
        for (batch, &size) in self.batches.iter().zip(&self.sizes) {
            let mut graph = Graph::new();
            let loss = fm_loss(&mut graph, model, batch)?;
            total += graph.value(loss).item().as_f64() * size as f64;
        }
        Ok(total / n as f64)
    }
}

/// Flow-matching pretraining. Each step draws a batch, one flow time and one
/// noise grid per item, and regresses the model onto the target field.
pub fn train_flow<T: Real>(
    mut model: FlowTransformer<T>,
    train: &[Spectrogram],
    val: &[Spectrogram],
    config: &TrainConfig,
) -> Result<(FlowTransformer<T>, TrainLog)> {
    let mut lp = Loop::<T>::new(config, "fgno")?;
    if config.epochs == 0 {
        return Ok((model, lp.log));
    }
    check_data(train)?;
    let validation = if val.is_empty() {
        None
    } else {
        Some(FlowValidation::new(val, config, lp.rng.next_u64())?)
    };
    for epoch in 0..config.epochs {
        for idx in lp.batches(train.len()) {
            let phi = batch_tensor(idx.iter().map(|&i| &train[i]))?;
            let batch = FlowBatch::sample(phi, &config.flow, &mut lp.rng)?;
            let mut graph = Graph::new();
            let trainer = Training {
                model: &model,
                seed: lp.rng.random(),
            };
            let loss = fm_loss(&mut graph, &trainer, &batch)?;
            lp.apply(&mut model, &graph, loss, epoch, &batch.phi)?;
            if lp.done() {
                break;
            }
        }
        if let Some(v) = &validation {
            let loss = v.loss(&model)?;
            lp.record_val(epoch, loss)?;
        }
        lp.maybe_checkpoint(&model, epoch)?;
        if lp.done() {
            break;
        }
    }
    Ok((model, lp.log))
}
