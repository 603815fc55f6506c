use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_data, chunked_mean, Loop, TrainConfig, TrainLog};
use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{invalid, Result};
use crate::model::{batch_tensor, FlowTransformer, Mode};
use crate::signal::Spectrogram;

/// The reconstruction baseline has no flow time; the shared backbone is
/// always conditioned on this value, for training and for extraction.
pub const MAE_FLOW_TIME: f64 = 1.0;

/// Hides `round(ratio * frames)` whole frames, at least one, chosen without
/// replacement. Returns the masked grid and a 0/1 indicator of hidden cells.
pub fn random_mask(sg: &Spectrogram, ratio: f64, rng: &mut impl Rng) -> Result<(Spectrogram, Spectrogram)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let (bins, frames) = (sg.bins(), sg.frames());
    let count = ((ratio * frames as f64).round() as usize).clamp(1, frames);
    let mut hidden = vec![false; frames];
    for t in rand::seq::index::sample(rng, frames, count) {
        hidden[t] = true;
    }
    let mut masked = sg.values().to_vec();
    let mut indicator = vec![0.0; bins * frames];
    for b in 0..bins {
        for t in (0..frames).filter(|&t| hidden[t]) {
            masked[b * frames + t] = 0.0;
            indicator[b * frames + t] = 1.0;
        }
    }
    Ok((
        sg.with_values(bins, frames, masked)?,
        sg.with_values(bins, frames, indicator)?,
    ))
}

/// One masked batch: model input, reconstruction target and indicator, all
/// `[batch, frames, bins]`.
struct MaskedBatch<T> {
    input: Tensor<T>,
    target: Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Real> MaskedBatch<T> {
    fn draw<'a>(items: impl IntoIterator<Item = &'a Spectrogram>, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut clean = Vec::new();
        let mut masked = Vec::new();
        let mut masks = Vec::new();
        for sg in items {
            let (m, ind) = random_mask(sg, ratio, rng)?;
            clean.push(sg);
            masked.push(m);
            masks.push(ind);
        }
        Ok(Self {
            input: batch_tensor(&masked)?,
            target: batch_tensor(clean)?,
            mask: batch_tensor(&masks)?,
        })
    }
}

/// Squared reconstruction error averaged over hidden cells only.
pub fn mae_loss<T: Real>(
    graph: &mut Graph<T>,
    model: &FlowTransformer<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    mode: Mode,
) -> Result<Var> {
    let batch = input.shape()[0];
    let x = graph.constant(input.clone());
    let fwd = model.forward(graph, x, &vec![MAE_FLOW_TIME; batch], mode)?;
    let t = graph.constant(target.clone());
    graph.masked_mse(fwd.output, t, mask)
}

/// Masked-reconstruction pretraining on the shared backbone. The output
/// projection serves as the linear reconstruction head; it starts at zero
/// and is never tapped for features.
pub fn train_mae<T: Real>(
    mut model: FlowTransformer<T>,
    train: &[Spectrogram],
    val: &[Spectrogram],
    config: &TrainConfig,
) -> Result<(FlowTransformer<T>, TrainLog)> {
    let mut lp = Loop::<T>::new(config, "mae")?;
    if config.epochs == 0 {
        return Ok((model, lp.log));
    }
    check_data(train)?;
    model.zero_output_projection();
    let val_chunk = config.batch_size.max(32);
    let mut val_rng = ChaCha8Rng::seed_from_u64(lp.rng.next_u64());
    let validation = val
        .chunks(val_chunk)
        .map(|c| MaskedBatch::<T>::draw(c, config.mask_ratio, &mut val_rng))
        .collect::<Result<Vec<_>>>()?;
    for epoch in 0..config.epochs {
        for idx in lp.batches(train.len()) {
            let b = MaskedBatch::<T>::draw(idx.iter().map(|&i| &train[i]), config.mask_ratio, &mut lp.rng)?;
            let mut graph = Graph::new();
            let mode = Mode::train(lp.rng.random());
            let loss = mae_loss(&mut graph, &model, &b.input, &b.target, &b.mask, mode)?;
            lp.apply(&mut model, &graph, loss, epoch, &b.target)?;
            if lp.done() {
                break;
            }
        }
        if !validation.is_empty() {
            let loss = chunked_mean(val.len(), val_chunk, |r| {
                let b = &validation[r.start / val_chunk];
                let mut graph = Graph::new();
                let loss = mae_loss(&mut graph, &model, &b.input, &b.target, &b.mask, Mode::EVAL)?;
                Ok(graph.value(loss).item().as_f64())
            })?;
            lp.record_val(epoch, loss)?;
        }
        lp.maybe_checkpoint(&model, epoch)?;
        if lp.done() {
            break;
        }
    }
    Ok((model, lp.log))
}
