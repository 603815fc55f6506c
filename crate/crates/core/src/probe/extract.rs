use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Real, Tensor};
use crate::error::{invalid, Result};
use crate::flow::{gaussian_noise, VarianceSchedule};
use crate::model::{batch_tensor, FlowTransformer};
use crate::signal::Spectrogram;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

fn pool_rows(data: &[f64], tokens: usize, dim: usize, pooling: Pooling) -> Vec<f64> {
    let mut out = match pooling {
        Pooling::Mean => vec![0.0; dim],
        Pooling::Max => vec![f64::NEG_INFINITY; dim],
    };
    for t in 0..tokens {
        for (o, &v) in out.iter_mut().zip(&data[t * dim..(t + 1) * dim]) {
            match pooling {
                Pooling::Mean => *o += v,
                Pooling::Max => *o = o.max(v),
            }
        }
    }
    if pooling == Pooling::Mean {
        out.iter_mut().for_each(|o| *o /= tokens as f64);
    }
    out
}

/// Collapses a `[tokens, dim]` grid to one `dim` vector.
pub fn pool_features<T: Real>(z: &Tensor<T>, pooling: Pooling) -> Result<Vec<f64>> {
    if z.ndim() != 2 {
        return Err(invalid(format!(
            "pool_features expects [tokens, dim], got {:?}",
            z.shape()
        )));
    }
    let (tokens, dim) = (z.shape()[0], z.shape()[1]);
    Ok(pool_rows(&z.to_f64_vec(), tokens, dim, pooling))
}

/// Joins per-channel pooled features of the same windows side by side.
pub fn concat_channels(per_channel: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = per_channel
        .first()
        .ok_or_else(|| invalid("no channels to concatenate"))?;
    if per_channel.iter().any(|c| c.len() != first.len()) {
        return Err(invalid("channels disagree on the number of windows"));
    }
    Ok((0..first.len())
        .map(|i| per_channel.iter().flat_map(|c| c[i].iter().copied()).collect())
        .collect())
}

/// Window-level features from a frozen backbone.
pub trait FeatureExtractor {
    fn num_layers(&self) -> usize;

    /// Pooled features indexed `[layer][window][feature]` for each of
    /// `layers` (1-based) at flow time `s`, from one pass per window.
    fn pooled(&self, inputs: &[Spectrogram], layers: &[usize], s: f64) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// Replaces clean inputs by `s * phi + sigma(s) * eps`; window `i` of a call
/// draws `eps` from stream `i` of a generator seeded with `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub schedule: VarianceSchedule,
    pub seed: u64,
}

/// Extraction through a [`FlowTransformer`]; clean inputs unless `noise` is
/// set.
pub struct BackboneExtractor<'a, T: Real> {
    pub model: &'a FlowTransformer<T>,
    pub pooling: Pooling,
    pub batch_size: usize,
    pub noise: Option<NoiseSpec>,
}

impl<'a, T: Real> BackboneExtractor<'a, T> {
    pub fn clean(model: &'a FlowTransformer<T>) -> Self {
        Self {
            model,
            pooling: Pooling::Mean,
            batch_size: 64,
            noise: None,
        }
    }

    pub fn noisy(model: &'a FlowTransformer<T>, schedule: VarianceSchedule, seed: u64) -> Self {
        Self {
            noise: Some(NoiseSpec { schedule, seed }),
            ..Self::clean(model)
        }
    }
}

impl<T: Real> FeatureExtractor for BackboneExtractor<'_, T> {
    fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    fn pooled(&self, inputs: &[Spectrogram], layers: &[usize], s: f64) -> Result<Vec<Vec<Vec<f64>>>> {
        if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > self.num_layers()) {
            return Err(invalid(format!("layer {l} outside 1..={}", self.num_layers())));
        }
        let mut out = vec![Vec::with_capacity(inputs.len()); layers.len()];
        let bs = self.batch_size.max(1);
        for (c, chunk) in inputs.chunks(bs).enumerate() {
            let mut x = batch_tensor::<T>(chunk)?;
            if let Some(noise) = self.noise {
                let (a, b) = (T::lit(s), T::lit(noise.schedule.sigma(s)));
                let per = x.len() / chunk.len();
                for (j, item) in x.data_mut().chunks_mut(per).enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
                    rng.set_stream((c * bs + j) as u64);
                    let eps = gaussian_noise::<T>(&[per], &mut rng);
                    for (v, &e) in item.iter_mut().zip(eps.data()) {
                        *v = a * *v + b * e;
                    }
                }
            }
            let (_, hidden) = self.model.infer(&x, &vec![s; chunk.len()])?;
            for (slot, &l) in out.iter_mut().zip(layers) {
                let tap = hidden.layer(l)?;
                let (tokens, dim) = (tap.shape()[1], tap.shape()[2]);
                let data = tap.to_f64_vec();
                for item in data.chunks(tokens * dim) {
                    slot.push(pool_rows(item, tokens, dim, self.pooling));
                }
            }
        }
        Ok(out)
    }
}
