use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How the flow-time embedding enters the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeInjection {
    /// Appended to every frame's bins before the input lift.
    #[default]
    Concat,
    /// Projected to `d_model` and added to every token after the lift.
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Input width: frequency bins per frame.
    pub freq_bins: usize,
    /// Longest frame sequence the positional table covers.
    pub max_frames: usize,
    pub time_embed_dim: usize,
    pub time_injection: TimeInjection,
    /// Gain of the fan-in uniform initializer.
    pub init_gain: f64,
    /// Standard deviation of the positional table at init.
    pub pos_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(33, 17)
    }
}

impl ModelConfig {
    /// The published backbone: 6 layers, width 768, 12 heads, 3072 hidden
    /// units, dropout 0.1.
    pub fn published(freq_bins: usize, max_frames: usize) -> Self {
        Self {
            num_layers: 6,
            d_model: 768,
            num_heads: 12,
            d_ff: 3072,
            dropout: 0.1,
            freq_bins,
            max_frames,
            time_embed_dim: 64,
            time_injection: TimeInjection::Concat,
            init_gain: 1.0,
            pos_init_std: 0.02,
            seed: 0,
        }
    }

    /// Small configuration for single-core experiments.
    pub fn desk(freq_bins: usize, max_frames: usize) -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            dropout: 0.0,
            freq_bins,
            max_frames,
            time_embed_dim: 16,
            time_injection: TimeInjection::Concat,
            init_gain: 1.0,
            pos_init_std: 0.02,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(invalid("num_layers must be >= 1"));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ff == 0 || self.freq_bins == 0 || self.max_frames == 0 {
            return Err(invalid("d_ff, freq_bins and max_frames must be positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Scalar weight count implied by the architecture.
    pub fn num_parameters(&self) -> usize {
        let (d, f, e, ff) = (self.d_model, self.freq_bins, self.time_embed_dim, self.d_ff);
        let lift = match self.time_injection {
            TimeInjection::Concat => (f + e) * d + d,
            TimeInjection::Add => f * d + d + e * d + d,
        };
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d);
        lift + self.max_frames * d + self.num_layers * block + d * f + f
    }
}
