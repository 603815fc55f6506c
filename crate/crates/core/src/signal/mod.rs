//! Time-series containers, windowed spectral transforms, resolution helpers,
//! dataset segmentation and synthetic data.

mod manifest;
mod norm;
mod resample;
mod stft;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use manifest::{read_dataset, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use norm::{normalize_apply, normalize_fit, NormStats, STD_FLOOR};
pub use resample::{crop_frequency, downsample, segment_windows, zero_pad_frequency};
pub use stft::{hann_window, stft_magnitude, Scaling, SpectrogramConfig};
pub use synth::{synth_dataset, SynthConfig, SynthMode};

/// A raw single-channel signal.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    samples: Vec<f64>,
    sampling_rate: f64,
    channel_id: String,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, sampling_rate: f64, channel_id: impl Into<String>) -> Result<Self> {
        if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
            return Err(invalid(format!("sampling rate must be positive, got {sampling_rate}")));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sampling_rate,
            channel_id: channel_id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn channel_id(&self) -> &str {
        &self.channel_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| a * x).collect(),
            ..self.clone()
        }
    }
}

/// STFT framing: `nperseg` samples per frame, consecutive frames share
/// `noverlap` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub nperseg: usize,
    pub noverlap: usize,
}

impl WindowSpec {
    pub fn new(nperseg: usize, noverlap: usize) -> Result<Self> {
        let spec = Self { nperseg, noverlap };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nperseg < 2 {
            return Err(invalid(format!("nperseg must be >= 2, got {}", self.nperseg)));
        }
        if self.noverlap >= self.nperseg {
            return Err(invalid(format!(
                "noverlap {} must be < nperseg {}",
                self.noverlap, self.nperseg
            )));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.nperseg - self.noverlap
    }

    /// One-sided bin count of a real-input transform.
    pub fn bins(&self) -> usize {
        self.nperseg / 2 + 1
    }

    /// `floor((len - nperseg) / hop) + 1`, or zero when the signal is shorter
    /// than one window.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.nperseg {
            0
        } else {
            (len - self.nperseg) / self.hop() + 1
        }
    }
}

/// Frequency-by-time magnitude grid, stored row-major with one row per
/// frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    magnitudes: Vec<f64>,
    pub freq_bin_hz: f64,
    pub frame_hop_seconds: f64,
    pub source_rate_hz: f64,
}

impl Spectrogram {
    pub fn new(
        bins: usize,
        frames: usize,
        magnitudes: Vec<f64>,
        freq_bin_hz: f64,
        frame_hop_seconds: f64,
        source_rate_hz: f64,
    ) -> Result<Self> {
        if bins == 0 || frames == 0 {
            return Err(invalid(format!("empty spectrogram {bins}x{frames}")));
        }
        if magnitudes.len() != bins * frames {
            return Err(invalid(format!(
                "{bins}x{frames} spectrogram needs {} values, got {}",
                bins * frames,
                magnitudes.len()
            )));
        }
        if magnitudes.iter().any(|x| !x.is_finite()) {
            return Err(invalid("spectrogram values must be finite"));
        }
        Ok(Self {
            bins,
            frames,
            magnitudes,
            freq_bin_hz,
            frame_hop_seconds,
            source_rate_hz,
        })
    }

    /// Builds a grid with the same geometry metadata as `self`.
    pub fn with_values(&self, bins: usize, frames: usize, magnitudes: Vec<f64>) -> Result<Self> {
        Self::new(
            bins,
            frames,
            magnitudes,
            self.freq_bin_hz,
            self.frame_hop_seconds,
            self.source_rate_hz,
        )
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.magnitudes[bin * self.frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.magnitudes[bin * self.frames..(bin + 1) * self.frames]
    }

    /// Values in frame-major order (`frames x bins`), the token layout used
    /// by the model.
    pub fn to_frame_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.magnitudes.len()];
        for b in 0..self.bins {
            for t in 0..self.frames {
                out[t * self.bins + b] = self.magnitudes[b * self.frames + t];
            }
        }
        out
    }

    /// Inverse of [`Spectrogram::to_frame_major`].
    pub fn from_frame_major(&self, frame_major: &[f64]) -> Result<Self> {
        let (bins, frames) = (self.bins, self.frames);
        if frame_major.len() != bins * frames {
            return Err(invalid("frame-major buffer has the wrong length"));
        }
        let mut out = vec![0.0; bins * frames];
        for t in 0..frames {
            for b in 0..bins {
                out[b * frames + t] = frame_major[t * bins + b];
            }
        }
        self.with_values(bins, frames, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Task {
    Classification { num_classes: usize },
    Regression,
}

/// A labeled window: the raw signal it came from plus its spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub signal: TimeSeries,
    pub spectrogram: Spectrogram,
    pub label: Label,
    pub split: Split,
}

/// A labeled corpus with its acquisition and transform settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub sampling_rate_hz: f64,
    pub window_seconds: f64,
    pub spectrogram: SpectrogramConfig,
    pub windows: Vec<LabeledWindow>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&LabeledWindow> {
        self.windows.iter().filter(|w| w.split == split).collect()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.task {
            Task::Classification { num_classes } => Some(num_classes),
            Task::Regression => None,
        }
    }

    /// Spectrograms only. Pretraining code consumes this view so that labels
    /// are unreachable from it.
    pub fn unlabeled(&self, split: Split) -> Vec<Spectrogram> {
        self.windows
            .iter()
            .filter(|w| w.split == split)
            .map(|w| w.spectrogram.clone())
            .collect()
    }
}
