//! Seeded synthetic corpora for desk-scale experiments.
//!
//! Classification windows carry a tone whose frequency is drawn from a band
//! owned by the window's class, optionally gated to a short burst, plus a
//! class-independent distractor tone and white noise. Regression windows
//! carry an amplitude-modulated carrier whose target is the mean envelope.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabeledWindow, SpectrogramConfig, Split, Task, TimeSeries};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SynthMode {
    Classification { num_classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub mode: SynthMode,
    pub num_windows: usize,
    pub sampling_rate_hz: f64,
    pub window_seconds: f64,
    pub spectrogram: SpectrogramConfig,
    /// Class bands tile `[band_low_hz, band_high_hz]`.
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// Fraction of each band's width trimmed from both of its edges.
    pub band_gap: f64,
    pub amplitude_low: f64,
    pub amplitude_high: f64,
    pub noise_std: f64,
    /// Fraction of the window during which the class tone is on.
    pub burst_fraction: f64,
    /// Amplitude of a class-independent tone drawn anywhere in the band range.
    pub distractor_amplitude: f64,
    /// Regression only: modulation depth of the envelope.
    pub modulation_depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            mode: SynthMode::Classification { num_classes: 2 },
            num_windows: 500,
            sampling_rate_hz: 64.0,
            window_seconds: 5.0,
            spectrogram: SpectrogramConfig::new(64, 48),
            band_low_hz: 1.5,
            band_high_hz: 6.5,
            band_gap: 0.25,
            amplitude_low: 0.8,
            amplitude_high: 1.2,
            noise_std: 1.0,
            burst_fraction: 1.0,
            distractor_amplitude: 0.0,
            modulation_depth: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if let SynthMode::Classification { num_classes } = self.mode {
            if num_classes < 2 {
                return Err(invalid(format!("num_classes must be >= 2, got {num_classes}")));
            }
        }
        if self.num_windows == 0 {
            return Err(invalid("num_windows must be positive"));
        }
        if !(self.sampling_rate_hz > 0.0) || !(self.window_seconds > 0.0) {
            return Err(invalid("sampling_rate_hz and window_seconds must be positive"));
        }
        if !(0.0 <= self.band_low_hz && self.band_low_hz < self.band_high_hz)
            || self.band_high_hz >= self.sampling_rate_hz / 2.0
        {
            return Err(invalid(format!(
                "band [{}, {}] Hz must lie below Nyquist {} Hz",
                self.band_low_hz,
                self.band_high_hz,
                self.sampling_rate_hz / 2.0
            )));
        }
        if !(0.0..0.5).contains(&self.band_gap) {
            return Err(invalid("band_gap must be in [0, 0.5)"));
        }
        if !(0.0 < self.burst_fraction && self.burst_fraction <= 1.0) {
            return Err(invalid("burst_fraction must be in (0, 1]"));
        }
        if self.amplitude_low > self.amplitude_high || self.noise_std < 0.0 {
            return Err(invalid("amplitude range or noise_std is invalid"));
        }
        let len = self.window_len();
        self.spectrogram.window()?;
        if len < self.spectrogram.nperseg {
            return Err(invalid(format!(
                "window of {len} samples is shorter than nperseg {}",
                self.spectrogram.nperseg
            )));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.window_seconds * self.sampling_rate_hz).round() as usize
    }

    /// `[low, high]` frequency band of `class`.
    pub fn class_band(&self, class: usize, num_classes: usize) -> (f64, f64) {
        let width = (self.band_high_hz - self.band_low_hz) / num_classes as f64;
        let trim = self.band_gap * width;
        let lo = self.band_low_hz + class as f64 * width;
        (lo + trim, lo + width - trim)
    }

    pub fn task(&self) -> Task {
        match self.mode {
            SynthMode::Classification { num_classes } => Task::Classification { num_classes },
            SynthMode::Regression => Task::Regression,
        }
    }
}

/// Split sizes for an 80/10/10 partition of `n` items.
pub(crate) fn split_counts(n: usize) -> [(Split, usize); 3] {
    let train = (0.8 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    [(Split::Train, train), (Split::Val, val), (Split::Test, n - train - val)]
}

/// Generates `config.num_windows` windows. Window `i` (in train, val, test
/// order) draws from its own generator seeded with `seed ^ i`.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut windows = Vec::with_capacity(config.num_windows);
    let mut index = 0u64;
    for (split, count) in split_counts(config.num_windows) {
        for j in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index);
            let (samples, label) = match config.mode {
                SynthMode::Classification { num_classes } => {
                    let class = j % num_classes;
                    (
                        classification_window(config, class, num_classes, &mut rng),
                        Label::Class(class),
                    )
                }
                SynthMode::Regression => {
                    let (s, target) = regression_window(config, &mut rng);
                    (s, Label::Value(target))
                }
            };
            // Stored as f32 on disk; round now so reloads compare equal.
            let samples = samples.into_iter().map(|x| x as f32 as f64).collect();
            let signal = TimeSeries::new(samples, config.sampling_rate_hz, format!("w{index:05}"))?;
            let spectrogram = config.spectrogram.transform(&signal)?;
            windows.push(LabeledWindow {
                signal,
                spectrogram,
                label,
                split,
            });
            index += 1;
        }
    }
    Ok(Dataset {
        name: config.name.clone(),
        task: config.task(),
        sampling_rate_hz: config.sampling_rate_hz,
        window_seconds: config.window_seconds,
        spectrogram: config.spectrogram,
        windows,
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn classification_window(config: &SynthConfig, class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = config.window_len();
    let rate = config.sampling_rate_hz;
    let (lo, hi) = config.class_band(class, num_classes);
    let freq = rng.random_range(lo..=hi);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(config.amplitude_low..=config.amplitude_high);
    let burst = ((config.burst_fraction * n as f64).round() as usize).clamp(1, n);
    let start = rng.random_range(0..=n - burst);
    let d_freq = rng.random_range(config.band_low_hz..=config.band_high_hz);
    let d_phase = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let on = if (start..start + burst).contains(&i) { 1.0 } else { 0.0 };
            on * amp * (2.0 * PI * freq * t + phase).sin()
                + config.distractor_amplitude * (2.0 * PI * d_freq * t + d_phase).sin()
                + config.noise_std * gaussian(rng)
        })
        .collect()
}

fn regression_window(config: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let n = config.window_len();
    let rate = config.sampling_rate_hz;
    let carrier = rng.random_range(config.band_low_hz..=config.band_high_hz);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(config.amplitude_low..=config.amplitude_high);
    let mod_freq = rng.random_range(0.2..0.6);
    let mod_phase = rng.random_range(0.0..2.0 * PI);
    let envelope: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            amp * (1.0 + config.modulation_depth * (2.0 * PI * mod_freq * t + mod_phase).sin())
        })
        .collect();
    let target = envelope.iter().sum::<f64>() / n as f64;
    let samples = envelope
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let t = i as f64 / rate;
            e * (2.0 * PI * carrier * t + phase).sin() + config.noise_std * gaussian(rng)
        })
        .collect();
    (samples, target)
}
