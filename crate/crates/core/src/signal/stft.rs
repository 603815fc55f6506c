use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Spectrogram, TimeSeries, WindowSpec};
use crate::error::{invalid, Result};

/// Periodic Hann window `w[k] = 0.5 (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("hann window length must be >= 1"));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}

/// Unscaled one-sided STFT magnitude: Hann-windowed frames with hop
/// `nperseg - noverlap`, bins `0..=nperseg/2`, no boundary padding.
pub fn stft_magnitude(x: &TimeSeries, spec: &WindowSpec) -> Result<Spectrogram> {
    spec.validate()?;
    let n = spec.nperseg;
    if x.len() < n {
        return Err(invalid(format!(
            "signal of {} samples is shorter than one {n}-sample window",
            x.len()
        )));
    }
    let window = hann_window(n)?;
    let frames = spec.frame_count(x.len());
    let bins = spec.bins();
    let hop = spec.hop();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut magnitudes = vec![0.0; bins * frames];
    for t in 0..frames {
        let frame = &x.samples()[t * hop..t * hop + n];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (f, c) in buf.iter().take(bins).enumerate() {
            magnitudes[f * frames + t] = c.norm();
        }
    }
    let rate = x.sampling_rate();
    Spectrogram::new(bins, frames, magnitudes, rate / n as f64, hop as f64 / rate, rate)
}

/// Amplitude scaling applied after the transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Raw `|DFT|`.
    None,
    /// Divide by the window sum, so a unit sinusoid reads ~0.5 regardless of
    /// `nperseg`. Keeps magnitudes comparable across sampling rates.
    #[default]
    Spectrum,
}

/// Everything needed to turn a raw window into the model's input grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub nperseg: usize,
    pub noverlap: usize,
    #[serde(default)]
    pub scaling: Scaling,
    /// `ln(1 + |X|)` instead of `|X|`.
    #[serde(default)]
    pub log_magnitude: bool,
    /// Keep only the first `freq_crop` bins.
    #[serde(default)]
    pub freq_crop: Option<usize>,
}

impl SpectrogramConfig {
    pub fn new(nperseg: usize, noverlap: usize) -> Self {
        Self {
            nperseg,
            noverlap,
            scaling: Scaling::Spectrum,
            log_magnitude: false,
            freq_crop: None,
        }
    }

    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.nperseg, self.noverlap)
    }

    /// Bins in the output grid, after cropping.
    pub fn bins(&self) -> usize {
        let full = self.nperseg / 2 + 1;
        self.freq_crop.map_or(full, |c| c.min(full))
    }

    /// The same window duration at `1/factor` of the sampling rate.
    pub fn scaled_down(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid("downsampling factor must be >= 1"));
        }
        let scaled = Self {
            nperseg: self.nperseg / factor,
            noverlap: self.noverlap / factor,
            ..*self
        };
        scaled.window()?;
        Ok(scaled)
    }

    pub fn transform(&self, x: &TimeSeries) -> Result<Spectrogram> {
        let spec = self.window()?;
        let raw = stft_magnitude(x, &spec)?;
        let norm = match self.scaling {
            Scaling::None => 1.0,
            Scaling::Spectrum => hann_window(spec.nperseg)?.iter().sum::<f64>(),
        };
        let bins = self.bins();
        let frames = raw.frames();
        let values = raw.values()[..bins * frames]
            .iter()
            .map(|&m| {
                let m = m / norm;
                if self.log_magnitude {
                    m.ln_1p()
                } else {
                    m
                }
            })
            .collect();
        raw.with_values(bins, frames, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_dft_magnitude(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn hann_values() {
        assert_eq!(hann_window(1).unwrap(), vec![0.0]);
        let w4 = hann_window(4).unwrap();
        for (a, b) in w4.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w2 = hann_window(2).unwrap();
        assert!((w2[0] - 0.0).abs() < 1e-15 && (w2[1] - 1.0).abs() < 1e-15);
        assert!(hann_window(0).is_err());
    }

    #[test]
    fn zero_signal_grid() {
        let x = TimeSeries::new(vec![0.0; 500], 2048.0, "z").unwrap();
        let sg = stft_magnitude(&x, &WindowSpec::new(400, 350).unwrap()).unwrap();
        assert_eq!((sg.bins(), sg.frames()), (201, 3));
        assert!(sg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn on_bin_cosine_peaks_at_its_bin() {
        let (rate, n, b) = (64.0, 64usize, 7usize);
        let f = b as f64 * rate / n as f64;
        let samples: Vec<f64> = (0..320).map(|i| (2.0 * PI * f * i as f64 / rate).cos()).collect();
        let x = TimeSeries::new(samples.clone(), rate, "c").unwrap();
        let sg = stft_magnitude(&x, &WindowSpec::new(n, 48).unwrap()).unwrap();
        let w = hann_window(n).unwrap();
        for t in 0..sg.frames() {
            let col: Vec<f64> = (0..sg.bins()).map(|k| sg.get(k, t)).collect();
            let argmax = col.iter().enumerate().max_by(|a, c| a.1.total_cmp(c.1)).unwrap().0;
            assert_eq!(argmax, b);
            let frame: Vec<f64> = samples[t * 16..t * 16 + n].iter().zip(&w).map(|(x, w)| x * w).collect();
            let oracle = direct_dft_magnitude(&frame);
            for (a, o) in col.iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-9 * o.abs().max(1.0));
            }
        }
    }

    #[test]
    fn short_signal_rejected() {
        let x = TimeSeries::new(vec![0.0; 10], 10.0, "c").unwrap();
        assert!(stft_magnitude(&x, &WindowSpec::new(16, 8).unwrap()).is_err());
    }

    #[test]
    fn spectrum_scaling_is_rate_invariant_for_a_tone() {
        let tone = |rate: f64| {
            let s: Vec<f64> = (0..(5.0 * rate) as usize)
                .map(|i| (2.0 * PI * 3.0 * i as f64 / rate).sin())
                .collect();
            TimeSeries::new(s, rate, "t").unwrap()
        };
        let base = SpectrogramConfig::new(64, 48);
        let hi = base.transform(&tone(64.0)).unwrap();
        let lo = base.scaled_down(4).unwrap().transform(&tone(16.0)).unwrap();
        assert_eq!(hi.frames(), lo.frames());
        assert_eq!(hi.freq_bin_hz, lo.freq_bin_hz);
        assert!((hi.get(3, 5) - 0.5).abs() < 1e-9);
        assert!((lo.get(3, 5) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn crop_and_log() {
        let x = TimeSeries::new((0..128).map(|i| (i as f64 * 0.3).sin()).collect(), 32.0, "c").unwrap();
        let mut cfg = SpectrogramConfig::new(32, 16);
        cfg.freq_crop = Some(5);
        cfg.log_magnitude = true;
        let sg = cfg.transform(&x).unwrap();
        assert_eq!(sg.bins(), 5);
        let plain = SpectrogramConfig::new(32, 16).transform(&x).unwrap();
        for b in 0..5 {
            for t in 0..sg.frames() {
                assert!((sg.get(b, t) - plain.get(b, t).ln_1p()).abs() < 1e-12);
            }
        }
    }
}
