use serde::{Deserialize, Serialize};

use super::Spectrogram;
use crate::error::{invalid, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-frequency-bin mean and standard deviation, fit on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of the lowest `bins` bins.
    pub fn truncated(&self, bins: usize) -> Result<NormStats> {
        if bins == 0 || bins > self.mean.len() {
            return Err(invalid(format!("cannot keep {bins} of {} bins", self.mean.len())));
        }
        Ok(NormStats {
            mean: self.mean[..bins].to_vec(),
            std: self.std[..bins].to_vec(),
        })
    }
}

pub fn normalize_fit<'a>(train: impl IntoIterator<Item = &'a Spectrogram>) -> Result<NormStats> {
    let mut count = 0usize;
    let mut frames = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut sum_sq: Vec<f64> = Vec::new();
    for sg in train {
        if count == 0 {
            sum = vec![0.0; sg.bins()];
            sum_sq = vec![0.0; sg.bins()];
        } else if sg.bins() != sum.len() {
            return Err(invalid(format!(
                "mixed bin counts in training set: {} vs {}",
                sum.len(),
                sg.bins()
            )));
        }
        for b in 0..sg.bins() {
            for &v in sg.row(b) {
                sum[b] += v;
                sum_sq[b] += v * v;
            }
        }
        frames += sg.frames();
        count += 1;
    }
    if count < 2 {
        return Err(invalid(format!(
            "normalization needs at least 2 training windows, got {count}"
        )));
    }
    let n = frames as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

pub fn normalize_apply(sg: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    if sg.bins() != stats.mean.len() {
        return Err(invalid(format!(
            "spectrogram has {} bins but stats cover {}",
            sg.bins(),
            stats.mean.len()
        )));
    }
    let frames = sg.frames();
    let values = sg
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i / frames;
            (v - stats.mean[b]) / stats.std[b]
        })
        .collect();
    sg.with_values(sg.bins(), frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<f64>) -> Spectrogram {
        Spectrogram::new(2, values.len() / 2, values, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn fitting_set_is_standardized() {
        let train = vec![
            grid(vec![1.0, 2.0, 3.0, 7.0, 7.0, 7.0]),
            grid(vec![4.0, 0.5, 9.0, 7.0, 7.0, 7.0]),
        ];
        let stats = normalize_fit(&train).unwrap();
        let normed: Vec<Spectrogram> = train.iter().map(|s| normalize_apply(s, &stats).unwrap()).collect();
        let row0: Vec<f64> = normed.iter().flat_map(|s| s.row(0).to_vec()).collect();
        let mean = row0.iter().sum::<f64>() / 6.0;
        let var = row0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        // constant bin: floor engaged, maps to zero
        assert_eq!(stats.std[1], STD_FLOOR);
        assert!(normed.iter().all(|s| s.row(1).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn needs_two_windows() {
        assert!(normalize_fit(std::iter::empty()).is_err());
        assert!(normalize_fit(&[grid(vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn stats_ignore_other_splits() {
        let train = vec![grid(vec![1.0, 2.0, 3.0, 4.0]), grid(vec![0.0, 1.0, 5.0, 5.0])];
        let a = normalize_fit(&train).unwrap();
        let _val = normalize_apply(&grid(vec![100.0, -3.0, 8.0, 1e6]), &a).unwrap();
        let b = normalize_fit(&train).unwrap();
        assert_eq!(a, b);
    }
}
