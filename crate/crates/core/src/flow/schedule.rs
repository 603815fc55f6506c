use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};

/// Noise level `sigma(s)` along the path, decreasing from 1 at `s = 0` to 0
/// at `s = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceSchedule {
    /// `sigma(s) = 1 - s`.
    #[default]
    Linear,
    /// `sigma(s) = cos(pi s / 2)`.
    Cosine,
}

impl VarianceSchedule {
    pub fn sigma(self, s: f64) -> f64 {
        match self {
            Self::Linear => 1.0 - s,
            Self::Cosine => (FRAC_PI_2 * s).cos(),
        }
    }

    pub fn sigma_prime(self, s: f64) -> f64 {
        match self {
            Self::Linear => -1.0,
            Self::Cosine => -FRAC_PI_2 * (FRAC_PI_2 * s).sin(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        }
    }
}

impl fmt::Display for VarianceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VarianceSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid(format!("unknown schedule {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        for sched in [VarianceSchedule::Linear, VarianceSchedule::Cosine] {
            assert_eq!(sched.sigma(0.0), 1.0);
            assert!(sched.sigma(1.0).abs() < 1e-15);
            let grid: Vec<f64> = (0..=100).map(|k| sched.sigma(k as f64 / 100.0)).collect();
            assert!(grid.windows(2).all(|w| w[1] < w[0]));
        }
        assert_eq!(VarianceSchedule::Linear.sigma_prime(0.3), -1.0);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let h = 1e-6;
        for s in [0.1, 0.5, 0.9] {
            let sched = VarianceSchedule::Cosine;
            let fd = (sched.sigma(s + h) - sched.sigma(s - h)) / (2.0 * h);
            assert!((fd - sched.sigma_prime(s)).abs() < 1e-8);
        }
    }

    #[test]
    fn parses_by_name() {
        assert_eq!("linear".parse::<VarianceSchedule>().unwrap(), VarianceSchedule::Linear);
        assert!("quadratic".parse::<VarianceSchedule>().is_err());
    }
}
