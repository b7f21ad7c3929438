//! Monte Carlo summary statistics.

use serde::Serialize;

use crate::scalar::Scalar;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples<S: Scalar>(xs: &[S]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = xs.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
        if n == 1 {
            return Self { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.se.hypot(other.se)
    }
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and `cdf`.
///
/// Non-finite samples count toward `n` but are not compared, so a point mass
/// at `+inf` (no default before the horizon) is handled.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .filter(|(_, x)| x.is_finite())
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((((i + 1) as f64) / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let e = Estimate::from_samples(&[1.0_f64, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.se - (5.0_f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ks_of_uniform_grid_is_small() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_distance(&xs, |x| x) <= 0.0005 + 1e-12);
    }
}
