//! Special functions, quadrature, and seeded sampling.

mod erf;
mod quad;
mod rng;

pub use erf::{erf, erfc};
pub use quad::{integrate, integrate_with_cap, QuadratureResult, DEFAULT_MAX_EVALUATIONS};
pub use rng::Rng;

use crate::error::{ensure, Result};
use std::f64::consts::{PI, SQRT_2};

/// `P(Z < c)` for `Z ~ N(mu, theta²)`.
pub fn normal_cdf(c: f64, mu: f64, theta: f64) -> Result<f64> {
    ensure!(theta > 0.0, "theta must be positive (got {theta})");
    Ok(0.5 * erfc(-(c - mu) / (theta * SQRT_2)))
}

/// `P(Z >= c)`, accurate when the cdf is close to one.
pub fn normal_sf(c: f64, mu: f64, theta: f64) -> Result<f64> {
    ensure!(theta > 0.0, "theta must be positive (got {theta})");
    Ok(0.5 * erfc((c - mu) / (theta * SQRT_2)))
}

pub fn normal_pdf(x: f64, mean: f64, variance: f64) -> Result<f64> {
    ensure!(variance > 0.0, "variance must be positive (got {variance})");
    Ok(normal_pdf_unchecked(x, mean, variance))
}

#[inline]
pub(crate) fn normal_pdf_unchecked(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    (-0.5 * d * d / variance).exp() / (2.0 * PI * variance).sqrt()
}

/// `n` i.i.d. draws from `N(mean, variance)`; variance zero yields the mean.
pub fn sample_gaussian(rng: &mut Rng, mean: f64, variance: f64, n: usize) -> Result<Vec<f64>> {
    ensure!(variance >= 0.0, "variance must be nonnegative (got {variance})");
    let sd = variance.sqrt();
    Ok((0..n).map(|_| mean + sd * rng.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0, 0.0, 1.0).unwrap(), 0.5);
        assert_eq!(normal_cdf(2.5, 2.5, 0.3).unwrap(), 0.5);
        // quadrature of the standard normal density on [-40, 1]
        let q = integrate(|x| normal_pdf_unchecked(x, 0.0, 1.0), -40.0, 1.0, 1e-13).unwrap();
        let f = normal_cdf(1.0, 0.0, 1.0).unwrap();
        assert!((f - q.value).abs() < 1e-12);
        assert!((f - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!(normal_cdf(0.0, 0.0, 0.0).is_err());
        assert!(normal_cdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn cdf_limits_and_monotonicity() {
        assert_eq!(normal_cdf(f64::INFINITY, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(normal_cdf(f64::NEG_INFINITY, 0.0, 1.0).unwrap(), 0.0);
        let mut prev = 0.0;
        for i in -800..800 {
            let v = normal_cdf(i as f64 * 0.01, 0.3, 0.7).unwrap();
            assert!((0.0..=1.0).contains(&v) && v >= prev);
            prev = v;
        }
        let sf = normal_sf(9.0, 0.0, 1.0).unwrap();
        assert!(sf > 0.0 && sf < 1e-18);
    }

    #[test]
    fn normal_pdf_values() {
        let peak = 1.0 / (2.0 * PI).sqrt();
        assert!((normal_pdf(0.0, 0.0, 1.0).unwrap() - peak).abs() < 1e-15);
        assert!((normal_pdf(3.0, 3.0, 0.25).unwrap() - 1.0 / (2.0 * PI * 0.25).sqrt()).abs() < 1e-15);
        assert!(normal_pdf(0.0, 0.0, 0.0).is_err());
        let sd = 0.4_f64;
        let q = integrate(|x| normal_pdf_unchecked(x, 1.0, sd * sd), 1.0 - 8.0 * sd, 1.0 + 8.0 * sd, 1e-12).unwrap();
        assert!((q.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampling_contract() {
        let mut rng = Rng::new(5);
        assert_eq!(sample_gaussian(&mut rng, 3.0, 0.0, 4).unwrap(), vec![3.0; 4]);
        assert!(sample_gaussian(&mut rng, 0.0, -1.0, 4).is_err());
        let a = sample_gaussian(&mut Rng::new(9), 0.0, 1.0, 64).unwrap();
        let b = sample_gaussian(&mut Rng::new(9), 0.0, 1.0, 64).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian(&mut Rng::with_stream(9, 1), 0.0, 1.0, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn standard_normal_moments() {
        // mean has sd 1e-3 and variance sd ~1.4e-3 at n = 1e6
        let n = 1_000_000;
        let xs = sample_gaussian(&mut Rng::new(20_241_017), 0.0, 1.0, n).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
