//! Counter-based Gaussian noise.
//!
//! Every variate is a pure function of `(seed, step, index)`, so a trajectory
//! is identical however the step loop is chunked or ordered.

use crate::math;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STEP_MUL: u64 = 0xD1B5_4A32_D192_ED03;
const INDEX_MUL: u64 = 0xAEF1_7502_108E_F2D9;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    // (0, 1): never exactly zero so the logarithm stays finite
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Gaussian `N(0, sigma²)` sample keyed by `(seed, step, index)`.
pub fn noise_sample(seed: u64, step: u64, index: u64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut key = mix(seed ^ GOLDEN);
    key = mix(key ^ step.wrapping_mul(STEP_MUL));
    key = mix(key ^ index.wrapping_mul(INDEX_MUL));
    let u1 = unit_open(mix(key ^ 0x1));
    let u2 = unit_open(mix(key ^ 0x2));
    let radius = math::sqrt(-2.0 * math::ln(u1));
    sigma * radius * math::cos(core::f64::consts::TAU * u2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    #[test]
    fn zero_sigma_is_silent() {
        assert_eq!(noise_sample(1, 2, 3, 0.0), 0.0);
        assert_eq!(noise_sample(u64::MAX, 0, 77, 0.0), 0.0);
    }

    #[test]
    fn pure_in_its_key() {
        let a = noise_sample(42, 1000, 17, 0.3);
        let b = noise_sample(42, 1000, 17, 0.3);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a, noise_sample(42, 1001, 17, 0.3));
        assert_ne!(a, noise_sample(42, 1000, 18, 0.3));
        assert_ne!(a, noise_sample(43, 1000, 17, 0.3));
    }

    #[test]
    fn moments_are_standard_normal() {
        let n = 200_000u64;
        let samples: Vec<f64> = (0..n).map(|i| noise_sample(9, i / 100, i % 100, 1.0)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
        // 5 standard errors
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }
}
