//! Client-side privacy transforms applied to gradients before sharing:
//! threshold compression and Gaussian noising. Modes are mutually exclusive
//! by construction.

use crate::error::{CoreError, Result};
use crate::gradvec::GradientVector;
use crate::rng;

/// Which transform a client applies to its update before sharing.
#[derive(Clone, Debug, PartialEq)]
pub enum DefenseMode {
    None,
    /// Zero out coordinates with |g_i| <= epsilon (strict survival |g_i| > epsilon).
    CompressEps { epsilon: f64 },
    /// Compress with the threshold that prunes at least this fraction.
    CompressRatio { target_ratio: f64 },
    /// Add i.i.d. N(0, variance) noise to every coordinate.
    Noise { variance: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseConfig {
    pub mode: DefenseMode,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self {
            mode: DefenseMode::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            DefenseMode::None => Ok(()),
            DefenseMode::CompressEps { epsilon } => {
                if epsilon < 0.0 || !epsilon.is_finite() {
                    Err(CoreError::InvalidArgument(format!(
                        "epsilon must be finite and >= 0, got {epsilon}"
                    )))
                } else {
                    Ok(())
                }
            }
            DefenseMode::CompressRatio { target_ratio } => {
                if !(0.0..=1.0).contains(&target_ratio) {
                    Err(CoreError::InvalidArgument(format!(
                        "target ratio must lie in [0,1], got {target_ratio}"
                    )))
                } else {
                    Ok(())
                }
            }
            DefenseMode::Noise { variance } => {
                if variance < 0.0 || !variance.is_finite() {
                    Err(CoreError::InvalidArgument(format!(
                        "variance must be finite and >= 0, got {variance}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Applies the configured transform, leaving the layout untouched.
    pub fn apply(&self, g: &GradientVector) -> Result<GradientVector> {
        self.validate()?;
        Ok(match self.mode {
            DefenseMode::None => g.clone(),
            DefenseMode::CompressEps { epsilon } => compress(g, epsilon),
            DefenseMode::CompressRatio { target_ratio } => {
                let eps = epsilon_for_ratio(g, target_ratio);
                compress(g, eps)
            }
            DefenseMode::Noise { variance } => add_noise(g, variance, self.seed),
        })
    }

    /// Short stable description for CSV output.
    pub fn describe(&self) -> String {
        match self.mode {
            DefenseMode::None => "none".into(),
            DefenseMode::CompressEps { epsilon } => format!("compress_eps={epsilon}"),
            DefenseMode::CompressRatio { target_ratio } => format!("prune_ratio={target_ratio}"),
            DefenseMode::Noise { variance } => format!("noise_var={variance}"),
        }
    }
}

/// Threshold compression: keep g_i only where |g_i| > epsilon.
pub fn compress(g: &GradientVector, epsilon: f64) -> GradientVector {
    let values = g
        .values
        .iter()
        .map(|&v| if v.abs() > epsilon { v } else { 0.0 })
        .collect();
    GradientVector {
        values,
        layout: g.layout.clone(),
    }
}

/// Fraction of exactly-zero coordinates.
pub fn prune_ratio(g: &GradientVector) -> Result<f64> {
    if g.is_empty() {
        return Err(CoreError::InvalidArgument(
            "prune ratio of an empty gradient is undefined".into(),
        ));
    }
    let zeros = g.values.iter().filter(|&&v| v == 0.0).count();
    Ok(zeros as f64 / g.len() as f64)
}

/// Smallest threshold whose compression prunes at least `target_ratio` of the
/// coordinates: the ceil(target * n)-th smallest magnitude. Ties between
/// equal magnitudes can overshoot the target, never undershoot.
pub fn epsilon_for_ratio(g: &GradientVector, target_ratio: f64) -> f64 {
    let n = g.len();
    if n == 0 {
        return 0.0;
    }
    let k = (target_ratio * n as f64).ceil() as usize;
    if k == 0 {
        return 0.0;
    }
    let mut mags: Vec<f64> = g.values.iter().map(|v| v.abs()).collect();
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *kth
}

/// Adds seeded i.i.d. Gaussian noise of the given variance.
pub fn add_noise(g: &GradientVector, variance: f64, seed: u64) -> GradientVector {
    if variance == 0.0 {
        return g.clone();
    }
    let sigma = variance.sqrt();
    let mut r = rng::stream(rng::derive(seed, "noise"), 0);
    let values = g.values.iter().map(|&v| v + sigma * rng::normal(&mut r)).collect();
    GradientVector {
        values,
        layout: g.layout.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradvec::Layout;
    use std::sync::Arc;

    fn gv(values: Vec<f64>) -> GradientVector {
        let layout = Arc::new(Layout::new(vec![("g".into(), vec![values.len()])]));
        GradientVector { values, layout }
    }

    #[test]
    fn compress_matches_definition() {
        let out = compress(&gv(vec![0.5, 0.01, -0.3]), 0.1);
        assert_eq!(out.values, vec![0.5, 0.0, -0.3]);
    }

    #[test]
    fn compress_zero_epsilon_keeps_nonzeros() {
        let out = compress(&gv(vec![0.5, 0.0, -1e-12]), 0.0);
        assert_eq!(out.values, vec![0.5, 0.0, -1e-12]);
    }

    #[test]
    fn compress_above_max_prunes_everything() {
        let out = compress(&gv(vec![0.5, -0.3]), 0.6);
        assert_eq!(out.values, vec![0.0, 0.0]);
    }

    #[test]
    fn compress_boundary_values_pruned() {
        // Strict inequality: |g_i| == epsilon is removed.
        let out = compress(&gv(vec![0.1, 0.2]), 0.1);
        assert_eq!(out.values, vec![0.0, 0.2]);
    }

    #[test]
    fn compress_is_idempotent_and_bounded() {
        let g = gv(vec![0.7, -0.05, 0.2, 0.0, -0.9]);
        let eps = 0.25;
        let once = compress(&g, eps);
        let twice = compress(&once, eps);
        assert_eq!(once.values, twice.values);
        let linf = g
            .values
            .iter()
            .zip(&once.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf <= eps);
        // Survivors unchanged.
        for (a, b) in g.values.iter().zip(&once.values) {
            assert!(*b == 0.0 || a == b);
        }
    }

    #[test]
    fn prune_ratio_counts_zeros() {
        assert_eq!(prune_ratio(&gv(vec![0.5, 0.0, -0.3])).unwrap(), 1.0 / 3.0);
        assert_eq!(prune_ratio(&gv(vec![0.0, 0.0])).unwrap(), 1.0);
        let layout = Arc::new(Layout::new(vec![]));
        let empty = GradientVector {
            values: vec![],
            layout,
        };
        assert!(prune_ratio(&empty).is_err());
    }

    #[test]
    fn prune_ratio_monotone_in_epsilon() {
        let mut r = crate::rng::seeded(3);
        let g = gv(crate::rng::normal_vec(&mut r, 400, 1.0));
        let mut last = 0.0;
        for i in 0..30 {
            let eps = i as f64 * 0.1;
            let ratio = prune_ratio(&compress(&g, eps)).unwrap();
            assert!(ratio >= last);
            last = ratio;
        }
    }

    #[test]
    fn epsilon_for_ratio_extremes() {
        let g = gv(vec![0.5, -0.2, 0.9, 0.1]);
        assert_eq!(epsilon_for_ratio(&g, 0.0), 0.0);
        let eps = epsilon_for_ratio(&g, 1.0);
        assert!(eps >= 0.9);
        assert_eq!(prune_ratio(&compress(&g, eps)).unwrap(), 1.0);
        // Target 0 on a vector with no exact zeros stays at ratio 0.
        assert_eq!(prune_ratio(&compress(&g, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn epsilon_for_ratio_hits_target_with_minimal_overshoot() {
        // Brute-force sweep oracle over distinct magnitudes.
        let mut r = crate::rng::seeded(8);
        let g = gv(crate::rng::normal_vec(&mut r, 200, 1.0));
        let n = g.len() as f64;
        for &target in &[0.1, 0.5, 0.87, 0.905] {
            let eps = epsilon_for_ratio(&g, target);
            let achieved = prune_ratio(&compress(&g, eps)).unwrap();
            assert!(achieved >= target, "target {target} achieved {achieved}");
            assert!(
                achieved <= target + 1.0 / n,
                "target {target} achieved {achieved}"
            );
        }
    }

    #[test]
    fn kth_order_statistic_prunes_k_of_n() {
        // After compressing at the k-th largest magnitude, exactly n-k
        // survive when magnitudes are distinct.
        let g = gv(vec![0.4, -0.1, 0.3, 0.2, -0.5]);
        let k = 2; // prune the two smallest magnitudes
        let eps = epsilon_for_ratio(&g, k as f64 / 5.0);
        let ratio = prune_ratio(&compress(&g, eps)).unwrap();
        assert_eq!(ratio, k as f64 / 5.0);
    }

    #[test]
    fn noise_zero_variance_is_identity() {
        let g = gv(vec![0.5, -0.2]);
        assert_eq!(add_noise(&g, 0.0, 1).values, g.values);
    }

    #[test]
    fn noise_deterministic_per_seed() {
        let g = gv(vec![0.5; 32]);
        assert_eq!(add_noise(&g, 0.01, 7).values, add_noise(&g, 0.01, 7).values);
        assert_ne!(add_noise(&g, 0.01, 7).values, add_noise(&g, 0.01, 8).values);
    }

    #[test]
    fn noise_sample_variance_matches() {
        let n = 100_000;
        let g = gv(vec![0.0; n]);
        let variance = 0.004;
        let noised = add_noise(&g, variance, 5);
        let mean: f64 = noised.values.iter().sum::<f64>() / n as f64;
        let var: f64 =
            noised.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let tol = 3.0 * variance * (2.0 / n as f64).sqrt();
        assert!((var - variance).abs() < tol, "var {var} vs {variance}");
    }

    #[test]
    fn noise_mean_preserved_over_seeds() {
        let g = gv(vec![1.5; 64]);
        let runs = 400;
        let mut mean = vec![0.0; 64];
        for seed in 0..runs {
            let noised = add_noise(&g, 0.01, seed);
            for (m, v) in mean.iter_mut().zip(&noised.values) {
                *m += v / runs as f64;
            }
        }
        for m in mean {
            assert!((m - 1.5).abs() < 0.05, "mean {m}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = DefenseConfig {
            mode: DefenseMode::CompressRatio { target_ratio: 1.5 },
            seed: 0,
        };
        assert!(bad.validate().is_err());
        let ok = DefenseConfig {
            mode: DefenseMode::Noise { variance: 0.007 },
            seed: 0,
        };
        assert!(ok.validate().is_ok());
    }
}
