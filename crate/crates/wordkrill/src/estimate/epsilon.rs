//! Width of the feasibility band around the identification constraints.
//!
//! The band is derived from the sampling distributions of the empirical
//! moments of n standard-normal positions: the mean is N(0, 1/n), the
//! scaled variance (n-1)S^2 is chi-squared with n-1 degrees of freedom,
//! and each pairwise covariance is N(0, 1/(n-1)). The final epsilon is the
//! largest of the variance and covariance bands, which also dominates the
//! mean band.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Per-moment band widths at a given significance level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpsilonChoice {
    pub eps_mean: f64,
    pub eps_var: f64,
    pub eps_cov: f64,
    /// max(eps_var, eps_cov); the band applied to every constraint.
    pub eps_final: f64,
    /// Number of documents entering the quantile formulas.
    pub n_used: usize,
}

/// Derive the constraint band for `n` documents at significance `sig_level`.
pub fn choose_epsilon(n: usize, sig_level: f64) -> Result<EpsilonChoice> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "epsilon selection needs at least 3 documents, got {n}"
        )));
    }
    if !(sig_level > 0.0 && sig_level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "sig_level must be in (0, 1), got {sig_level}"
        )));
    }
    let nf = n as f64;
    let z = Normal::standard().inverse_cdf(1.0 - sig_level / 2.0);
    let eps_mean = z / nf.sqrt();
    let eps_cov = z / (nf - 1.0).sqrt();

    let chi = ChiSquared::new(nf - 1.0).expect("valid dof");
    let lo = chi.inverse_cdf(sig_level / 2.0);
    let hi = chi.inverse_cdf(1.0 - sig_level / 2.0);
    let eps_var = ((nf - 1.0) / lo - 1.0).abs().max(((nf - 1.0) / hi - 1.0).abs());

    let eps_final = eps_var.max(eps_cov);
    debug_assert!(eps_cov >= eps_mean);
    Ok(EpsilonChoice {
        eps_mean,
        eps_var,
        eps_cov,
        eps_final,
        n_used: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matches_frozen_quantile_values_at_n50() {
        // Frozen from an independent quantile oracle (erfc-based normal
        // inverse plus incomplete-gamma chi-squared inverse); see the
        // acceptance suite for the live comparison.
        let e = choose_epsilon(50, 0.05).unwrap();
        assert_abs_diff_eq!(e.eps_mean, 0.2771807650, epsilon = 1e-9);
        assert_abs_diff_eq!(e.eps_var, 0.5528483512, epsilon = 1e-9);
        assert_abs_diff_eq!(e.eps_cov, 0.2799948549, epsilon = 1e-9);
        assert_abs_diff_eq!(e.eps_final, e.eps_var, epsilon = 0.0);
        assert_eq!(e.n_used, 50);
    }

    #[test]
    fn large_n_limit() {
        // At n = 1e6 the covariance band is z/sqrt(n-1) ~ 0.00196 while the
        // variance band converges to z*sqrt(2/n) ~ 0.00278, so the final
        // epsilon is the variance band.
        let e = choose_epsilon(1_000_000, 0.05).unwrap();
        assert_abs_diff_eq!(e.eps_mean, 0.0019599640, epsilon = 1e-8);
        assert_abs_diff_eq!(e.eps_cov, 0.0019599650, epsilon = 1e-8);
        assert_abs_diff_eq!(e.eps_var, 0.0027776080, epsilon = 1e-7);
        assert_abs_diff_eq!(e.eps_final, e.eps_var, epsilon = 0.0);
    }

    #[test]
    fn cov_band_always_exceeds_mean_band() {
        for n in [3usize, 5, 10, 100, 5000] {
            for sig in [0.01, 0.05, 0.2] {
                let e = choose_epsilon(n, sig).unwrap();
                assert!(e.eps_cov > e.eps_mean);
                assert_abs_diff_eq!(e.eps_final, e.eps_var.max(e.eps_cov), epsilon = 0.0);
            }
        }
    }

    #[test]
    fn strictly_decreasing_in_n() {
        let mut prev_mean = f64::INFINITY;
        let mut prev_cov = f64::INFINITY;
        for n in [3usize, 4, 8, 20, 100, 1000] {
            let e = choose_epsilon(n, 0.05).unwrap();
            assert!(e.eps_mean < prev_mean);
            assert!(e.eps_cov < prev_cov);
            prev_mean = e.eps_mean;
            prev_cov = e.eps_cov;
        }
    }

    #[test]
    fn too_few_documents_is_an_error() {
        assert!(choose_epsilon(2, 0.05).is_err());
        assert!(choose_epsilon(3, 0.05).is_ok());
    }

    #[test]
    fn invalid_sig_level_is_an_error() {
        assert!(choose_epsilon(10, 0.0).is_err());
        assert!(choose_epsilon(10, 1.0).is_err());
    }
}
