//! Product-kernel density estimate of each centroid within its ball-query
//! neighborhood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm_sq, sub, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeConfig {
    /// Bandwidth σ in meters, shared by all three axes.
    pub bandwidth: f64,
    pub kernel: KernelKind,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self { bandwidth: 0.25, kernel: KernelKind::Gaussian }
    }
}

impl KdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::Config(format!("kde bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn kernel_1d(u: f64, kernel: KernelKind) -> f64 {
    match kernel {
        KernelKind::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
        KernelKind::Epanechnikov => {
            if u.abs() <= 1.0 {
                0.75 * (1.0 - u * u)
            } else {
                0.0
            }
        }
    }
}

/// Product kernel over the three axes of `(a - b) / σ`.
#[inline]
fn product_kernel(a: Vec3, b: Vec3, inv_bw: f64, kernel: KernelKind) -> f64 {
    match kernel {
        // Π_d φ(u_d) = (2π)^{-3/2} exp(-|u|²/2)
        KernelKind::Gaussian => {
            let u2 = norm_sq(sub(a, b)) * inv_bw * inv_bw;
            INV_SQRT_2PI * INV_SQRT_2PI * INV_SQRT_2PI * (-0.5 * u2).exp()
        }
        KernelKind::Epanechnikov => (0..3).map(|d| kernel_1d((a[d] - b[d]) * inv_bw, kernel)).product(),
    }
}

/// Likelihood of each target under the KDE built from `neighborhood`:
/// `1 / (|N| σ³) · Σ_i Π_d w((t_d − c_{i,d}) / σ)`. A target that is itself a
/// member contributes its own self term.
pub fn kde_likelihood(targets: &[Vec3], neighborhood: &[Vec3], cfg: &KdeConfig) -> Result<Vec<f64>> {
    if neighborhood.is_empty() {
        return Err(Error::Contract("kde neighborhood must be non-empty".into()));
    }
    cfg.validate()?;
    let inv_bw = 1.0 / cfg.bandwidth;
    let norm = 1.0 / (neighborhood.len() as f64 * cfg.bandwidth.powi(3));
    Ok(targets
        .iter()
        .map(|&t| {
            let s: f64 = neighborhood.iter().map(|&c| product_kernel(t, c, inv_bw, cfg.kernel)).sum();
            s * norm
        })
        .collect())
}

/// Likelihood of every member of `points` under the KDE of the same set.
/// Uses kernel symmetry so each pair is evaluated once.
pub fn kde_self_likelihood(points: &[Vec3], cfg: &KdeConfig) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Contract("kde neighborhood must be non-empty".into()));
    }
    cfg.validate()?;
    let n = points.len();
    let inv_bw = 1.0 / cfg.bandwidth;
    let self_term = product_kernel(points[0], points[0], inv_bw, cfg.kernel);
    let mut acc = vec![self_term; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let w = product_kernel(points[i], points[j], inv_bw, cfg.kernel);
            acc[i] += w;
            acc[j] += w;
        }
    }
    let norm = 1.0 / (n as f64 * cfg.bandwidth.powi(3));
    Ok(acc.into_iter().map(|s| s * norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn gaussian_mode() {
        assert!((kernel_1d(0.0, KernelKind::Gaussian) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-16);
    }

    #[test]
    fn epanechnikov_support() {
        assert_eq!(kernel_1d(1.0, KernelKind::Epanechnikov), 0.0);
        assert_eq!(kernel_1d(-1.0, KernelKind::Epanechnikov), 0.0);
        assert_eq!(kernel_1d(1.5, KernelKind::Epanechnikov), 0.0);
        assert_eq!(kernel_1d(0.0, KernelKind::Epanechnikov), 0.75);
    }

    #[test]
    fn gaussian_is_even() {
        for k in 0..100 {
            let u = (k as f64 * 0.731).sin() * 4.0;
            assert_eq!(kernel_1d(u, KernelKind::Gaussian), kernel_1d(-u, KernelKind::Gaussian));
        }
    }

    #[test]
    fn single_member_self_likelihood() {
        let cfg = KdeConfig::default();
        let c = [1.0, 2.0, 3.0];
        let p = kde_likelihood(&[c], &[c], &cfg).unwrap()[0];
        let expected = kernel_1d(0.0, KernelKind::Gaussian).powi(3) / 0.25f64.powi(3);
        assert!((p - expected).abs() <= 1e-14 * expected);
    }

    #[test]
    fn coincident_members_keep_mode_density() {
        let cfg = KdeConfig::default();
        let c = [0.5, -0.5, 0.0];
        let p = kde_likelihood(&[c, c], &[c, c], &cfg).unwrap();
        let expected = kernel_1d(0.0, KernelKind::Gaussian).powi(3) / 0.25f64.powi(3);
        for v in p {
            assert!((v - expected).abs() <= 1e-14 * expected);
        }
    }

    #[test]
    fn empty_neighborhood_rejected() {
        assert!(kde_likelihood(&[[0.0; 3]], &[], &KdeConfig::default()).is_err());
        assert!(kde_self_likelihood(&[], &KdeConfig::default()).is_err());
    }

    #[test]
    fn self_likelihood_matches_general_form() {
        let pts: Vec<Vec3> = (0..9)
            .map(|i| {
                let t = i as f64;
                [(t * 1.3).sin(), (t * 0.7).cos(), (t * 2.1).sin() * 0.5]
            })
            .collect();
        for kernel in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let cfg = KdeConfig { bandwidth: 0.4, kernel };
            let a = kde_likelihood(&pts, &pts, &cfg).unwrap();
            let b = kde_self_likelihood(&pts, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-13 * x.abs().max(1e-300));
            }
        }
    }
}
