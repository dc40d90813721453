//! Gabor kernel synthesis and wavelet-subband orientation mapping.
//!
//! A kernel entry at grid position (x, y) — x right, y down, origin at the
//! kernel center — is
//!
//! ```text
//! G(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)
//! x' =  x cos(theta) + y sin(theta)
//! y' = -x sin(theta) + y cos(theta)
//! ```
//!
//! The envelope width, phase and aspect ratio are fixed; the wavelength
//! lambda is the one learnable degree of freedom and is clamped to
//! [`LAMBDA_MIN`], [`LAMBDA_MAX`] before synthesis. Each detail subband gets
//! the orientation of its dominant variation: HL (horizontal differences)
//! maps to 0 deg, LH to 90 deg, HH to 45 deg.

use std::f64::consts::PI;

use crate::tensor::{invalid, Result};

pub const SIGMA: f64 = 2.0 * PI;
pub const PSI: f64 = 0.0;
pub const GAMMA: f64 = 0.5;
pub const KSIZE: usize = 7;
pub const LAMBDA_INIT: f64 = 2.0;
pub const LAMBDA_MIN: f64 = 0.1;
pub const LAMBDA_MAX: f64 = 8.0;

/// Wavelet subband identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Ll,
    Hl,
    Lh,
    Hh,
}

/// Orientation (radians) matched to a detail band's dominant direction.
/// The LL band carries no direction and is rejected.
pub fn subband_orientation(band: Band) -> Result<f64> {
    match band {
        Band::Hl => Ok(0.0),
        Band::Lh => Ok(PI / 2.0),
        Band::Hh => Ok(PI / 4.0),
        Band::Ll => Err(invalid(
            "subband_orientation",
            "LL band has no dominant orientation".into(),
        )),
    }
}

/// How detail-band orientations are chosen (the directionality ablations).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GaborDirs {
    /// Each band gets its matched orientation (HL 0, LH 90, HH 45 deg).
    Matched,
    /// HL and LH deliberately swapped (LH 0, HL 90, HH 45 deg).
    Misaligned,
    /// One shared orientation for all bands, in radians.
    Unified(f64),
    /// Orientations drawn uniformly from [0, pi) at parameter construction.
    Random,
    /// Each band filtered at every angle in [`FUSED_ANGLES_DEG`], responses
    /// averaged.
    Fused,
    /// Gabor filtering replaced by a learnable 3x3 depthwise conv per band.
    ConvOnly,
}

/// The multi-direction fusion angle set: the four principal orientations.
/// A cosine Gabor at psi = 0 is symmetric under a 180-degree rotation, so
/// these cover the full orientation circle without duplicates.
pub const FUSED_ANGLES_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

pub fn fused_angles() -> [f64; 4] {
    FUSED_ANGLES_DEG.map(|d| d.to_radians())
}

/// Kernel values on a `ksize x ksize` grid, row-major, y increasing downward.
pub fn kernel_values(
    lambda: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    gamma: f64,
    ksize: usize,
) -> Vec<f64> {
    let half = (ksize / 2) as f64;
    let mut out = Vec::with_capacity(ksize * ksize);
    for i in 0..ksize {
        let y = i as f64 - half;
        for j in 0..ksize {
            let x = j as f64 - half;
            let xp = x * theta.cos() + y * theta.sin();
            let yp = -x * theta.sin() + y * theta.cos();
            let env = (-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)).exp();
            out.push(env * (2.0 * PI * xp / lambda + psi).cos());
        }
    }
    out
}

/// Elementwise derivative of [`kernel_values`] with respect to lambda:
/// `dG/dlambda = env * sin(2 pi x'/lambda + psi) * 2 pi x' / lambda^2`.
pub fn kernel_dlambda(
    lambda: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    gamma: f64,
    ksize: usize,
) -> Vec<f64> {
    let half = (ksize / 2) as f64;
    let mut out = Vec::with_capacity(ksize * ksize);
    for i in 0..ksize {
        let y = i as f64 - half;
        for j in 0..ksize {
            let x = j as f64 - half;
            let xp = x * theta.cos() + y * theta.sin();
            let yp = -x * theta.sin() + y * theta.cos();
            let env = (-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)).exp();
            let arg = 2.0 * PI * xp / lambda + psi;
            out.push(env * arg.sin() * 2.0 * PI * xp / (lambda * lambda));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::gabor_point;

    #[test]
    fn kernel_matches_pointwise_formula_everywhere() {
        for &(lambda, theta) in &[
            (2.0, 0.0),
            (2.0, PI / 2.0),
            (2.0, PI / 4.0),
            (0.5, 1.0),
            (8.0, 2.3),
            (3.7, PI / 3.0),
        ] {
            let k = kernel_values(lambda, theta, PSI, SIGMA, GAMMA, KSIZE);
            let half = (KSIZE / 2) as f64;
            for i in 0..KSIZE {
                for j in 0..KSIZE {
                    let expected =
                        gabor_point(j as f64 - half, i as f64 - half, lambda, theta, PSI, SIGMA, GAMMA);
                    assert!(
                        (k[i * KSIZE + j] - expected).abs() <= 1e-12,
                        "mismatch at ({i},{j}) lambda={lambda} theta={theta}"
                    );
                }
            }
        }
    }

    #[test]
    fn center_right_point_value() {
        let k = kernel_values(2.0, 0.0, PSI, SIGMA, GAMMA, KSIZE);
        let half = KSIZE / 2;
        let g = k[half * KSIZE + half + 1];
        let closed = -(-1.0 / (8.0 * PI * PI)).exp();
        assert!((g - closed).abs() <= 1e-12);
        assert!((g + 0.987423).abs() <= 1e-5);
        // Center is exp(0) * cos(psi) = 1.
        assert!((k[half * KSIZE + half] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn dlambda_matches_finite_difference() {
        let h = 1e-6;
        for &(lambda, theta) in &[(2.0, 0.0), (1.3, 0.7), (5.0, PI / 4.0)] {
            let d = kernel_dlambda(lambda, theta, PSI, SIGMA, GAMMA, KSIZE);
            let up = kernel_values(lambda + h, theta, PSI, SIGMA, GAMMA, KSIZE);
            let dn = kernel_values(lambda - h, theta, PSI, SIGMA, GAMMA, KSIZE);
            for i in 0..d.len() {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!(
                    (d[i] - fd).abs() <= 1e-6,
                    "dlambda mismatch at {i}: {} vs {}",
                    d[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn orientations_match_bands() {
        assert_eq!(subband_orientation(Band::Hl).unwrap(), 0.0);
        assert_eq!(subband_orientation(Band::Lh).unwrap(), PI / 2.0);
        assert_eq!(subband_orientation(Band::Hh).unwrap(), PI / 4.0);
        assert!(subband_orientation(Band::Ll).is_err());
    }
}
