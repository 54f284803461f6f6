//! Scalar characteristics of a final microstructure.

use serde::{Deserialize, Serialize};

use super::params::SimParams;
use super::sim::{wavenumbers_sq, PhaseField};
use crate::error::{Error, Result};
use crate::fft::{Complex, Fft2};

pub const N_TARGETS: usize = 6;

pub const TARGET_NAMES: [&str; N_TARGETS] = [
    "min_composition",
    "max_composition",
    "mean_abs_chemical_potential",
    "gradient_energy_density",
    "majority_phase_area_fraction",
    "characteristic_length",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub min_composition: f64,
    pub max_composition: f64,
    /// Grid mean of `|A(c³ − c) − κ∇²c|`.
    pub mean_abs_mu: f64,
    /// Grid mean of `(κx cx² + κy cy²) / 2`.
    pub gradient_energy: f64,
    /// Fraction of cells with `c > 0`.
    pub area_fraction: f64,
    /// `2π / ⟨|k|⟩` with the structure factor as weight, zero mode excluded.
    pub length_scale: f64,
    /// Set when the field carries no spectral power outside the zero mode;
    /// the length scale then defaults to the grid size.
    pub length_undefined: bool,
}

impl TargetVector {
    pub fn to_array(&self) -> [f64; N_TARGETS] {
        [
            self.min_composition,
            self.max_composition,
            self.mean_abs_mu,
            self.gradient_energy,
            self.area_fraction,
            self.length_scale,
        ]
    }
}

pub fn extract_targets(field: &PhaseField, params: &SimParams) -> Result<TargetVector> {
    if !field.is_finite() {
        return Err(Error::InvalidTensor("field has non-finite values".into()));
    }
    let n = field.size();
    let n2 = (n * n) as f64;
    let mut fft = Fft2::new(n).ok_or(Error::GridNotPowerOfTwo(n))?;
    let c_hat = field.spectrum(&mut fft);
    let (kx2, ky2) = wavenumbers_sq(n);
    let (kappa_x, kappa_y) = params.kappa_xy();
    let kappa_k2: Vec<f64> = kx2
        .iter()
        .zip(&ky2)
        .map(|(a, b)| kappa_x * a + kappa_y * b)
        .collect();

    // -κ∇²c in real space
    let mut lap: Vec<Complex> = c_hat
        .iter()
        .zip(&kappa_k2)
        .map(|(z, kk)| z.scale(*kk))
        .collect();
    fft.inverse(&mut lap);
    let a = params.well_height;
    let mean_abs_mu = field
        .values()
        .iter()
        .zip(&lap)
        .map(|(&c, g)| (a * (c * c * c - c) + g.re).abs())
        .sum::<f64>()
        / n2;

    let gradient_energy = c_hat
        .iter()
        .zip(&kappa_k2)
        .map(|(z, kk)| kk * z.norm_sqr())
        .sum::<f64>()
        / (2.0 * n2 * n2);

    let area_fraction = field.values().iter().filter(|&&c| c > 0.0).count() as f64 / n2;

    let (mut weighted, mut power) = (0.0, 0.0);
    for (i, z) in c_hat.iter().enumerate().skip(1) {
        let s = z.norm_sqr();
        weighted += (kx2[i] + ky2[i]).sqrt() * s;
        power += s;
    }
    let constant = field.min() == field.max() || power == 0.0;
    let length_scale = if constant {
        n as f64
    } else {
        (2.0 * std::f64::consts::PI / (weighted / power)).min(n as f64)
    };

    Ok(TargetVector {
        min_composition: field.min(),
        max_composition: field.max(),
        mean_abs_mu,
        gradient_energy,
        area_fraction,
        length_scale,
        length_undefined: constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_field_closed_form() {
        let p = SimParams::mid_range();
        for c0 in [-0.3, 0.0, 0.25] {
            let f = PhaseField::uniform(32, c0).unwrap();
            let t = extract_targets(&f, &p).unwrap();
            assert_eq!(t.min_composition, c0);
            assert_eq!(t.max_composition, c0);
            let a = p.well_height;
            let want = (a * (c0 * c0 * c0 - c0)).abs();
            assert!((t.mean_abs_mu - want).abs() <= 1e-12 * want.max(1e-300));
            assert_eq!(t.gradient_energy, 0.0);
            assert_eq!(t.area_fraction, if c0 > 0.0 { 1.0 } else { 0.0 });
            assert!(t.length_undefined);
            assert_eq!(t.length_scale, 32.0);
        }
    }

    #[test]
    fn single_mode_length_is_grid_size() {
        let n = 64;
        let values = (0..n * n)
            .map(|i| (2.0 * std::f64::consts::PI * (i % n) as f64 / n as f64).sin())
            .collect();
        let f = PhaseField::new(n, values).unwrap();
        let t = extract_targets(&f, &SimParams::mid_range()).unwrap();
        assert!((t.length_scale - n as f64).abs() < 1e-9, "{}", t.length_scale);
        assert!(!t.length_undefined);
        assert!(t.min_composition <= f.mean() && f.mean() <= t.max_composition);
    }

    #[test]
    fn single_mode_gradient_energy_matches_analytic() {
        // c = sin(2πx/n): mean(cx²) = (2π/n)²/2
        let n = 32;
        let values = (0..n * n)
            .map(|i| (2.0 * std::f64::consts::PI * (i % n) as f64 / n as f64).sin())
            .collect();
        let f = PhaseField::new(n, values).unwrap();
        let p = SimParams::mid_range();
        let t = extract_targets(&f, &p).unwrap();
        let k = 2.0 * std::f64::consts::PI / n as f64;
        let want = p.kappa_xy().0 * k * k / 4.0;
        assert!((t.gradient_energy - want).abs() < 1e-12 * want.max(1.0));
    }
}
