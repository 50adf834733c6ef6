use serde::Serialize;

use super::AnalysisError;

/// Fraction of the total trap-light shift that sets the ground-state trap depth.
pub const LIGHT_SHIFT_DEPTH_FRACTION: f64 = 0.43;
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Waist (m) of a harmonic Gaussian trap with depth `depth_j`, radial
/// frequency `frequency_hz` and atom mass `mass_kg`.
pub fn trap_waist(depth_j: f64, frequency_hz: f64, mass_kg: f64) -> f64 {
    (depth_j / mass_kg).sqrt() / (std::f64::consts::PI * frequency_hz)
}

/// Small-oscillation frequency (Hz) of `-U exp(-2 r^2 / w^2)` from a central
/// finite difference of the potential.
pub fn gaussian_trap_frequency(depth_j: f64, waist_m: f64, mass_kg: f64) -> f64 {
    let v = |r: f64| -depth_j * (-2.0 * r * r / (waist_m * waist_m)).exp();
    let h = waist_m * 1e-4;
    let k = (v(h) - 2.0 * v(0.0) + v(-h)) / (h * h);
    (k / mass_kg).sqrt() / std::f64::consts::TAU
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrapMeasurement {
    pub depth_j: f64,
    pub frequency_khz: f64,
    pub mass_kg: f64,
}

impl TrapMeasurement {
    pub fn new(depth_j: f64, frequency_khz: f64, mass_kg: f64) -> Result<Self, AnalysisError> {
        if !(depth_j > 0.0 && frequency_khz > 0.0 && mass_kg > 0.0) {
            return Err(AnalysisError::Invalid("trap depth, frequency and mass must be positive".into()));
        }
        Ok(Self {
            depth_j,
            frequency_khz,
            mass_kg,
        })
    }

    /// Measurement from the total light shift (MHz) of the imaging transition.
    pub fn from_light_shift(shift_mhz: f64, frequency_khz: f64, mass_kg: f64) -> Result<Self, AnalysisError> {
        Self::new(LIGHT_SHIFT_DEPTH_FRACTION * PLANCK * shift_mhz * 1e6, frequency_khz, mass_kg)
    }

    pub fn waist_um(&self) -> f64 {
        trap_waist(self.depth_j, self.frequency_khz * 1e3, self.mass_kg) * 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{BOLTZMANN, RB87_MASS_KG};
    use crate::rng::substream;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn reference_like_waist() {
        let w = trap_waist(BOLTZMANN * 300e-6, 53.4e3, 1.443e-25);
        assert!((w * 1e6 - 1.01).abs() < 0.005, "{w}");
        let w4 = trap_waist(4.0 * BOLTZMANN * 300e-6, 53.4e3, 1.443e-25);
        assert!((w4 / w - 2.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_oracle_inverts_waist() {
        let u = BOLTZMANN * 300e-6;
        for w_um in [0.5, 0.8, 1.0, 1.5, 2.0] {
            let nu = gaussian_trap_frequency(u, w_um * 1e-6, RB87_MASS_KG);
            let back = trap_waist(u, nu, RB87_MASS_KG) * 1e6;
            assert!((back / w_um - 1.0).abs() < 0.01, "{back} vs {w_um}");
        }
    }

    #[test]
    fn array_mean_waist() {
        let mut r = substream(11, crate::rng::TRAPS, 0);
        let wd = Normal::new(1.01, 0.07).unwrap();
        let ud = Normal::new(300e-6, 30e-6).unwrap();
        let mut truth = Vec::new();
        let mut fitted = Vec::new();
        for _ in 0..400 {
            let w = wd.sample(&mut r);
            let u = BOLTZMANN * ud.sample(&mut r);
            let nu = gaussian_trap_frequency(u, w * 1e-6, RB87_MASS_KG);
            let m = TrapMeasurement::new(u, nu * 1e-3, RB87_MASS_KG).unwrap();
            truth.push(w);
            fitted.push(m.waist_um());
        }
        let mean = crate::stats::mean(&fitted);
        let sd = crate::stats::variance(&fitted).sqrt();
        assert!((mean - crate::stats::mean(&truth)).abs() < 1e-3);
        assert!((mean - 1.01).abs() < 0.015, "{mean}");
        assert!((sd - crate::stats::variance(&truth).sqrt()).abs() < 2e-3);
    }

    #[test]
    fn light_shift_conversion() {
        let m = TrapMeasurement::from_light_shift(10.0, 50.0, RB87_MASS_KG).unwrap();
        assert!((m.depth_j - 0.43 * PLANCK * 1e7).abs() < 1e-40);
        assert!(TrapMeasurement::new(-1.0, 1.0, 1.0).is_err());
    }
}
