//! ABCD engine: round-trip matrices, Gaussian eigenmodes, stability scans and
//! the closed-form waist and tolerance estimates.

use std::ops::Mul;

use num_complex::Complex;
use rayon::prelude::*;
use thiserror::Error;

use crate::optics::{OpticalSystem, Surface, SurfaceKind};
use crate::prescription::{CavityPrescription, PrescriptionError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum ParaxialError {
    #[error("no stable mode: |trace/2| = {half_trace}")]
    NoStableMode { half_trace: f64 },
    #[error("reference plane at {z_m} m is not on the forward leg of the trajectory")]
    ReferenceOutside { z_m: f64 },
    #[error(transparent)]
    Prescription(#[from] PrescriptionError),
}

/// 2x2 ray-transfer matrix acting on (position, slope).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abcd<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Real> Abcd<T> {
    pub fn new(a: T, b: T, c: T, d: T) -> Self {
        Self { a, b, c, d }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::one())
    }

    pub fn propagation(length: T) -> Self {
        Self::new(T::one(), length, T::zero(), T::one())
    }

    pub fn thin_lens(focal: T) -> Self {
        Self::new(T::one(), T::zero(), -focal.recip(), T::one())
    }

    /// Reflection off a mirror of radius `r` (positive = focusing).
    pub fn mirror(r: T) -> Self {
        Self::new(T::one(), T::zero(), -T::two() / r, T::one())
    }

    pub fn det(&self) -> T {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> T {
        self.a + self.d
    }

    pub fn half_trace(&self) -> T {
        self.trace() / T::two()
    }

    pub fn is_stable(&self) -> bool {
        self.half_trace().abs() < T::one()
    }

    pub fn apply(&self, x: T, slope: T) -> (T, T) {
        (self.a * x + self.b * slope, self.c * x + self.d * slope)
    }

    /// Transform a complex beam parameter.
    pub fn apply_q(&self, q: Complex<T>) -> Complex<T> {
        (q * self.a + self.b) / (q * self.c + self.d)
    }

    pub fn to_f64(&self) -> Abcd<f64> {
        Abcd::new(self.a.as_f64(), self.b.as_f64(), self.c.as_f64(), self.d.as_f64())
    }

    pub fn entries(&self) -> [T; 4] {
        [self.a, self.b, self.c, self.d]
    }
}

impl<T: Real> Mul for Abcd<T> {
    type Output = Self;

    fn mul(self, r: Self) -> Self {
        Self::new(
            dot2(self.a, r.a, self.b, r.c),
            dot2(self.a, r.b, self.b, r.d),
            dot2(self.c, r.a, self.d, r.c),
            dot2(self.c, r.b, self.d, r.d),
        )
    }
}

/// `a b + c d` with the rounding error of `c d` recovered by a fused multiply-add.
fn dot2<T: Real>(a: T, b: T, c: T, d: T) -> T {
    let cd = c * d;
    let err = c.mul_add(d, -cd);
    a.mul_add(b, cd) + err
}

/// Paraxial matrix of one surface interaction.
pub fn surface_matrix<T: Real>(s: &Surface<T>, forward: bool) -> Abcd<T> {
    let c = if forward { s.curvature } else { -s.curvature };
    match s.kind {
        SurfaceKind::Reflect => Abcd::new(T::one(), T::zero(), T::two() * c, T::one()),
        SurfaceKind::Refract => {
            let (n1, n2) = s.indices(forward);
            Abcd::new(T::one(), T::zero(), -(n2 - n1) * c / n2, n1 / n2)
        }
        SurfaceKind::Stop => Abcd::identity(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferencePlane<T> {
    /// The launch plane at the near end mirror, heading toward +z.
    Launch,
    /// Axial position (m) in free space, on the first forward leg.
    Axial(T),
}

/// Matrix of the closed trajectory beginning and ending at `reference`.
pub fn round_trip_matrix<T: Real>(
    system: &OpticalSystem<T>,
    reference: ReferencePlane<T>,
) -> Result<Abcd<T>, ParaxialError> {
    let path = &system.path;
    let n = path.len();
    let z_of = |i: usize| system.surfaces[path[i].surface].z;
    let (start, z_ref) = match reference {
        ReferencePlane::Launch => (0, system.launch_z),
        ReferencePlane::Axial(z) => {
            let first_back = path.iter().position(|s| !s.forward).unwrap_or(n);
            let i = (0..first_back)
                .find(|&i| z_of(i) > z)
                .ok_or(ParaxialError::ReferenceOutside { z_m: z.as_f64() })?;
            (i, z)
        }
    };
    let mut m = Abcd::identity();
    let mut z = z_ref;
    for k in 0..n {
        let step = path[(start + k) % n];
        let s = &system.surfaces[step.surface];
        m = surface_matrix(s, step.forward) * Abcd::propagation((s.z - z).abs()) * m;
        z = s.z;
    }
    Ok(Abcd::propagation((z_ref - z).abs()) * m)
}

/// Round-trip matrix of a prescription at its declared reference plane, or at
/// the launch plane when none is declared.
pub fn prescription_matrix(p: &CavityPrescription) -> Result<Abcd<f64>, ParaxialError> {
    let sys = OpticalSystem::<f64>::from_prescription(p)?;
    let reference = sys.reference_z.map_or(ReferencePlane::Launch, ReferencePlane::Axial);
    round_trip_matrix(&sys, reference)
}

/// Self-consistent Gaussian beam state of a resonator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParam<T> {
    /// Complex beam parameter at the reference plane (m).
    pub q: Complex<T>,
    /// Waist radius (m), `sqrt(lambda Im(q) / pi)`.
    pub waist: T,
    /// Gouy phase per round trip in `[0, 2pi)`.
    pub gouy: T,
    pub wavelength: T,
}

impl<T: Real> BeamParam<T> {
    pub fn waist_um(&self) -> f64 {
        self.waist.as_f64() * 1e6
    }

    pub fn rayleigh_range(&self) -> T {
        self.q.im
    }
}

/// Eigenmode of a round-trip matrix at wavelength `wavelength` (m).
pub fn eigen_mode<T: Real>(m: &Abcd<T>, wavelength: T) -> Result<BeamParam<T>, ParaxialError> {
    let half = m.half_trace();
    if !(half.abs() < T::one()) || m.c == T::zero() {
        return Err(ParaxialError::NoStableMode { half_trace: half.as_f64() });
    }
    let two = T::two();
    let amd = m.a - m.d;
    let disc = -(amd * amd + T::lit(4.0) * m.b * m.c);
    if !(disc > T::zero()) {
        return Err(ParaxialError::NoStableMode { half_trace: half.as_f64() });
    }
    let q = Complex::new(amd / (two * m.c), disc.sqrt() / (two * m.c.abs()));
    let eig = Complex::new(m.a, T::zero()) + Complex::new(m.b, T::zero()) / q;
    let tau = two * T::PI();
    let mut gouy = (-eig.arg()) % tau;
    if gouy < T::zero() {
        gouy = gouy + tau;
    }
    Ok(BeamParam {
        q,
        waist: (wavelength * q.im / T::PI()).sqrt(),
        gouy,
        wavelength,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSample {
    pub displacement_mm: f64,
    pub half_trace: f64,
    pub stable: bool,
    pub waist_um: Option<f64>,
    pub gouy_rad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityScan {
    pub element: String,
    pub axis: &'static str,
    pub samples: Vec<ScanSample>,
}

impl StabilityScan {
    /// Width (mm) of the stable interval containing the sample nearest zero
    /// displacement, with edges interpolated where `|trace/2|` crosses 1.
    pub fn stable_width_mm(&self) -> Option<f64> {
        let s = &self.samples;
        let center = s
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.displacement_mm.abs().total_cmp(&b.1.displacement_mm.abs()))?
            .0;
        if !s[center].stable {
            return None;
        }
        let crossing = |i: usize, j: usize| {
            let (a, b) = (&s[i], &s[j]);
            let (fa, fb) = (a.half_trace.abs() - 1.0, b.half_trace.abs() - 1.0);
            if (fb - fa).abs() < f64::MIN_POSITIVE {
                return b.displacement_mm;
            }
            a.displacement_mm + (b.displacement_mm - a.displacement_mm) * (-fa) / (fb - fa)
        };
        let mut lo = center;
        while lo > 0 && s[lo - 1].stable {
            lo -= 1;
        }
        let mut hi = center;
        while hi + 1 < s.len() && s[hi + 1].stable {
            hi += 1;
        }
        let left = if lo > 0 { crossing(lo, lo - 1) } else { s[lo].displacement_mm };
        let right = if hi + 1 < s.len() { crossing(hi, hi + 1) } else { s[hi].displacement_mm };
        Some(right - left)
    }
}

/// Scan the axial position of one element over `[range.0, range.1]` mm and
/// record the mode at the reference plane. Unstable or geometrically invalid
/// displacements are flagged, not reported as errors.
pub fn stability_scan(
    p: &CavityPrescription,
    element: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<StabilityScan, ParaxialError> {
    stability_scan_group(p, &[element], range, steps)
}

fn displaced(p: &CavityPrescription, elements: &[usize], d: f64) -> Result<CavityPrescription, ParaxialError> {
    let mut order = elements.to_vec();
    order.sort_unstable();
    if d > 0.0 {
        order.reverse();
    }
    let mut q = p.clone();
    for &e in &order {
        q = q.with_displacement(e, d)?;
    }
    Ok(q)
}

/// Scan in which every element of `elements` moves together along the axis.
pub fn stability_scan_group(
    p: &CavityPrescription,
    elements: &[usize],
    range: (f64, f64),
    steps: usize,
) -> Result<StabilityScan, ParaxialError> {
    let steps = steps.max(2);
    let sys = OpticalSystem::<f64>::from_prescription(p)?;
    let wavelength = sys.trap_wavelength;
    let mut samples: Vec<ScanSample> = (0..steps)
        .into_par_iter()
        .map(|i| {
            let d = range.0 + (range.1 - range.0) * i as f64 / (steps - 1) as f64;
            let matrix = displaced(p, elements, d).and_then(|q| prescription_matrix(&q));
            match matrix {
                Ok(m) => {
                    let mode = eigen_mode(&m, wavelength).ok();
                    ScanSample {
                        displacement_mm: d,
                        half_trace: m.half_trace(),
                        stable: mode.is_some(),
                        waist_um: mode.map(|b| b.waist_um()),
                        gouy_rad: mode.map(|b| b.gouy),
                    }
                }
                Err(_) => ScanSample {
                    displacement_mm: d,
                    half_trace: f64::INFINITY,
                    stable: false,
                    waist_um: None,
                    gouy_rad: None,
                },
            }
        })
        .collect();
    let tau = std::f64::consts::TAU;
    let mut prev: Option<f64> = None;
    for s in &mut samples {
        if let Some(g) = &mut s.gouy_rad {
            if let Some(p) = prev {
                *g += tau * ((p - *g) / tau).round();
            }
            prev = Some(*g);
        }
    }
    Ok(StabilityScan {
        element: elements
            .iter()
            .map(|&e| p.elements[e].name.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        axis: "z",
        samples,
    })
}

/// Closed-form atom-plane waist `(1/M) sqrt(f lambda / pi)` and whether the
/// approximation `f^2 << M^4 R^2` holds (by two orders of magnitude).
pub fn analytic_waist<T: Real>(magnification: T, f_mla: T, wavelength: T, roc: T) -> (T, bool) {
    let w = (f_mla * wavelength / T::PI()).sqrt() / magnification;
    let m2 = magnification * magnification;
    let valid = f_mla * f_mla < T::lit(0.01) * m2 * m2 * roc * roc;
    (w, valid)
}

/// Angular error from the curved mirror for a lateral mode offset `d`, and the
/// ratio of the mode divergence to it.
pub fn mirror_slope_error<T: Real>(d: T, roc: T, magnification: T, waist: T, wavelength: T) -> (T, T) {
    let dtheta = (T::two() * d / roc).atan() / magnification;
    let divergence = wavelength / (T::PI() * magnification * waist);
    (dtheta, divergence / dtheta)
}

/// Full width of the stable region, twice the Rayleigh range of the waist.
pub fn stability_width<T: Real>(waist: T, wavelength: T) -> T {
    T::two() * T::PI() * waist * waist / wavelength
}
