//! Phase-mask synthesis for the tweezer array: superposed gratings on the
//! SLM, far-field simulation by FFT, weighted Gerchberg-Saxton homogenization
//! and spot-position refinement against target modes.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HologramError {
    #[error("hologram has no targets")]
    NoTargets,
    #[error("grid must be at least 2x2 pixels with positive pitch and padding")]
    InvalidGrid,
    #[error("target {0} has a non-finite or negative parameter")]
    InvalidTarget(usize),
    #[error("optics parameters must be positive")]
    InvalidOptics,
    #[error("spot {index} left its search window (offset {offset_px:.2} px)")]
    SpotLost { index: usize, offset_px: f64 },
    #[error("{0}")]
    Mismatch(String),
}

/// One requested spot in the atom plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub x_um: f64,
    pub y_um: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Target {
    pub fn at(x_um: f64, y_um: f64) -> Self {
        Self {
            x_um,
            y_um,
            amplitude: 1.0,
            phase: 0.0,
        }
    }
}

/// Square `n x n` array of unit-amplitude targets with spacing `pitch_um`,
/// centered on the optical axis.
pub fn square_array(n: usize, pitch_um: f64) -> Vec<Target> {
    let c = (n as f64 - 1.0) / 2.0;
    (0..n * n)
        .map(|k| Target::at((k % n) as f64 - c, (k / n) as f64 - c))
        .map(|t| Target::at(t.x_um * pitch_um, t.y_um * pitch_um))
        .collect()
}

/// Intensity profile illuminating the SLM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputProfile {
    Uniform,
    /// Gaussian with 1/e^2 intensity radius `waist_mm`.
    Gaussian { waist_mm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HologramSpec {
    pub targets: Vec<Target>,
    pub magnification: f64,
    pub focal_mm: f64,
    pub wavelength_nm: f64,
    pub pixels: (usize, usize),
    pub pitch_um: f64,
    pub padding: usize,
    pub input: InputProfile,
    pub disk_radius_px: f64,
}

impl HologramSpec {
    pub fn new(targets: Vec<Target>) -> Self {
        Self {
            targets,
            magnification: 100.0,
            focal_mm: 300.0,
            wavelength_nm: 785.0,
            pixels: (512, 512),
            pitch_um: 15.0,
            padding: 2,
            input: InputProfile::Gaussian { waist_mm: 2.7 },
            disk_radius_px: 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), HologramError> {
        if self.targets.is_empty() {
            return Err(HologramError::NoTargets);
        }
        if self.pixels.0 < 2 || self.pixels.1 < 2 || !(self.pitch_um > 0.0) || self.padding == 0 {
            return Err(HologramError::InvalidGrid);
        }
        let optics = [self.magnification, self.focal_mm, self.wavelength_nm, self.disk_radius_px];
        if optics.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(HologramError::InvalidOptics);
        }
        if let InputProfile::Gaussian { waist_mm } = self.input {
            if !(waist_mm.is_finite() && waist_mm > 0.0) {
                return Err(HologramError::InvalidOptics);
            }
        }
        for (i, t) in self.targets.iter().enumerate() {
            let finite = [t.x_um, t.y_um, t.amplitude, t.phase].iter().all(|v| v.is_finite());
            if !finite || t.amplitude < 0.0 {
                return Err(HologramError::InvalidTarget(i));
            }
        }
        Ok(())
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.pixels.0 * self.padding, self.pixels.1 * self.padding)
    }

    /// Atom-plane size of one far-field pixel (um) along x and y.
    pub fn atom_pixel_um(&self) -> (f64, f64) {
        let (px, py) = self.padded();
        let num = self.wavelength_nm * 1e-9 * self.focal_mm * 1e-3;
        let den = self.magnification * self.pitch_um * 1e-6;
        (num / (den * px as f64) * 1e6, num / (den * py as f64) * 1e6)
    }

    /// Far-field pixel (column, row) where a spot at `(x_um, y_um)` lands.
    pub fn predicted_pixel(&self, x_um: f64, y_um: f64) -> (f64, f64) {
        let (px, py) = self.padded();
        let (sx, sy) = self.atom_pixel_um();
        (x_um / sx + (px / 2) as f64, y_um / sy + (py / 2) as f64)
    }

    /// Inverse of [`Self::predicted_pixel`].
    pub fn pixel_to_um(&self, u: f64, v: f64) -> (f64, f64) {
        let (px, py) = self.padded();
        let (sx, sy) = self.atom_pixel_um();
        ((u - (px / 2) as f64) * sx, (v - (py / 2) as f64) * sy)
    }

    /// Atom-plane 1/e^2 intensity radius of a single focused spot (um).
    pub fn spot_waist_um(&self) -> f64 {
        let lf = self.wavelength_nm * 1e-9 * self.focal_mm * 1e-3;
        let w = match self.input {
            InputProfile::Gaussian { waist_mm } => lf / (PI * self.magnification * waist_mm * 1e-3),
            InputProfile::Uniform => {
                let d = self.pixels.0.min(self.pixels.1) as f64 * self.pitch_um * 1e-6;
                lf / (self.magnification * d)
            }
        };
        w * 1e6
    }

    /// SLM-plane coordinates (m) of pixel centers along x and y.
    fn coords(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.pitch_um * 1e-6;
        let axis = |n: usize| (0..n).map(|i| (i as f64 - (n / 2) as f64) * p).collect();
        (axis(self.pixels.0), axis(self.pixels.1))
    }

    /// Input intensity on the SLM grid, row-major.
    pub fn input_intensity(&self) -> Vec<f64> {
        let (xs, ys) = self.coords();
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                out.push(match self.input {
                    InputProfile::Uniform => 1.0,
                    InputProfile::Gaussian { waist_mm } => {
                        let w = waist_mm * 1e-3;
                        (-2.0 * (x * x + y * y) / (w * w)).exp()
                    }
                });
            }
        }
        out
    }
}

/// SLM grating wavevector (rad/m) for each target.
pub fn grating_wavevectors(spec: &HologramSpec) -> Vec<(f64, f64)> {
    let s = TAU * spec.magnification / (spec.wavelength_nm * 1e-9 * spec.focal_mm * 1e-3);
    spec.targets.iter().map(|t| (s * t.x_um * 1e-6, s * t.y_um * 1e-6)).collect()
}

/// Phase mask over the SLM, row-major, values in `[-pi, pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    pub nx: usize,
    pub ny: usize,
    pub phase: Vec<f64>,
}

impl PhaseMask {
    pub fn uniform(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            phase: vec![0.0; nx * ny],
        }
    }

    /// 8-bit gray levels mapping `[-pi, pi)` onto `0..=255`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.phase
            .iter()
            .map(|p| (((p + PI) / TAU * 256.0).floor() as i64).clamp(0, 255) as u8)
            .collect()
    }
}

fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Per-target phasor tables `e^{i k_x x}` and `e^{i k_y y}`.
fn phasors(spec: &HologramSpec) -> Vec<(Vec<Complex64>, Vec<Complex64>)> {
    let (xs, ys) = spec.coords();
    grating_wavevectors(spec)
        .into_iter()
        .map(|(kx, ky)| {
            (
                xs.iter().map(|x| Complex64::from_polar(1.0, kx * x)).collect(),
                ys.iter().map(|y| Complex64::from_polar(1.0, ky * y)).collect(),
            )
        })
        .collect()
}

fn superpose(spec: &HologramSpec, table: &[(Vec<Complex64>, Vec<Complex64>)], weights: &[f64], phases: &[f64]) -> PhaseMask {
    let (nx, ny) = spec.pixels;
    let coeff: Vec<Complex64> = weights
        .iter()
        .zip(phases)
        .map(|(&a, &t)| Complex64::from_polar(a, t))
        .collect();
    let mut phase = vec![0.0; nx * ny];
    phase.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        let rowc: Vec<Complex64> = table.iter().zip(&coeff).map(|((_, ey), c)| c * ey[iy]).collect();
        for (ix, out) in row.iter_mut().enumerate() {
            let mut sum = Complex64::new(0.0, 0.0);
            for ((ex, _), c) in table.iter().zip(&rowc) {
                sum += c * ex[ix];
            }
            *out = if sum.norm_sqr() == 0.0 { 0.0 } else { wrap_phase(sum.arg()) };
        }
    });
    PhaseMask { nx, ny, phase }
}

/// Phase of the superposed target gratings with their amplitudes and phases.
pub fn synthesize_phase_mask(spec: &HologramSpec) -> Result<PhaseMask, HologramError> {
    spec.validate()?;
    let weights: Vec<f64> = spec.targets.iter().map(|t| t.amplitude).collect();
    let phases: Vec<f64> = spec.targets.iter().map(|t| t.phase).collect();
    Ok(superpose(spec, &phasors(spec), &weights, &phases))
}

/// Far-field intensity, row-major, zero frequency at `(px / 2, py / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FarField {
    pub nx: usize,
    pub ny: usize,
    pub intensity: Vec<f64>,
}

fn fft2(data: &mut [Complex64], nx: usize, ny: usize) {
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(nx);
    data.par_chunks_mut(nx).for_each(|r| row.process(r));
    let mut t = vec![Complex64::new(0.0, 0.0); nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            t[ix * ny + iy] = data[iy * nx + ix];
        }
    }
    let col = planner.plan_fft_forward(ny);
    t.par_chunks_mut(ny).for_each(|c| col.process(c));
    for ix in 0..nx {
        for iy in 0..ny {
            data[((iy + ny / 2) % ny) * nx + (ix + nx / 2) % nx] = t[ix * ny + iy];
        }
    }
}

/// Complex far field of `sqrt(I0) e^{i phase}` zero-padded by `padding`,
/// unnormalized forward transform, shifted so zero frequency sits at the center.
pub fn farfield_field(mask: &PhaseMask, input: &[f64], padding: usize) -> Result<(usize, usize, Vec<Complex64>), HologramError> {
    if input.len() != mask.phase.len() {
        return Err(HologramError::Mismatch(format!(
            "input has {} pixels, mask has {}",
            input.len(),
            mask.phase.len()
        )));
    }
    if padding == 0 {
        return Err(HologramError::InvalidGrid);
    }
    let (px, py) = (mask.nx * padding, mask.ny * padding);
    let mut data = vec![Complex64::new(0.0, 0.0); px * py];
    for iy in 0..mask.ny {
        for ix in 0..mask.nx {
            let k = iy * mask.nx + ix;
            data[iy * px + ix] = Complex64::from_polar(input[k].sqrt(), mask.phase[k]);
        }
    }
    fft2(&mut data, px, py);
    Ok((px, py, data))
}

/// `|F(sqrt(I0) e^{i phase})|^2`; total power equals `sum(I0) * px * py`.
pub fn simulate_farfield(mask: &PhaseMask, input: &[f64], padding: usize) -> Result<FarField, HologramError> {
    let (nx, ny, field) = farfield_field(mask, input, padding)?;
    Ok(FarField {
        nx,
        ny,
        intensity: field.iter().map(|c| c.norm_sqr()).collect(),
    })
}

impl FarField {
    fn disk(&self, center: (f64, f64), radius: f64) -> impl Iterator<Item = (usize, usize)> + '_ {
        let x0 = ((center.0 - radius).floor().max(0.0)) as usize;
        let x1 = ((center.0 + radius).ceil() as usize).min(self.nx - 1);
        let y0 = ((center.1 - radius).floor().max(0.0)) as usize;
        let y1 = ((center.1 + radius).ceil() as usize).min(self.ny - 1);
        (y0..=y1).flat_map(move |iy| {
            (x0..=x1).filter_map(move |ix| {
                let (dx, dy) = (ix as f64 - center.0, iy as f64 - center.1);
                (dx * dx + dy * dy <= radius * radius).then_some((ix, iy))
            })
        })
    }

    /// Intensity summed over a disk.
    pub fn disk_power(&self, center: (f64, f64), radius: f64) -> f64 {
        self.disk(center, radius).map(|(x, y)| self.intensity[y * self.nx + x]).sum()
    }

    /// Intensity-weighted centroid over a disk.
    pub fn centroid(&self, center: (f64, f64), radius: f64) -> (f64, f64) {
        let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (x, y) in self.disk(center, radius) {
            let i = self.intensity[y * self.nx + x];
            s += i;
            sx += i * x as f64;
            sy += i * y as f64;
        }
        (sx / s, sy / s)
    }

    /// Pixel of maximum intensity.
    pub fn peak(&self) -> (usize, usize) {
        let k = (0..self.intensity.len())
            .max_by(|&a, &b| self.intensity[a].total_cmp(&self.intensity[b]))
            .unwrap_or(0);
        (k % self.nx, k / self.nx)
    }

    pub fn total(&self) -> f64 {
        self.intensity.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpotReport {
    pub index: usize,
    pub x_um: f64,
    pub y_um: f64,
    pub predicted_px: (f64, f64),
    pub centroid_px: (f64, f64),
    pub power: f64,
    pub relative_power: f64,
}

/// Measured power and centroid of every target spot.
pub fn spot_report(spec: &HologramSpec, farfield: &FarField) -> Vec<SpotReport> {
    let r = spec.disk_radius_px;
    let powers: Vec<f64> = spec
        .targets
        .iter()
        .map(|t| farfield.disk_power(spec.predicted_pixel(t.x_um, t.y_um), r))
        .collect();
    let mean = powers.iter().sum::<f64>() / powers.len() as f64;
    spec.targets
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let c = spec.predicted_pixel(t.x_um, t.y_um);
            SpotReport {
                index,
                x_um: t.x_um,
                y_um: t.y_um,
                predicted_px: c,
                centroid_px: farfield.centroid(c, r),
                power: powers[index],
                relative_power: powers[index] / mean,
            }
        })
        .collect()
}

/// Population standard deviation over mean.
pub fn relative_spread(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    var.sqrt() / m
}

#[derive(Debug, Clone, PartialEq)]
pub struct WgsResult {
    /// Targets with WGS weights as amplitudes (max 1) and far-field phases.
    pub spec: HologramSpec,
    pub mask: PhaseMask,
    /// Relative spread of measured to requested spot power, one entry per
    /// iteration, measured before that iteration's update.
    pub history: Vec<f64>,
    pub powers: Vec<f64>,
}

/// Weighted Gerchberg-Saxton homogenization of the spot powers relative to
/// the requested `amplitude^2`.
pub fn wgs_homogenize(spec: &HologramSpec, iterations: usize) -> Result<WgsResult, HologramError> {
    spec.validate()?;
    let iterations = iterations.max(1);
    let table = phasors(spec);
    let input = spec.input_intensity();
    let amp: Vec<f64> = input.iter().map(|v| v.sqrt()).collect();
    let requested: Vec<f64> = spec.targets.iter().map(|t| t.amplitude * t.amplitude).collect();
    if requested.iter().all(|&r| r == 0.0) {
        return Err(HologramError::InvalidTarget(0));
    }
    let mut weights: Vec<f64> = spec.targets.iter().map(|t| t.amplitude).collect();
    let mut phases: Vec<f64> = spec.targets.iter().map(|t| t.phase).collect();
    if phases.iter().all(|&p| p == phases[0]) {
        phases = newman_phases(phases.len());
    }
    let centers: Vec<(f64, f64)> = spec.targets.iter().map(|t| spec.predicted_pixel(t.x_um, t.y_um)).collect();
    let active: Vec<usize> = (0..requested.len()).filter(|&m| requested[m] > 0.0).collect();
    let mut history = Vec::with_capacity(iterations);
    let mut mask = superpose(spec, &table, &weights, &phases);
    let mut powers = Vec::new();
    for it in 0..iterations {
        let ff = simulate_farfield(&mask, &input, spec.padding)?;
        powers = centers.iter().map(|&c| ff.disk_power(c, spec.disk_radius_px)).collect();
        for &m in &active {
            let c = ff.centroid(centers[m], 2.0 * spec.disk_radius_px);
            let offset_px = ((c.0 - centers[m].0).powi(2) + (c.1 - centers[m].1).powi(2)).sqrt();
            if !(offset_px <= spec.disk_radius_px) {
                return Err(HologramError::SpotLost { index: m, offset_px });
            }
        }
        let ratio: Vec<f64> = active.iter().map(|&m| powers[m] / requested[m]).collect();
        history.push(relative_spread(&ratio));
        if it + 1 == iterations {
            break;
        }
        let mean = ratio.iter().sum::<f64>() / ratio.len() as f64;
        let fields = spot_fields(spec, &table, &amp, &mask);
        for (j, &m) in active.iter().enumerate() {
            weights[m] *= (mean / ratio[j]).sqrt();
            phases[m] = fields[m].arg();
        }
        let wmax = weights.iter().cloned().fold(0.0, f64::max);
        weights.iter_mut().for_each(|w| *w /= wmax);
        mask = superpose(spec, &table, &weights, &phases);
    }
    let mut out = spec.clone();
    for (t, (w, p)) in out.targets.iter_mut().zip(weights.iter().zip(&phases)) {
        t.amplitude = *w;
        t.phase = p.rem_euclid(TAU);
    }
    Ok(WgsResult {
        spec: out,
        mask,
        history,
        powers,
    })
}

/// Quadratic phase sequence `pi (m - 1)^2 / n` with low peak-to-mean ratio,
/// used to seed WGS when the requested phases are all equal.
pub fn newman_phases(n: usize) -> Vec<f64> {
    (0..n).map(|m| PI * (m * m) as f64 / n as f64).collect()
}

/// Far-field amplitude at each target's exact spatial frequency.
fn spot_fields(
    spec: &HologramSpec,
    table: &[(Vec<Complex64>, Vec<Complex64>)],
    amp: &[f64],
    mask: &PhaseMask,
) -> Vec<Complex64> {
    let nx = spec.pixels.0;
    let field: Vec<Complex64> = amp
        .iter()
        .zip(&mask.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    table
        .par_iter()
        .map(|(ex, ey)| {
            field
                .chunks(nx)
                .zip(ey)
                .map(|(row, y)| row.iter().zip(ex).map(|(f, x)| f * x.conj()).sum::<Complex64>() * y.conj())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionResult {
    pub targets: Vec<Target>,
    /// Final overlap of each spot with its mode.
    pub overlaps: Vec<f64>,
    /// Mean overlap after the initial evaluation and each accepted step.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Normalized overlap of each far-field spot with a Gaussian mode of 1/e^2
/// intensity radius `mode_waist_um` centered at the corresponding mode center.
pub fn mode_overlaps(spec: &HologramSpec, modes_um: &[(f64, f64)], mode_waist_um: f64) -> Result<Vec<f64>, HologramError> {
    let mask = synthesize_phase_mask(spec)?;
    let (nx, ny, field) = farfield_field(&mask, &spec.input_intensity(), spec.padding)?;
    let (sx, sy) = spec.atom_pixel_um();
    Ok(modes_um
        .iter()
        .map(|&(mx, my)| {
            let (cu, cv) = spec.predicted_pixel(mx, my);
            let (wx, wy) = (mode_waist_um / sx, mode_waist_um / sy);
            let (rx, ry) = (3.0 * wx, 3.0 * wy);
            let x0 = (cu - rx).floor().max(0.0) as usize;
            let x1 = ((cu + rx).ceil() as usize).min(nx - 1);
            let y0 = (cv - ry).floor().max(0.0) as usize;
            let y1 = ((cv + ry).ceil() as usize).min(ny - 1);
            let (mut inner, mut gg, mut ee) = (Complex64::new(0.0, 0.0), 0.0, 0.0);
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let (dx, dy) = ((ix as f64 - cu) / wx, (iy as f64 - cv) / wy);
                    let g = (-(dx * dx + dy * dy)).exp();
                    let e = field[iy * nx + ix];
                    inner += e * g;
                    gg += g * g;
                    ee += e.norm_sqr();
                }
            }
            if ee == 0.0 {
                0.0
            } else {
                inner.norm_sqr() / (gg * ee)
            }
        })
        .collect())
}

/// Coordinate-descent refinement of target positions maximizing the mean
/// overlap with the mode at each entry of `modes_um`, one step size at a time.
pub fn optimize_positions(
    spec: &HologramSpec,
    modes_um: &[(f64, f64)],
    mode_waist_um: f64,
    steps_um: &[f64],
) -> Result<PositionResult, HologramError> {
    const MAX_SWEEPS: usize = 50;
    if modes_um.len() != spec.targets.len() {
        return Err(HologramError::Mismatch(format!(
            "{} modes for {} targets",
            modes_um.len(),
            spec.targets.len()
        )));
    }
    let mut cur = spec.clone();
    let score = |s: &HologramSpec| -> Result<(f64, Vec<f64>), HologramError> {
        let o = mode_overlaps(s, modes_um, mode_waist_um)?;
        Ok((o.iter().sum::<f64>() / o.len() as f64, o))
    };
    let (mut best, mut overlaps) = score(&cur)?;
    let mut history = vec![best];
    let mut converged = steps_um.is_empty();
    for (k, &step) in steps_um.iter().enumerate() {
        let last = k + 1 == steps_um.len();
        for _ in 0..MAX_SWEEPS {
            let mut improved = false;
            for m in 0..cur.targets.len() {
                for (dx, dy) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                    let mut trial = cur.clone();
                    trial.targets[m].x_um += dx;
                    trial.targets[m].y_um += dy;
                    let (s, o) = score(&trial)?;
                    if s > best {
                        best = s;
                        overlaps = o;
                        cur = trial;
                        history.push(best);
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                if last {
                    converged = true;
                }
                break;
            }
        }
    }
    Ok(PositionResult {
        targets: cur.targets,
        overlaps,
        history,
        converged,
    })
}
