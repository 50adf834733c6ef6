//! Synthetic data: stochastic loading of the conjugate waists, doubled-port
//! EMCCD fluorescence frames, counter time traces, cavity reflection spectra
//! and lens-scan detuning data.
//!
//! Frame container layout (little endian):
//!
//! ```text
//! bytes 0..8    magic "CAVFRM01"
//! bytes 8..12   width  (u32)
//! bytes 12..16  height (u32)
//! bytes 16..20  shots  (u32)
//! bytes 20..24  dtype  (u32, 1 = f32)
//! then shots * height * width f32 values, row-major per frame
//! ```

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, substream};

#[derive(Debug, Error)]
pub enum AtomSimError {
    #[error("`{name}` = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{0}")]
    Inconsistent(String),
    #[error("frame container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check(name: &'static str, value: f64, ok: bool, range: &'static str) -> Result<(), AtomSimError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(AtomSimError::OutOfRange { name, value, range })
    }
}

fn poisson(rng: &mut impl Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
    }
}

/// Loading outcome of every waist for every shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub p: f64,
    pub cavities: usize,
    pub shots: usize,
    /// `waists[shot * cavities + cavity]` holds the two conjugate waist indicators.
    pub waists: Vec<[bool; 2]>,
}

impl Occupancy {
    pub fn waist(&self, shot: usize, cavity: usize) -> [bool; 2] {
        self.waists[shot * self.cavities + cavity]
    }

    pub fn count(&self, shot: usize, cavity: usize) -> u8 {
        let w = self.waist(shot, cavity);
        w[0] as u8 + w[1] as u8
    }

    /// Fractions of cavity-shots holding 0, 1 and 2 atoms.
    pub fn fractions(&self) -> [f64; 3] {
        let mut n = [0usize; 3];
        for w in &self.waists {
            n[w[0] as usize + w[1] as usize] += 1;
        }
        let total = self.waists.len() as f64;
        [n[0] as f64 / total, n[1] as f64 / total, n[2] as f64 / total]
    }
}

/// Independent Bernoulli(`p`) loading of each of the two waists per cavity.
pub fn simulate_loading(p: f64, cavities: usize, shots: usize, seed: u64) -> Result<Occupancy, AtomSimError> {
    check("p", p, (0.0..=1.0).contains(&p), "[0, 1]")?;
    let waists = (0..shots)
        .into_par_iter()
        .flat_map_iter(|shot| {
            let mut r = substream(seed, rng::LOADING, shot as u64);
            (0..cavities)
                .map(|_| [r.random::<f64>() < p, r.random::<f64>() < p])
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Occupancy {
        p,
        cavities,
        shots,
        waists,
    })
}

/// Rectangular layout of the two output spots of every cavity, point-symmetric
/// about the array center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortGeometry {
    pub width: usize,
    pub height: usize,
    pub center: (f64, f64),
    /// First-port centers (pixel coordinates), one per cavity.
    pub ports: Vec<(f64, f64)>,
}

impl PortGeometry {
    /// `cavities` laid out in rows of `columns` above the center, each mirrored
    /// through the center onto its conjugate spot below.
    pub fn grid(cavities: usize, columns: usize, pitch_px: usize, margin_px: usize) -> Self {
        let columns = columns.max(1).min(cavities.max(1));
        let rows = cavities.div_ceil(columns).max(1);
        let pitch = pitch_px as f64;
        let cx = margin_px as f64 + (columns as f64 - 1.0) / 2.0 * pitch;
        let cy = margin_px as f64 + (rows as f64 - 0.5) * pitch;
        let ports = (0..cavities)
            .map(|c| {
                let (i, j) = (c % columns, c / columns);
                (cx + (i as f64 - (columns as f64 - 1.0) / 2.0) * pitch, cy + (j as f64 + 0.5) * pitch)
            })
            .collect();
        Self {
            width: (columns - 1) * pitch_px + 2 * margin_px + 1,
            height: (2 * rows - 1) * pitch_px + 2 * margin_px + 1,
            center: (cx, cy),
            ports,
        }
    }

    pub fn cavities(&self) -> usize {
        self.ports.len()
    }

    /// Centers of the two conjugate spots of `cavity`.
    pub fn conjugate_pair(&self, cavity: usize) -> [(f64, f64); 2] {
        let a = self.ports[cavity];
        [a, (2.0 * self.center.0 - a.0, 2.0 * self.center.1 - a.1)]
    }
}

/// How the photons of one occupied waist reach the two output ports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PortModel {
    /// Each detected photon leaves through either port with equal probability.
    #[default]
    Shared,
    /// All photons of waist `k` leave through port `k`.
    PerWaist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    /// Detected photons per millisecond from one occupied waist.
    pub photon_rate_per_ms: f64,
    pub exposure_ms: f64,
    /// Mean EM amplification per photoelectron.
    pub em_gain: f64,
    /// Gaussian read noise (counts).
    pub read_noise: f64,
    pub offset: f64,
    /// Uniform background photons per pixel per exposure.
    pub background: f64,
    pub psf_sigma_px: f64,
    pub port_model: PortModel,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            photon_rate_per_ms: 1.65,
            exposure_ms: 10.0,
            em_gain: 100.0,
            read_noise: 12.0,
            offset: 500.0,
            background: 0.005,
            psf_sigma_px: 1.0,
            port_model: PortModel::Shared,
        }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), AtomSimError> {
        check("photon_rate_per_ms", self.photon_rate_per_ms, self.photon_rate_per_ms >= 0.0, "[0, inf)")?;
        check("exposure_ms", self.exposure_ms, self.exposure_ms > 0.0, "(0, inf)")?;
        check("em_gain", self.em_gain, self.em_gain > 0.0, "(0, inf)")?;
        check("read_noise", self.read_noise, self.read_noise >= 0.0, "[0, inf)")?;
        check("background", self.background, self.background >= 0.0, "[0, inf)")?;
        check("psf_sigma_px", self.psf_sigma_px, self.psf_sigma_px >= 0.0, "[0, inf)")?;
        check("offset", self.offset, true, "finite")
    }

    pub fn mean_photons(&self) -> f64 {
        self.photon_rate_per_ms * self.exposure_ms
    }
}

/// One camera exposure, row-major counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Photon counts per pixel for one shot, before amplification.
fn photon_image(
    occ: &Occupancy,
    shot: usize,
    geometry: &PortGeometry,
    det: &DetectorModel,
    r: &mut impl Rng,
) -> Vec<u32> {
    let (w, h) = (geometry.width, geometry.height);
    let mut img = vec![0u32; w * h];
    let psf = Normal::new(0.0, det.psf_sigma_px.max(0.0)).unwrap();
    let mut deposit = |r: &mut dyn rand::RngCore, c: (f64, f64), n: u64| {
        for _ in 0..n {
            let x = (c.0 + psf.sample(r)).round();
            let y = (c.1 + psf.sample(r)).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                img[y as usize * w + x as usize] += 1;
            }
        }
    };
    for cav in 0..occ.cavities {
        let pair = geometry.conjugate_pair(cav);
        for (k, &occupied) in occ.waist(shot, cav).iter().enumerate() {
            if !occupied {
                continue;
            }
            let n = poisson(r, det.mean_photons());
            match det.port_model {
                PortModel::PerWaist => deposit(r, pair[k], n),
                PortModel::Shared => {
                    let mut first = 0;
                    for _ in 0..n {
                        if r.random::<bool>() {
                            first += 1;
                        }
                    }
                    deposit(r, pair[0], first);
                    deposit(r, pair[1], n - first);
                }
            }
        }
    }
    if det.background > 0.0 {
        for v in img.iter_mut() {
            *v += poisson(r, det.background) as u32;
        }
    }
    img
}

/// Fluorescence frames for every shot of `occ`.
pub fn simulate_frames(
    occ: &Occupancy,
    geometry: &PortGeometry,
    det: &DetectorModel,
    seed: u64,
) -> Result<Vec<Frame>, AtomSimError> {
    det.validate()?;
    if geometry.cavities() != occ.cavities {
        return Err(AtomSimError::Inconsistent(format!(
            "geometry has {} cavities, occupancy has {}",
            geometry.cavities(),
            occ.cavities
        )));
    }
    let read = Normal::new(0.0, det.read_noise).unwrap();
    Ok((0..occ.shots)
        .into_par_iter()
        .map(|shot| {
            let mut r = substream(seed, rng::FRAMES, shot as u64);
            let photons = photon_image(occ, shot, geometry, det, &mut r);
            let pixels = photons
                .iter()
                .map(|&n| {
                    let electrons = if n == 0 {
                        0.0
                    } else {
                        Gamma::new(n as f64, det.em_gain).unwrap().sample(&mut r)
                    };
                    (det.offset + electrons + read.sample(&mut r)) as f32
                })
                .collect();
            Frame {
                width: geometry.width,
                height: geometry.height,
                pixels,
            }
        })
        .collect())
}

pub fn write_frames(out: &mut impl Write, frames: &[Frame]) -> Result<(), AtomSimError> {
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width, f.height));
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(AtomSimError::Format("frames differ in size".into()));
    }
    out.write_all(b"CAVFRM01")?;
    for v in [w as u32, h as u32, frames.len() as u32, 1u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(w * h * 4);
    for f in frames {
        buf.clear();
        for p in &f.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_frames(input: &mut impl Read) -> Result<Vec<Frame>, AtomSimError> {
    let mut header = [0u8; 24];
    input.read_exact(&mut header)?;
    if &header[..8] != b"CAVFRM01" {
        return Err(AtomSimError::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, shots, dtype) = (word(0), word(1), word(2), word(3));
    if dtype != 1 {
        return Err(AtomSimError::Format(format!("unsupported dtype {dtype}")));
    }
    let mut buf = vec![0u8; w * h * 4];
    (0..shots)
        .map(|_| {
            input.read_exact(&mut buf)?;
            Ok(Frame {
                width: w,
                height: h,
                pixels: buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            })
        })
        .collect()
}

/// Binned photon-counter record of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpcmTrace {
    pub bin_ms: f64,
    pub counts: Vec<u32>,
    pub bright_rate: f64,
    pub dark_rate: f64,
    pub tau_s: f64,
    /// Time the atom was lost (s); `None` when no atom was loaded or it outlived the trace.
    pub loss_time_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpcmModel {
    /// Counts per second while the atom is present.
    pub bright_rate: f64,
    /// Counts per second without an atom.
    pub dark_rate: f64,
    pub tau_s: f64,
    pub duration_s: f64,
    pub bin_ms: f64,
}

impl Default for SpcmModel {
    fn default() -> Self {
        Self {
            bright_rate: 4000.0,
            dark_rate: 300.0,
            tau_s: 1.0,
            duration_s: 1.0,
            bin_ms: 1.0,
        }
    }
}

/// Counter trace with exponentially distributed atom loss.
pub fn simulate_spcm_trace(occupied: bool, model: &SpcmModel, seed: u64, index: u64) -> Result<SpcmTrace, AtomSimError> {
    check("bright_rate", model.bright_rate, model.bright_rate >= 0.0, "[0, inf)")?;
    check("dark_rate", model.dark_rate, model.dark_rate >= 0.0, "[0, inf)")?;
    check("tau_s", model.tau_s, model.tau_s > 0.0, "(0, inf)")?;
    check("bin_ms", model.bin_ms, model.bin_ms > 0.0, "(0, inf)")?;
    check("duration_s", model.duration_s, model.duration_s > 0.0, "(0, inf)")?;
    let mut r = substream(seed, rng::SPCM, index);
    let bin = model.bin_ms * 1e-3;
    let bins = (model.duration_s / bin).round() as usize;
    let loss = occupied.then(|| Exp::new(1.0 / model.tau_s).unwrap().sample(&mut r));
    let counts = (0..bins)
        .map(|i| {
            let (t0, t1) = (i as f64 * bin, (i + 1) as f64 * bin);
            let bright_time = match loss {
                Some(l) => (l.min(t1) - t0).clamp(0.0, bin),
                None => 0.0,
            };
            let mean = model.bright_rate * bright_time + model.dark_rate * bin;
            poisson(&mut r, mean) as u32
        })
        .collect();
    Ok(SpcmTrace {
        bin_ms: model.bin_ms,
        counts,
        bright_rate: model.bright_rate,
        dark_rate: model.dark_rate,
        tau_s: model.tau_s,
        loss_time_s: loss.filter(|&l| l < model.duration_s),
    })
}

/// Many independent traces, index `i` drawn from substream `i`.
pub fn simulate_spcm_traces(n: usize, model: &SpcmModel, seed: u64) -> Result<Vec<SpcmTrace>, AtomSimError> {
    (0..n)
        .into_par_iter()
        .map(|i| simulate_spcm_trace(true, model, seed, i as u64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub fsr: f64,
    /// Full width at half maximum, same unit as `fsr`.
    pub linewidth: f64,
    pub depth: f64,
    /// Resonance shift of each mode in FSR units.
    pub detunings: Vec<f64>,
    pub start: f64,
    pub stop: f64,
    pub samples: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl SpectrumModel {
    pub fn new(fsr: f64, finesse: f64) -> Self {
        Self {
            fsr,
            linewidth: fsr / finesse,
            depth: 0.6,
            detunings: vec![0.0],
            start: -0.5 * fsr,
            stop: 2.5 * fsr,
            samples: 3001,
            noise: 0.0,
        }
    }

    /// Noiseless reflectance at frequency `f`.
    pub fn reflectance(&self, f: f64) -> f64 {
        let half = self.linewidth / 2.0;
        let mut dips = 0.0;
        for d in &self.detunings {
            let center = d * self.fsr;
            let n0 = ((self.start - center) / self.fsr).floor() as i64 - 3;
            let n1 = ((self.stop - center) / self.fsr).ceil() as i64 + 3;
            for n in n0..=n1 {
                let u = (f - center - n as f64 * self.fsr) / half;
                dips += self.depth / (1.0 + u * u);
            }
        }
        1.0 - dips
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub frequency: Vec<f64>,
    pub reflectance: Vec<f64>,
}

/// Reflection spectrum: Lorentzian dips spaced by the FSR, shifted per mode.
pub fn simulate_spectrum(model: &SpectrumModel, seed: u64) -> Result<Spectrum, AtomSimError> {
    check("fsr", model.fsr, model.fsr > 0.0, "(0, inf)")?;
    check("linewidth", model.linewidth, model.linewidth > 0.0 && model.linewidth < model.fsr, "(0, fsr)")?;
    check("noise", model.noise, model.noise >= 0.0, "[0, inf)")?;
    if model.samples < 2 || !(model.stop > model.start) {
        return Err(AtomSimError::Inconsistent("spectrum needs at least two samples over a positive span".into()));
    }
    let mut r = substream(seed, rng::SPECTRUM, 0);
    let noise = Normal::new(0.0, model.noise).unwrap();
    let step = (model.stop - model.start) / (model.samples - 1) as f64;
    let frequency: Vec<f64> = (0..model.samples).map(|i| model.start + i as f64 * step).collect();
    let reflectance = frequency
        .iter()
        .map(|&f| model.reflectance(f) + if model.noise > 0.0 { noise.sample(&mut r) } else { 0.0 })
        .collect();
    Ok(Spectrum { frequency, reflectance })
}

/// Distance (FSR units, in `[0, 0.5]`) from each cavity resonance to the
/// reference resonance while the spherical lens is displaced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetuningScan {
    pub displacements_mm: Vec<f64>,
    pub indices: Vec<i32>,
    /// `detunings[cavity][sample]`
    pub detunings: Vec<Vec<f64>>,
}

pub fn fold_detuning(d: f64) -> f64 {
    (d - d.round()).abs()
}

/// Folded detuning of every cavity index over a lens scan, with per-cavity
/// offsets (FSR) and additive Gaussian noise.
pub fn simulate_detuning_scan(
    indices: &[i32],
    xi_mm: f64,
    displacements_mm: &[f64],
    offsets: &[f64],
    noise: f64,
    seed: u64,
) -> Result<DetuningScan, AtomSimError> {
    check("xi_mm", xi_mm, xi_mm > 0.0, "(0, inf)")?;
    if offsets.len() != indices.len() {
        return Err(AtomSimError::Inconsistent("one offset per cavity index required".into()));
    }
    let n = Normal::new(0.0, noise.max(0.0)).unwrap();
    let detunings = indices
        .iter()
        .zip(offsets)
        .enumerate()
        .map(|(c, (&x, &off))| {
            let mut r = substream(seed, rng::DETUNING, c as u64);
            displacements_mm
                .iter()
                .map(|&dz| {
                    let d = crate::budget::detuning_sensitivity(x as f64, xi_mm, dz) + off;
                    (fold_detuning(d) + if noise > 0.0 { n.sample(&mut r) } else { 0.0 }).clamp(0.0, 0.5)
                })
                .collect()
        })
        .collect();
    Ok(DetuningScan {
        displacements_mm: displacements_mm.to_vec(),
        indices: indices.to_vec(),
        detunings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loading_fractions() {
        let occ = simulate_loading(0.18, 10, 10_000, 3).unwrap();
        let [_, single, double] = occ.fractions();
        let n = 100_000.0;
        let s1 = (0.2952f64 * (1.0 - 0.2952) / n).sqrt();
        let s2 = (0.0324f64 * (1.0 - 0.0324) / n).sqrt();
        assert!((single - 0.2952).abs() < 3.0 * s1, "{single}");
        assert!((double - 0.0324).abs() < 3.0 * s2, "{double}");
        assert_eq!(simulate_loading(0.0, 3, 10, 1).unwrap().fractions(), [1.0, 0.0, 0.0]);
        assert_eq!(simulate_loading(1.0, 3, 10, 1).unwrap().fractions(), [0.0, 0.0, 1.0]);
        assert!(simulate_loading(1.5, 3, 10, 1).is_err());
        assert_eq!(occ, simulate_loading(0.18, 10, 10_000, 3).unwrap());
    }

    #[test]
    fn conjugate_ports_are_point_symmetric() {
        let g = PortGeometry::grid(7, 3, 8, 6);
        for c in 0..7 {
            let [a, b] = g.conjugate_pair(c);
            assert_eq!(b.0, 2.0 * g.center.0 - a.0);
            assert_eq!(b.1, 2.0 * g.center.1 - a.1);
            for p in [a, b] {
                assert!(p.0 >= 6.0 && p.1 >= 6.0);
                assert!(p.0 <= (g.width - 7) as f64 && p.1 <= (g.height - 7) as f64);
            }
        }
    }

    #[test]
    fn dark_frames_sit_at_offset() {
        let occ = simulate_loading(1.0, 4, 3, 1).unwrap();
        let g = PortGeometry::grid(4, 2, 8, 6);
        let det = DetectorModel {
            photon_rate_per_ms: 0.0,
            background: 0.0,
            ..DetectorModel::default()
        };
        for f in simulate_frames(&occ, &g, &det, 9).unwrap() {
            let n = f.pixels.len() as f64;
            assert!((f.mean() - det.offset).abs() < 4.0 * det.read_noise / n.sqrt());
        }
    }

    fn port_photons(occ: &Occupancy, g: &PortGeometry, det: &DetectorModel, shot: usize) -> Vec<[u32; 2]> {
        let mut r = substream(5, rng::FRAMES, shot as u64);
        let img = photon_image(occ, shot, g, det, &mut r);
        (0..occ.cavities)
            .map(|c| {
                let pair = g.conjugate_pair(c);
                pair.map(|(x, y)| {
                    let mut s = 0;
                    for dy in -3i64..=3 {
                        for dx in -3i64..=3 {
                            s += img[(y as i64 + dy) as usize * g.width + (x as i64 + dx) as usize];
                        }
                    }
                    s
                })
            })
            .collect()
    }

    #[test]
    fn per_waist_light_reaches_one_port() {
        let occ = simulate_loading(0.5, 6, 50, 2).unwrap();
        let g = PortGeometry::grid(6, 3, 10, 6);
        let det = DetectorModel {
            port_model: PortModel::PerWaist,
            background: 0.0,
            psf_sigma_px: 0.0,
            ..DetectorModel::default()
        };
        for shot in 0..occ.shots {
            for (c, ports) in port_photons(&occ, &g, &det, shot).iter().enumerate() {
                let w = occ.waist(shot, c);
                for k in 0..2 {
                    if !w[k] {
                        assert_eq!(ports[k], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn summed_ports_scale_with_occupancy() {
        let occ = simulate_loading(0.5, 8, 2000, 4).unwrap();
        let g = PortGeometry::grid(8, 4, 10, 6);
        let det = DetectorModel {
            background: 0.0,
            psf_sigma_px: 0.0,
            ..DetectorModel::default()
        };
        let mut sums = [0.0; 3];
        let mut counts = [0.0; 3];
        for shot in 0..occ.shots {
            for (c, p) in port_photons(&occ, &g, &det, shot).iter().enumerate() {
                let k = occ.count(shot, c) as usize;
                sums[k] += (p[0] + p[1]) as f64;
                counts[k] += 1.0;
            }
        }
        let mu = det.mean_photons();
        assert_eq!(sums[0], 0.0);
        for k in 1..3 {
            let mean = sums[k] / counts[k];
            let sigma = (k as f64 * mu / counts[k]).sqrt();
            assert!((mean - k as f64 * mu).abs() < 3.0 * sigma, "{k}: {mean}");
        }
    }

    #[test]
    fn frame_container_roundtrip() {
        let occ = simulate_loading(0.3, 4, 3, 1).unwrap();
        let g = PortGeometry::grid(4, 2, 8, 6);
        let frames = simulate_frames(&occ, &g, &DetectorModel::default(), 2).unwrap();
        let mut buf = Vec::new();
        write_frames(&mut buf, &frames).unwrap();
        assert_eq!(buf.len(), 24 + 3 * g.width * g.height * 4);
        assert_eq!(read_frames(&mut buf.as_slice()).unwrap(), frames);
        assert_eq!(frames, simulate_frames(&occ, &g, &DetectorModel::default(), 2).unwrap());
    }

    #[test]
    fn spcm_traces() {
        let model = SpcmModel::default();
        let dark = simulate_spcm_trace(false, &model, 1, 0).unwrap();
        let mean = dark.counts.iter().sum::<u32>() as f64 / dark.counts.len() as f64;
        let expected = model.dark_rate * 1e-3;
        assert!((mean - expected).abs() < 4.0 * (expected / dark.counts.len() as f64).sqrt());
        assert_eq!(dark.loss_time_s, None);
        let traces = simulate_spcm_traces(20_000, &SpcmModel { duration_s: 0.01, ..model }, 2).unwrap();
        let alive = traces.iter().filter(|t| t.loss_time_s.is_none_or(|l| l > 0.004)).count() as f64;
        let frac = alive / 20_000.0;
        let p = (-0.004f64).exp();
        assert!((frac - p).abs() < 3.0 * (p * (1.0 - p) / 20_000.0).sqrt(), "{frac}");
        assert_eq!(simulate_spcm_trace(true, &model, 3, 7).unwrap(), simulate_spcm_trace(true, &model, 3, 7).unwrap());
    }

    #[test]
    fn spectrum_minima_on_fsr_grid() {
        let m = SpectrumModel::new(1.0, 13.4);
        let s = simulate_spectrum(&m, 0).unwrap();
        for n in 0..=2 {
            let target = n as f64;
            let i = s.frequency.iter().position(|&f| (f - target).abs() < 1e-9).unwrap();
            assert!(s.reflectance[i] < s.reflectance[i - 1] && s.reflectance[i] < s.reflectance[i + 1]);
        }
        let mut multi = m.clone();
        multi.detunings = [1, 2, 3].iter().map(|&x| crate::budget::detuning_sensitivity(x as f64, 19.0, 0.0)).collect();
        let s3 = simulate_spectrum(&multi, 0).unwrap();
        let i = s3.frequency.iter().position(|&f| f.abs() < 1e-9).unwrap();
        assert!((1.0 - s3.reflectance[i] - 3.0 * (1.0 - s.reflectance[i])).abs() < 1e-12);
    }

    #[test]
    fn detuning_scan_shape() {
        let dz: Vec<f64> = (0..41).map(|i| -1.0 + 0.05 * i as f64).collect();
        let scan = simulate_detuning_scan(&[0, 3], 19.0, &dz, &[0.1, 0.0], 0.0, 1).unwrap();
        assert!(scan.detunings[0].iter().all(|&d| (d - 0.1).abs() < 1e-12));
        assert!((scan.detunings[1][40] - fold_detuning(9.0 / 19.0)).abs() < 1e-12);
    }
}
