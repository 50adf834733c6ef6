use rayon::prelude::*;
use serde::Serialize;

use super::AnalysisError;
use crate::optim::NelderMead;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinesseFit {
    pub fsr: f64,
    pub linewidth: f64,
    pub finesse: f64,
    /// Position of the first fitted resonance.
    pub center: f64,
    pub depth: f64,
    pub baseline: f64,
    pub dips: usize,
    pub rms_residual: f64,
}

struct Dip {
    center: f64,
    width: f64,
}

fn detect_dips(frequency: &[f64], reflectance: &[f64]) -> (f64, f64, Vec<Dip>) {
    let baseline = crate::stats::median(reflectance);
    let min = reflectance.iter().copied().fold(f64::INFINITY, f64::min);
    let half = baseline - 0.5 * (baseline - min);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < reflectance.len() {
        if reflectance[i] < half {
            let start = i;
            while i < reflectance.len() && reflectance[i] < half {
                i += 1;
            }
            match runs.last_mut() {
                // noise splits a dip near its half-depth crossings
                Some(last) if start - last.1 <= 2.max((i - start).max(last.1 - last.0) / 2) => last.1 = i,
                _ => runs.push((start, i)),
            }
        } else {
            i += 1;
        }
    }
    let widest = runs.iter().map(|r| r.1 - r.0).max().unwrap_or(0);
    let step = frequency[1] - frequency[0];
    let dips = runs
        .into_iter()
        .filter(|&(a, b)| a > 0 && b < reflectance.len() && 4 * (b - a) >= widest)
        .map(|(a, b)| {
            let k = (a..b).min_by(|&x, &y| reflectance[x].total_cmp(&reflectance[y])).unwrap_or(a);
            Dip {
                center: frequency[k],
                width: (b - a) as f64 * step,
            }
        })
        .collect();
    (baseline, baseline - min, dips)
}

fn comb(f: f64, f0: f64, fsr: f64, width: f64, depth: f64, baseline: f64, range: (i64, i64)) -> f64 {
    let mut dips = 0.0;
    let n_here = ((f - f0) / fsr).round() as i64;
    for n in (n_here - 3).max(range.0)..=(n_here + 3).min(range.1) {
        let u = 2.0 * (f - f0 - n as f64 * fsr) / width;
        dips += 1.0 / (1.0 + u * u);
    }
    baseline - depth * dips
}

/// Fit a comb of Lorentzian dips and report FSR, linewidth and finesse.
pub fn finesse_from_spectrum(frequency: &[f64], reflectance: &[f64]) -> Result<FinesseFit, AnalysisError> {
    if frequency.len() != reflectance.len() {
        return Err(AnalysisError::Invalid("frequency and reflectance differ in length".into()));
    }
    if frequency.len() < 8 {
        return Err(AnalysisError::TooFewSamples {
            needed: 8,
            got: frequency.len(),
        });
    }
    if frequency.iter().chain(reflectance).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let step = (frequency[frequency.len() - 1] - frequency[0]) / (frequency.len() - 1) as f64;
    let (baseline, depth, dips) = detect_dips(frequency, reflectance);
    if dips.len() < 2 {
        return Err(AnalysisError::TooFewDips(dips.len()));
    }
    let width0 = crate::stats::mean(&dips.iter().map(|d| d.width).collect::<Vec<_>>());
    if width0 < 2.0 * step {
        return Err(AnalysisError::Unresolved { linewidth: width0, step });
    }
    let spacings: Vec<f64> = dips.windows(2).map(|w| w[1].center - w[0].center).collect();
    let fsr0 = crate::stats::median(&spacings);
    let f0 = dips[0].center;
    let lo = ((frequency[0] - f0) / fsr0).floor() as i64 - 3;
    let hi = ((frequency[frequency.len() - 1] - f0) / fsr0).ceil() as i64 + 3;
    let cost = |p: &[f64]| -> f64 {
        let (fsr, width) = (p[1].exp(), p[2].exp());
        frequency
            .iter()
            .zip(reflectance)
            .map(|(&f, &r)| (r - comb(f, p[0], fsr, width, p[3], p[4], (lo, hi))).powi(2))
            .sum()
    };
    let nm = NelderMead {
        max_iterations: 20_000,
        f_tol: 1e-13,
        x_tol: 1e-10,
    };
    let start = [f0, fsr0.ln(), width0.ln(), depth, baseline];
    let mut m = nm.minimize(cost, &start, &[width0 / 4.0, 0.01, 0.1, 0.05 * depth, 0.01 * depth]);
    for _ in 0..3 {
        let step = [width0 / 20.0, 1e-3, 0.02, 0.01 * depth, 0.002 * depth];
        let again = nm.minimize(cost, &m.x, &step);
        let done = (m.value - again.value).abs() <= 1e-12 * m.value.max(1e-300);
        m = again;
        if done {
            break;
        }
    }
    let (fsr, linewidth) = (m.x[1].exp(), m.x[2].exp());
    if !m.value.is_finite() {
        return Err(AnalysisError::NonConvergent { residual: m.value });
    }
    if linewidth < 2.0 * step {
        return Err(AnalysisError::Unresolved { linewidth, step });
    }
    Ok(FinesseFit {
        fsr,
        linewidth,
        finesse: fsr / linewidth,
        center: m.x[0],
        depth: m.x[3],
        baseline: m.x[4],
        dips: dips.len(),
        rms_residual: (m.value / frequency.len() as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CavitySlope {
    pub index: i32,
    /// Detuning change per displacement (FSR/mm).
    pub slope: f64,
    pub phase: f64,
    /// Displacement per FSR of detuning (mm); infinite for a zero slope.
    pub bandwidth_mm: f64,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetuningFit {
    pub xi_mm: f64,
    pub cavities: Vec<CavitySlope>,
}

fn tri(u: f64) -> f64 {
    (u - u.round()).abs()
}

fn fit_triangle(dz: &[f64], d: &[f64]) -> (f64, f64, f64) {
    let cost = |s: f64, phi: f64| -> f64 { dz.iter().zip(d).map(|(&z, &y)| (y - tri(s * z + phi)).powi(2)).sum() };
    let spacing = {
        let mut sorted = dz.to_vec();
        sorted.sort_by(f64::total_cmp);
        let gaps: Vec<f64> = sorted.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 0.0).collect();
        gaps.into_iter().fold(f64::INFINITY, f64::min)
    };
    let s_max = 0.25 / spacing;
    let (ns, np) = (600, 64);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=ns {
        let s = s_max * i as f64 / ns as f64;
        for j in 0..np {
            let phi = j as f64 / np as f64;
            let c = cost(s, phi);
            if c < best.0 {
                best = (c, s, phi);
            }
        }
    }
    let nm = NelderMead {
        max_iterations: 5000,
        f_tol: 1e-13,
        x_tol: 1e-12,
    };
    let m = nm.minimize(
        |p| cost(p[0].abs(), p[1]),
        &[best.1, best.2],
        &[s_max / ns as f64, 0.5 / np as f64],
    );
    let (s, phi, c) = if m.value < best.0 {
        (m.x[0].abs(), m.x[1].rem_euclid(1.0), m.value)
    } else {
        (best.1, best.2, best.0)
    };
    let reach = dz.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    // a slope whose phase excursion over the scan is below rounding is zero
    if s * reach < 1e-9 {
        (0.0, phi, cost(0.0, phi))
    } else {
        (s, phi, c)
    }
}

/// Triangle-wave fit of each cavity's folded detuning, and the degeneracy
/// coefficient from the quadratic scaling of slope with cavity index.
pub fn fit_detuning_slopes(
    displacements_mm: &[f64],
    indices: &[i32],
    detunings: &[Vec<f64>],
) -> Result<DetuningFit, AnalysisError> {
    if indices.len() != detunings.len() {
        return Err(AnalysisError::Invalid("one detuning series per cavity required".into()));
    }
    if displacements_mm.len() < 3 {
        return Err(AnalysisError::TooFewSamples {
            needed: 3,
            got: displacements_mm.len(),
        });
    }
    if detunings.iter().any(|d| d.len() != displacements_mm.len()) {
        return Err(AnalysisError::Invalid("detuning series length differs from displacements".into()));
    }
    if displacements_mm.iter().chain(detunings.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let cavities: Vec<CavitySlope> = indices
        .par_iter()
        .zip(detunings)
        .map(|(&index, d)| {
            let (slope, phase, cost) = fit_triangle(displacements_mm, d);
            CavitySlope {
                index,
                slope,
                phase,
                bandwidth_mm: if slope > 0.0 { 1.0 / slope } else { f64::INFINITY },
                rms_residual: (cost / d.len() as f64).sqrt(),
            }
        })
        .collect();
    let (num, den) = cavities.iter().filter(|c| c.index != 0).fold((0.0, 0.0), |(n, d), c| {
        let x2 = (c.index as f64).powi(2);
        (n + c.slope * x2, d + x2 * x2)
    });
    if den == 0.0 || num <= 0.0 {
        return Err(AnalysisError::Invalid("no off-axis cavity with a resolvable slope".into()));
    }
    Ok(DetuningFit {
        xi_mm: den / num,
        cavities,
    })
}
