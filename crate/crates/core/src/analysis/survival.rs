use serde::Serialize;

use super::AnalysisError;
use crate::atomsim::SpcmTrace;
use crate::optim::golden_section;

/// Sums over every full run of `window` consecutive bins; element `k` covers
/// bins `k..k + window`.
pub fn moving_sum(counts: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || counts.len() < window {
        return Vec::new();
    }
    let mut acc: f64 = counts[..window].iter().sum();
    let mut out = Vec::with_capacity(counts.len() - window + 1);
    out.push(acc);
    for k in window..counts.len() {
        acc += counts[k] - counts[k - window];
        out.push(acc);
    }
    out
}

/// Divide by the discrimination threshold so that 1 separates the classes.
pub fn normalize_by_threshold(values: &[f64], threshold: f64) -> Vec<f64> {
    values.iter().map(|v| v / threshold).collect()
}

/// Occupancy per window (`moving sum > threshold`), stamped at the window center (s).
pub fn occupancy_from_trace(trace: &SpcmTrace, window: usize, threshold: f64) -> Vec<(f64, bool)> {
    let counts: Vec<f64> = trace.counts.iter().map(|&c| c as f64).collect();
    let bin = trace.bin_ms * 1e-3;
    moving_sum(&counts, window)
        .into_iter()
        .enumerate()
        .map(|(k, s)| ((k as f64 + window as f64 / 2.0) * bin, s > threshold))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalFit {
    /// Decay rate (1/s); zero for non-decaying data.
    pub rate: f64,
    /// Lifetime (s), `+inf` when no decay is resolved.
    pub tau_s: f64,
    pub residual: f64,
}

impl SurvivalFit {
    pub fn survival(&self, t: f64) -> f64 {
        (-self.rate * t).exp()
    }
}

/// Least-squares fit of `exp(-t / tau)` to surviving fractions.
pub fn survival_fit(times: &[f64], fractions: &[f64]) -> Result<SurvivalFit, AnalysisError> {
    if times.len() != fractions.len() {
        return Err(AnalysisError::Invalid("times and fractions differ in length".into()));
    }
    if times.len() < 2 {
        return Err(AnalysisError::TooFewSamples {
            needed: 2,
            got: times.len(),
        });
    }
    if times.iter().chain(fractions).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let t_max = times.iter().fold(0.0f64, |a, &t| a.max(t.abs()));
    if t_max == 0.0 {
        return Err(AnalysisError::Invalid("all samples at t = 0".into()));
    }
    let cost = |g: f64| -> f64 {
        times
            .iter()
            .zip(fractions)
            .map(|(&t, &f)| (f - (-g * t).exp()).powi(2))
            .sum()
    };
    let hi = 1e3 / t_max;
    let g = golden_section(cost, 0.0, hi, 1e-12 / t_max);
    let (rate, residual) = if cost(0.0) <= cost(g) || g < 1e-9 / t_max {
        (0.0, cost(0.0))
    } else {
        (g, cost(g))
    };
    Ok(SurvivalFit {
        rate,
        tau_s: if rate > 0.0 { 1.0 / rate } else { f64::INFINITY },
        residual,
    })
}
