use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use rayon::prelude::*;

use crate::optim::{golden_section, Minimum, NelderMead};

const MIN_SAMPLES: usize = 100;
const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BimodalModel {
    #[default]
    Gaussian,
    SkewGaussian,
}

/// Family of a mixture component; a Gaussian is a skew-Gaussian with zero shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentShape {
    Gaussian,
    SkewGaussian,
}

/// Skew-normal density with location `location`, scale `scale` and shape `shape`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Component {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Owen's T function by composite Simpson quadrature.
fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let n = 400;
    let step = a / n as f64;
    let f = |x: f64| (-0.5 * h * h * (1.0 + x * x)).exp() / (1.0 + x * x);
    let mut s = f(0.0) + f(a);
    for i in 1..n {
        s += f(i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * step / 3.0 / (2.0 * PI)
}

impl Component {
    pub fn gaussian(mean: f64, sd: f64) -> Self {
        Self {
            location: mean,
            scale: sd,
            shape: 0.0,
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        2.0 / self.scale * norm_pdf(z) * norm_cdf(self.shape * z)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        (norm_cdf(z) - 2.0 * owens_t(z, self.shape)).clamp(0.0, 1.0)
    }

    pub fn mean(&self) -> f64 {
        let delta = self.shape / (1.0 + self.shape * self.shape).sqrt();
        self.location + self.scale * delta * (2.0 / PI).sqrt()
    }

    fn affine(&self, center: f64, scale: f64) -> Self {
        Self {
            location: center + scale * self.location,
            scale: scale * self.scale,
            shape: self.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BimodalFit {
    pub model: BimodalModel,
    /// Priors of the (low, high) components; they sum to 1.
    pub weights: [f64; 2],
    pub components: [Component; 2],
    pub threshold: f64,
    pub fidelity: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// Threshold between the component means minimizing the prior-weighted
/// misclassification, and the resulting fidelity.
pub fn fidelity_of(components: &[Component; 2], weights: [f64; 2]) -> (f64, f64) {
    let (lo, hi) = if components[0].mean() <= components[1].mean() { (0, 1) } else { (1, 0) };
    let (c0, c1) = (components[lo], components[hi]);
    let (p0, p1) = (weights[lo], weights[hi]);
    let err = |t: f64| p0 * (1.0 - c0.cdf(t)) + p1 * c1.cdf(t);
    let (a, b) = (c0.mean(), c1.mean());
    if b - a <= 0.0 {
        return (a, 1.0 - err(a).min(p0.min(p1)));
    }
    let n = 400;
    let grid = |i: usize| a + (b - a) * i as f64 / n as f64;
    let best = (0..=n).min_by(|&i, &j| err(grid(i)).total_cmp(&err(grid(j)))).unwrap_or(0);
    let lo_t = grid(best.saturating_sub(1));
    let hi_t = grid((best + 1).min(n));
    let t = golden_section(err, lo_t, hi_t, (b - a) * 1e-9);
    let t = if err(t) <= err(grid(best)) { t } else { grid(best) };
    (t, 1.0 - err(t))
}

/// Best achievable accuracy on labeled scores with a single threshold
/// (`score > threshold` classified as occupied).
pub fn labeled_fidelity(scores: &[f64], occupied: &[bool]) -> (f64, f64) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_empty = occupied.iter().filter(|&&o| !o).count();
    // threshold below everything: every empty sample misclassified
    let mut errors = n_empty as i64;
    let mut best = (errors, f64::NEG_INFINITY);
    for (k, &i) in idx.iter().enumerate() {
        errors += if occupied[i] { 1 } else { -1 };
        let next = idx.get(k + 1).map(|&j| scores[j]);
        if next == Some(scores[i]) {
            continue;
        }
        let t = match next {
            Some(v) => (scores[i] + v) / 2.0,
            None => scores[i],
        };
        if errors < best.0 {
            best = (errors, t);
        }
    }
    (best.1, 1.0 - best.0 as f64 / scores.len() as f64)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn gaussian_em(z: &[f64]) -> ([f64; 2], [Component; 2], f64, usize) {
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut c = [quantile(&sorted, 0.2), quantile(&sorted, 0.8)];
    for _ in 0..50 {
        let mid = (c[0] + c[1]) / 2.0;
        let (lo, hi): (Vec<f64>, Vec<f64>) = z.iter().partition(|&&v| v <= mid);
        if lo.is_empty() || hi.is_empty() {
            break;
        }
        c = [crate::stats::mean(&lo), crate::stats::mean(&hi)];
    }
    let mid = (c[0] + c[1]) / 2.0;
    let mut w = [0.5; 2];
    let mut mu = c;
    let mut var = [VAR_FLOOR; 2];
    for k in 0..2 {
        let members: Vec<f64> = z.iter().copied().filter(|&v| (v > mid) == (k == 1)).collect();
        if !members.is_empty() {
            w[k] = members.len() as f64 / z.len() as f64;
            let m = crate::stats::mean(&members);
            var[k] = (members.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / members.len() as f64).max(VAR_FLOOR);
        }
    }
    let mut ll_prev = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut resp = vec![0.0; z.len()];
    for it in 0..5000 {
        iterations = it + 1;
        let comp = [Component::gaussian(mu[0], var[0].sqrt()), Component::gaussian(mu[1], var[1].sqrt())];
        let mut ll = 0.0;
        for (r, &v) in resp.iter_mut().zip(z) {
            let a = w[0] * comp[0].pdf(v);
            let b = w[1] * comp[1].pdf(v);
            let s = a + b;
            *r = if s > 0.0 { b / s } else { (v > mid) as u8 as f64 };
            ll += s.max(f64::MIN_POSITIVE).ln();
        }
        let n1: f64 = resp.iter().sum();
        let n0 = z.len() as f64 - n1;
        if n0 <= 0.0 || n1 <= 0.0 {
            break;
        }
        w = [n0 / z.len() as f64, n1 / z.len() as f64];
        mu = [
            z.iter().zip(&resp).map(|(v, r)| (1.0 - r) * v).sum::<f64>() / n0,
            z.iter().zip(&resp).map(|(v, r)| r * v).sum::<f64>() / n1,
        ];
        var = [
            (z.iter().zip(&resp).map(|(v, r)| (1.0 - r) * (v - mu[0]).powi(2)).sum::<f64>() / n0).max(VAR_FLOOR),
            (z.iter().zip(&resp).map(|(v, r)| r * (v - mu[1]).powi(2)).sum::<f64>() / n1).max(VAR_FLOOR),
        ];
        if (ll - ll_prev).abs() < 1e-10 * z.len() as f64 {
            ll_prev = ll;
            break;
        }
        ll_prev = ll;
    }
    let comp = [Component::gaussian(mu[0], var[0].sqrt()), Component::gaussian(mu[1], var[1].sqrt())];
    (w, comp, ll_prev, iterations)
}

fn unpack(p: &[f64]) -> ([f64; 2], [Component; 2]) {
    let w1 = 1.0 / (1.0 + (-p[0]).exp());
    (
        [1.0 - w1, w1],
        [
            Component {
                location: p[1],
                scale: p[2].exp(),
                shape: p[3],
            },
            Component {
                location: p[4],
                scale: p[5].exp(),
                shape: p[6],
            },
        ],
    )
}

fn neg_log_likelihood(z: &[f64], w: [f64; 2], c: &[Component; 2]) -> f64 {
    -z.iter()
        .map(|&v| (w[0] * c[0].pdf(v) + w[1] * c[1].pdf(v)).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
}

/// Maximum-likelihood two-component fit and the discrimination fidelity at
/// the optimal threshold.
pub fn fit_bimodal(scores: &[f64], model: BimodalModel) -> Result<BimodalFit, AnalysisError> {
    if scores.len() < MIN_SAMPLES {
        return Err(AnalysisError::TooFewSamples {
            needed: MIN_SAMPLES,
            got: scores.len(),
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let center = crate::stats::median(scores);
    let scale = crate::stats::variance(scores).sqrt();
    if !(scale > 0.0) {
        return Err(AnalysisError::Invalid("scores have zero variance".into()));
    }
    let z: Vec<f64> = scores.iter().map(|v| (v - center) / scale).collect();
    let (mut w, mut comp, mut ll, mut iterations) = gaussian_em(&z);
    if model == BimodalModel::SkewGaussian {
        let logit = (w[1] / w[0]).ln();
        let f = |p: &[f64]| {
            let (w, c) = unpack(p);
            neg_log_likelihood(&z, w, &c)
        };
        let nm = NelderMead {
            max_iterations: 20_000,
            f_tol: 1e-14,
            x_tol: 1e-10,
        };
        let starts = [(0.0, 0.0), (1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
        let runs: Vec<_> = starts
            .par_iter()
            .map(|&(a0, a1)| {
                let start = [
                    logit,
                    comp[0].location,
                    comp[0].scale.ln(),
                    a0,
                    comp[1].location,
                    comp[1].scale.ln(),
                    a1,
                ];
                nm.minimize(f, &start, &[0.2, 0.1, 0.1, 0.5, 0.1, 0.1, 0.5])
            })
            .collect();
        iterations += runs.iter().map(|m| m.iterations).sum::<usize>();
        let mut m = runs
            .into_iter()
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .expect("at least one start");
        for _ in 0..4 {
            let again = nm.minimize(f, &m.x, &[0.05, 0.02, 0.02, 0.1, 0.02, 0.02, 0.1]);
            iterations += again.iterations;
            let settled = again.converged && m.value - again.value <= 1e-12 * m.value.abs();
            m = if again.value <= m.value { again } else { Minimum { converged: again.converged, ..m } };
            if settled {
                break;
            }
        }
        if !m.converged {
            return Err(AnalysisError::NonConvergent {
                residual: m.value / z.len() as f64,
            });
        }
        (w, comp) = unpack(&m.x);
        ll = -m.value;
    }
    if comp[0].mean() > comp[1].mean() {
        comp.swap(0, 1);
        w.swap(0, 1);
    }
    let (tz, fidelity) = fidelity_of(&comp, w);
    let ln_jacobian = z.len() as f64 * scale.ln();
    Ok(BimodalFit {
        model,
        weights: w,
        components: [comp[0].affine(center, scale), comp[1].affine(center, scale)],
        threshold: center + scale * tz,
        fidelity,
        log_likelihood: ll - ln_jacobian,
        iterations,
    })
}
