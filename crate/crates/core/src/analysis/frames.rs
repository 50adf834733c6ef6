use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::atomsim::{Frame, PortGeometry};

/// Square summation window of side `2 * half + 1` centered on a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Window {
    pub cx: usize,
    pub cy: usize,
    pub half: usize,
}

impl Window {
    fn check(&self, width: usize, height: usize) -> Result<(), AnalysisError> {
        if self.cx < self.half || self.cy < self.half || self.cx + self.half >= width || self.cy + self.half >= height {
            return Err(AnalysisError::WindowOutOfBounds {
                cx: self.cx,
                cy: self.cy,
                half: self.half,
                width,
                height,
            });
        }
        Ok(())
    }

    fn sum(&self, width: usize, image: &[f64]) -> f64 {
        let mut s = 0.0;
        for y in self.cy - self.half..=self.cy + self.half {
            for x in self.cx - self.half..=self.cx + self.half {
                s += image[y * width + x];
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub pixel_threshold: f64,
    pub kernel_sigma_px: f64,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            pixel_threshold: 550.0,
            kernel_sigma_px: 1.0,
        }
    }
}

/// Identity of one scored site: a single port, or a cavity with both ports summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiteInfo {
    pub cavity: usize,
    pub port: Option<u8>,
}

/// Per-site scores, `scores[shot][site]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShotSet {
    pub sites: Vec<SiteInfo>,
    pub scores: Vec<Vec<f64>>,
}

impl ShotSet {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for row in &self.scores {
            if row.len() != self.sites.len() {
                return Err(AnalysisError::Invalid(format!(
                    "shot has {} scores for {} sites",
                    row.len(),
                    self.sites.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::NonFinite);
            }
        }
        Ok(())
    }

    pub fn column(&self, site: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[site]).collect()
    }

    /// Every score of every site, shot-major.
    pub fn pooled(&self) -> Vec<f64> {
        self.scores.iter().flatten().copied().collect()
    }
}

/// Windows and site labels for both ports of every cavity, port 0 first.
pub fn windows_for(geometry: &PortGeometry, half: usize) -> (Vec<Window>, Vec<SiteInfo>) {
    let mut windows = Vec::new();
    let mut sites = Vec::new();
    for c in 0..geometry.cavities() {
        for (k, p) in geometry.conjugate_pair(c).iter().enumerate() {
            windows.push(Window {
                cx: p.0.round().max(0.0) as usize,
                cy: p.1.round().max(0.0) as usize,
                half,
            });
            sites.push(SiteInfo {
                cavity: c,
                port: Some(k as u8),
            });
        }
    }
    (windows, sites)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn convolve_separable(image: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as i64 - r;
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    if sx >= 0 && sy >= 0 && sx < width as i64 && sy < height as i64 {
                        acc += w * src[(sy as usize) * width + sx as usize];
                    }
                }
                out[y as usize * width + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

fn check_windows(frame: &Frame, windows: &[Window]) -> Result<(), AnalysisError> {
    windows.iter().try_for_each(|w| w.check(frame.width, frame.height))
}

/// Binarize at the pixel threshold, smooth with a Gaussian kernel and sum each window.
pub fn postprocess_frame(frame: &Frame, post: &PostProcess, windows: &[Window]) -> Result<Vec<f64>, AnalysisError> {
    check_windows(frame, windows)?;
    let binary: Vec<f64> = frame
        .pixels
        .iter()
        .map(|&v| if v as f64 > post.pixel_threshold { 1.0 } else { 0.0 })
        .collect();
    let smooth = convolve_separable(&binary, frame.width, frame.height, &gaussian_kernel(post.kernel_sigma_px));
    Ok(windows.iter().map(|w| w.sum(frame.width, &smooth)).collect())
}

/// Plain count sum inside each window.
pub fn raw_window_sums(frame: &Frame, windows: &[Window]) -> Result<Vec<f64>, AnalysisError> {
    check_windows(frame, windows)?;
    let image: Vec<f64> = frame.pixels.iter().map(|&v| v as f64).collect();
    Ok(windows.iter().map(|w| w.sum(frame.width, &image)).collect())
}

/// Sum of the port scores of each cavity, indexed by cavity.
pub fn pair_sums(scores: &[f64], sites: &[SiteInfo]) -> Vec<f64> {
    let n = sites.iter().map(|s| s.cavity + 1).max().unwrap_or(0);
    let mut out = vec![0.0; n];
    for (v, s) in scores.iter().zip(sites) {
        out[s.cavity] += v;
    }
    out
}

/// Score every frame; `post = None` uses raw window sums. With `sum_pairs`
/// each cavity contributes one site carrying both port scores.
pub fn shotset_from_frames(
    frames: &[Frame],
    geometry: &PortGeometry,
    half: usize,
    post: Option<&PostProcess>,
    sum_pairs: bool,
) -> Result<ShotSet, AnalysisError> {
    let (windows, port_sites) = windows_for(geometry, half);
    let scores = frames
        .par_iter()
        .map(|f| {
            if f.width != geometry.width || f.height != geometry.height {
                return Err(AnalysisError::Invalid(format!(
                    "frame is {}x{}, geometry expects {}x{}",
                    f.width, f.height, geometry.width, geometry.height
                )));
            }
            let s = match post {
                Some(p) => postprocess_frame(f, p, &windows)?,
                None => raw_window_sums(f, &windows)?,
            };
            Ok(if sum_pairs { pair_sums(&s, &port_sites) } else { s })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sites = if sum_pairs {
        (0..geometry.cavities()).map(|c| SiteInfo { cavity: c, port: None }).collect()
    } else {
        port_sites
    };
    Ok(ShotSet { sites, scores })
}
