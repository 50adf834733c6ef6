use rayon::prelude::*;

use super::{round_trips_until_clip, trace_segment, Ray, TraceError};
use crate::optics::OpticalSystem;
use crate::paraxial::Abcd;
use crate::scalar::Real;

/// Rectangular grid of zero-slope launch positions on the launch plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub center_mm: (f64, f64),
    pub span_mm: (f64, f64),
    pub resolution: (usize, usize),
    pub cap: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            center_mm: (0.0, 0.0),
            span_mm: (10.0, 10.0),
            resolution: (64, 64),
            cap: 100,
        }
    }
}

fn axis(center: f64, span: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![center];
    }
    (0..n)
        .map(|i| center - span / 2.0 + span * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalMap {
    pub xs_mm: Vec<f64>,
    pub ys_mm: Vec<f64>,
    /// Row-major counts, `counts[iy * xs.len() + ix]`.
    pub counts: Vec<u32>,
    pub cap: u32,
}

impl SurvivalMap {
    pub fn get(&self, ix: usize, iy: usize) -> u32 {
        self.counts[iy * self.xs_mm.len() + ix]
    }

    /// Median count in annular bins of width `bin_mm` about the grid origin,
    /// as `(bin center radius, median)` for every non-empty bin.
    pub fn radial_medians(&self, bin_mm: f64) -> Vec<(f64, f64)> {
        let mut bins: Vec<Vec<f64>> = Vec::new();
        for (x, y, c) in self.cells() {
            let b = ((x * x + y * y).sqrt() / bin_mm) as usize;
            if bins.len() <= b {
                bins.resize(b + 1, Vec::new());
            }
            bins[b].push(c as f64);
        }
        bins.iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(i, v)| ((i as f64 + 0.5) * bin_mm, crate::stats::median(v)))
            .collect()
    }

    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, u32)> + '_ {
        self.ys_mm
            .iter()
            .enumerate()
            .flat_map(move |(iy, &y)| self.xs_mm.iter().enumerate().map(move |(ix, &x)| (x, y, self.get(ix, iy))))
    }
}

/// Round trips survived by a zero-slope ray launched at each grid cell.
pub fn survival_map<T: Real>(system: &OpticalSystem<T>, grid: &GridSpec) -> SurvivalMap {
    let xs = axis(grid.center_mm.0, grid.span_mm.0, grid.resolution.0);
    let ys = axis(grid.center_mm.1, grid.span_mm.1, grid.resolution.1);
    let nx = xs.len();
    let counts = (0..nx * ys.len())
        .into_par_iter()
        .map(|k| {
            let (x, y) = (xs[k % nx], ys[k / nx]);
            let ray = Ray::launch(system, T::lit(x * 1e-3), T::lit(y * 1e-3), T::zero(), T::zero());
            round_trips_until_clip(ray, system, grid.cap)
        })
        .collect();
    SurvivalMap {
        xs_mm: xs,
        ys_mm: ys,
        counts,
        cap: grid.cap,
    }
}

/// Round-trip Jacobians about a guide ray, one per transverse axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveAbcd<T> {
    pub x: Abcd<T>,
    pub y: Abcd<T>,
}

/// Central finite-difference Jacobian of the round-trip map in (position,
/// slope) about `guide`. Positions are stepped by `probe_step` (m) and slopes
/// by `probe_step / total_length`.
pub fn effective_abcd<T: Real>(
    system: &OpticalSystem<T>,
    guide: Ray<T>,
    probe_step: T,
) -> Result<EffectiveAbcd<T>, TraceError> {
    trace_segment(guide, system)?;
    let h = probe_step;
    let hs = probe_step / system.total_length;
    let state = |r: &Ray<T>| (r.position.x, r.slope_x(), r.position.y, r.slope_y());
    let perturbed = |dx: T, dsx: T, dy: T, dsy: T| {
        let sx = guide.slope_x() + dsx;
        let sy = guide.slope_y() + dsy;
        let mut r = Ray::launch(system, guide.position.x + dx, guide.position.y + dy, sx, sy);
        r.position.z = guide.position.z;
        trace_segment(r, system).map(|o| state(&o))
    };
    let z = T::zero();
    let two = T::two();
    let xp = perturbed(h, z, z, z)?;
    let xm = perturbed(-h, z, z, z)?;
    let sp = perturbed(z, hs, z, z)?;
    let sm = perturbed(z, -hs, z, z)?;
    let yp = perturbed(z, z, h, z)?;
    let ym = perturbed(z, z, -h, z)?;
    let tp = perturbed(z, z, z, hs)?;
    let tm = perturbed(z, z, z, -hs)?;
    let x = Abcd::new(
        (xp.0 - xm.0) / (two * h),
        (sp.0 - sm.0) / (two * hs),
        (xp.1 - xm.1) / (two * h),
        (sp.1 - sm.1) / (two * hs),
    );
    let y = Abcd::new(
        (yp.2 - ym.2) / (two * h),
        (tp.2 - tm.2) / (two * hs),
        (yp.3 - ym.3) / (two * h),
        (tp.3 - tm.3) / (two * hs),
    );
    Ok(EffectiveAbcd { x, y })
}
