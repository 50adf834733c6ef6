//! Exact sequential ray propagation through the unfolded cavity.

mod survival;
mod vec3;

pub use survival::{effective_abcd, survival_map, EffectiveAbcd, GridSpec, SurvivalMap};
pub use vec3::Vec3;

use thiserror::Error;

use crate::optics::{OpticalSystem, Surface, SurfaceKind};
use crate::scalar::Real;

const MAX_NEWTON: usize = 50;
const NEWTON_TOL_M: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("ray clipped at step {step} (element {element})")]
    Clipped { step: usize, element: usize },
    #[error("total internal reflection at step {step} (element {element})")]
    TotalInternalReflection { step: usize, element: usize },
    #[error("surface intersection did not converge at step {step} (element {element})")]
    NonConvergent { step: usize, element: usize },
    #[error("ray is not alive")]
    Dead,
}

impl TraceError {
    /// Index into the traversed surface path where the ray was lost.
    pub fn step(&self) -> Option<usize> {
        match self {
            TraceError::Clipped { step, .. }
            | TraceError::TotalInternalReflection { step, .. }
            | TraceError::NonConvergent { step, .. } => Some(*step),
            TraceError::Dead => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub position: Vec3<T>,
    pub direction: Vec3<T>,
    pub alive: bool,
    pub round_trips: u32,
}

impl<T: Real> Ray<T> {
    pub fn new(position: Vec3<T>, direction: Vec3<T>) -> Self {
        Self {
            position,
            direction: direction.normalized(),
            alive: true,
            round_trips: 0,
        }
    }

    /// Ray at transverse position `(x, y)` on the launch plane of `system`
    /// with slopes `dx/dz`, `dy/dz`, heading toward +z.
    pub fn launch(system: &OpticalSystem<T>, x: T, y: T, slope_x: T, slope_y: T) -> Self {
        Self::new(Vec3::new(x, y, system.launch_z), Vec3::new(slope_x, slope_y, T::one()))
    }

    pub fn slope_x(&self) -> T {
        self.direction.x / self.direction.z.abs()
    }

    pub fn slope_y(&self) -> T {
        self.direction.y / self.direction.z.abs()
    }
}

/// One surface interaction, reported to observers of a trace.
#[derive(Debug, Clone, Copy)]
pub struct Hit<T> {
    pub step: usize,
    pub kind: SurfaceKind,
    pub point: Vec3<T>,
    /// Unit surface normal oriented against the incident direction.
    pub normal: Vec3<T>,
    pub incident: Vec3<T>,
    pub outgoing: Vec3<T>,
    pub n1: T,
    pub n2: T,
}

enum Miss {
    Clip,
    NonConvergent,
}

/// Vector Snell refraction of unit `d` at unit normal `n` (any orientation);
/// `None` on total internal reflection.
pub fn refract<T: Real>(d: Vec3<T>, n: Vec3<T>, n1: T, n2: T) -> Option<Vec3<T>> {
    let n = if n.dot(d) > T::zero() { -n } else { n };
    let mu = n1 / n2;
    let cos_i = -n.dot(d);
    let sin2_t = mu * mu * (T::one() - cos_i * cos_i);
    if sin2_t > T::one() {
        return None;
    }
    let cos_t = (T::one() - sin2_t).sqrt();
    Some((d * mu + n * (mu * cos_i - cos_t)).normalized())
}

pub fn reflect<T: Real>(d: Vec3<T>, n: Vec3<T>) -> Vec3<T> {
    d - n * (T::two() * d.dot(n))
}

fn newton_tolerance<T: Real>(scale: T) -> T {
    T::lit(NEWTON_TOL_M).max(T::lit(16.0) * T::epsilon() * scale)
}

/// Intersection with the sag surface around lateral center `(cx, cy)`.
fn solve_sag<T: Real>(s: &Surface<T>, pos: Vec3<T>, dir: Vec3<T>, cx: T, cy: T) -> Result<(T, T), Miss> {
    let mut t = (s.z - pos.z) / dir.z;
    let tol = newton_tolerance(s.z.abs() + pos.z.abs());
    for _ in 0..MAX_NEWTON {
        let p = pos + dir * t;
        let (u, v) = (p.x - cx, p.y - cy);
        let r2 = u * u + v * v;
        let sag = s.sag(r2).ok_or(Miss::Clip)?;
        let g = s.slope_factor(r2).ok_or(Miss::Clip)?;
        let f = s.z + sag - p.z;
        let df = g * (u * dir.x + v * dir.y) - dir.z;
        if df == T::zero() {
            return Err(Miss::NonConvergent);
        }
        let dt = -f / df;
        t = t + dt;
        if dt.abs() <= tol {
            let p = pos + dir * t;
            let (u, v) = (p.x - cx, p.y - cy);
            let g = s.slope_factor(u * u + v * v).ok_or(Miss::Clip)?;
            return Ok((t, g));
        }
    }
    Err(Miss::NonConvergent)
}

/// Intersection point and unit normal (pointing toward +z).
fn intersect<T: Real>(s: &Surface<T>, pos: Vec3<T>, dir: Vec3<T>) -> Result<(Vec3<T>, Vec3<T>), Miss> {
    let plane_t = (s.z - pos.z) / dir.z;
    let plane_hit = pos + dir * plane_t;
    if s.is_plane() {
        return Ok((plane_hit, Vec3::new(T::zero(), T::zero(), T::one())));
    }
    let (mut cx, mut cy) = match &s.lattice {
        Some(l) => l.cell_center(plane_hit.x, plane_hit.y).ok_or(Miss::Clip)?,
        None => (T::zero(), T::zero()),
    };
    for _ in 0..4 {
        let (t, g) = solve_sag(s, pos, dir, cx, cy)?;
        let p = pos + dir * t;
        if let Some(l) = &s.lattice {
            let cell = l.cell_center(p.x, p.y).ok_or(Miss::Clip)?;
            if cell != (cx, cy) {
                (cx, cy) = cell;
                continue;
            }
        }
        let normal = Vec3::new(-g * (p.x - cx), -g * (p.y - cy), T::one()).normalized();
        return Ok((p, normal));
    }
    Err(Miss::NonConvergent)
}

/// Propagate a ray through one closed trajectory of `system`, reporting each
/// surface interaction to `observer`.
pub fn trace_segment_observed<T: Real>(
    ray: Ray<T>,
    system: &OpticalSystem<T>,
    observer: &mut dyn FnMut(&Hit<T>),
) -> Result<Ray<T>, TraceError> {
    if !ray.alive {
        return Err(TraceError::Dead);
    }
    let mut pos = ray.position;
    let mut dir = ray.direction;
    for (step, ps) in system.path.iter().enumerate() {
        let s = &system.surfaces[ps.surface];
        let element = s.element;
        let clipped = TraceError::Clipped { step, element };
        let heading_forward = dir.z > T::zero();
        if heading_forward != ps.forward || dir.z == T::zero() {
            return Err(clipped);
        }
        let (point, normal) = intersect(s, pos, dir).map_err(|m| match m {
            Miss::Clip => clipped,
            Miss::NonConvergent => TraceError::NonConvergent { step, element },
        })?;
        if !point.is_finite() || point.x * point.x + point.y * point.y > s.aperture * s.aperture {
            return Err(clipped);
        }
        let oriented = if normal.dot(dir) > T::zero() { -normal } else { normal };
        let (n1, n2) = s.indices(ps.forward);
        let out = match s.kind {
            SurfaceKind::Reflect => reflect(dir, oriented),
            SurfaceKind::Refract => {
                refract(dir, oriented, n1, n2).ok_or(TraceError::TotalInternalReflection { step, element })?
            }
            SurfaceKind::Stop => dir,
        };
        observer(&Hit {
            step,
            kind: s.kind,
            point,
            normal: oriented,
            incident: dir,
            outgoing: out,
            n1,
            n2,
        });
        pos = point;
        dir = out;
    }
    Ok(Ray {
        position: pos,
        direction: dir,
        alive: true,
        round_trips: ray.round_trips + 1,
    })
}

/// Propagate a ray through one closed trajectory of `system`.
pub fn trace_segment<T: Real>(ray: Ray<T>, system: &OpticalSystem<T>) -> Result<Ray<T>, TraceError> {
    trace_segment_observed(ray, system, &mut |_| {})
}

/// Completed closed trajectories before the ray is lost, saturating at `cap`.
/// Any trace failure counts as a loss.
pub fn round_trips_until_clip<T: Real>(ray: Ray<T>, system: &OpticalSystem<T>, cap: u32) -> u32 {
    let mut r = ray;
    for k in 0..cap {
        match trace_segment(r, system) {
            Ok(next) => r = next,
            Err(_) => return k,
        }
    }
    cap
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paraxial::{round_trip_matrix, ReferencePlane};
    use crate::prescription::reference_prescription;

    fn reference() -> OpticalSystem<f64> {
        OpticalSystem::from_prescription(&reference_prescription()).unwrap()
    }

    #[test]
    fn axial_ray_is_unchanged() {
        let sys = reference();
        let r = Ray::launch(&sys, 0.0, 0.0, 0.0, 0.0);
        let out = trace_segment(r, &sys).unwrap();
        assert_eq!(out.position.x, 0.0);
        assert_eq!(out.position.y, 0.0);
        assert_eq!(out.direction, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(out.round_trips, 1);
    }

    #[test]
    fn outside_first_aperture_clips_at_step_zero() {
        let sys = reference();
        let r = Ray::launch(&sys, 8e-3, 0.0, 0.0, 0.0);
        assert!(matches!(trace_segment(r, &sys), Err(TraceError::Clipped { step: 0, .. })));
    }

    #[test]
    fn paraxial_ray_matches_abcd() {
        let sys = reference();
        let m = round_trip_matrix(&sys, ReferencePlane::Launch).unwrap();
        let r = Ray::launch(&sys, 1e-6, 0.0, 0.0, 0.0);
        let out = trace_segment(r, &sys).unwrap();
        let (x, _) = m.apply(1e-6, 0.0);
        assert!((out.position.x - x).abs() < 1e-9, "{} vs {}", out.position.x, x);
    }

    #[test]
    fn refraction_obeys_snell() {
        let d = Vec3::<f64>::new(0.3, -0.2, 0.9).normalized();
        let n = Vec3::new(0.1, 0.05, -1.0).normalized();
        let t = refract(d, n, 1.0, 1.58).unwrap();
        let s1 = d.cross(n).norm();
        let s2 = t.cross(n).norm();
        assert!((1.0 * s1 - 1.58 * s2).abs() < 1e-14);
        assert!(refract(Vec3::new(0.9, 0.0, 0.1).normalized(), Vec3::new(0.0, 0.0, 1.0), 1.5, 1.0).is_none());
    }

    #[test]
    fn tracing_is_deterministic() {
        let sys = reference();
        let r = Ray::launch(&sys, 3.1e-4, -1.7e-4, 2e-5, -1e-5);
        let a = trace_segment(r, &sys);
        let b = trace_segment(r, &sys);
        assert_eq!(a, b);
    }
}
