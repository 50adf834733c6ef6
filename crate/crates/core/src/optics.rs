//! Surface model in SI units built from a prescription, and the unfolded
//! surface-level path that both the ray tracer and the ABCD engine walk.

use std::ops::Range;

use crate::prescription::{
    unfold_round_trip, CavityPrescription, CurvedSide, Direction, ElementKind, PrescriptionError, SurfaceShape,
    SurfaceSequence,
};
use crate::scalar::Real;

const MM: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Refract,
    Reflect,
    Stop,
}

/// Square lenslet lattice. Cell `(i, j)` is centered at `(x0 + i p, y0 + j p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice<T> {
    pub pitch: T,
    pub nx: u32,
    pub ny: u32,
    pub x0: T,
    pub y0: T,
}

impl<T: Real> Lattice<T> {
    fn index(&self, v: T, origin: T, n: u32) -> Option<u32> {
        let i = ((v - origin) / self.pitch + T::lit(0.5)).floor();
        if i < T::zero() || i >= T::lit(n as f64) {
            None
        } else {
            i.to_u32()
        }
    }

    /// Center of the cell containing `(x, y)`, or `None` outside the grid.
    pub fn cell_center(&self, x: T, y: T) -> Option<(T, T)> {
        let i = self.index(x, self.x0, self.nx)?;
        let j = self.index(y, self.y0, self.ny)?;
        Some((
            self.x0 + self.pitch * T::lit(i as f64),
            self.y0 + self.pitch * T::lit(j as f64),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface<T> {
    pub element: usize,
    pub kind: SurfaceKind,
    /// Vertex position on the axis (m).
    pub z: T,
    /// Vertex curvature (1/m), positive when the center of curvature is at +z.
    pub curvature: T,
    pub conic: T,
    /// Coefficients of r^4, r^6, ... (SI).
    pub asphere: Vec<T>,
    /// Clear-aperture radius (m).
    pub aperture: T,
    pub lattice: Option<Lattice<T>>,
    /// Refractive index on the -z side.
    pub index_before: T,
    /// Refractive index on the +z side.
    pub index_after: T,
}

impl<T: Real> Surface<T> {
    fn plain(element: usize, kind: SurfaceKind, z: T, aperture: T) -> Self {
        Self {
            element,
            kind,
            z,
            curvature: T::zero(),
            conic: T::zero(),
            asphere: Vec::new(),
            aperture,
            lattice: None,
            index_before: T::one(),
            index_after: T::one(),
        }
    }

    fn shaped(mut self, shape: &SurfaceShape) -> Self {
        self.curvature = T::lit(shape.curvature_per_mm() / MM);
        self.conic = T::lit(shape.conic);
        self.asphere = shape
            .asphere
            .iter()
            .enumerate()
            .map(|(j, a)| T::lit(a * MM.powi(1 - 2 * (j as i32 + 2))))
            .collect();
        self
    }

    pub fn is_plane(&self) -> bool {
        self.curvature == T::zero() && self.asphere.is_empty()
    }

    /// Sag at squared radius `r2`, or `None` beyond the conic's domain.
    pub fn sag(&self, r2: T) -> Option<T> {
        let c = self.curvature;
        let arg = T::one() - (T::one() + self.conic) * c * c * r2;
        if arg < T::zero() {
            return None;
        }
        let mut s = c * r2 / (T::one() + arg.sqrt());
        let mut p = r2 * r2;
        for &a in &self.asphere {
            s = s + a * p;
            p = p * r2;
        }
        Some(s)
    }

    /// `(dsag/dr) / r` at squared radius `r2`.
    pub fn slope_factor(&self, r2: T) -> Option<T> {
        let c = self.curvature;
        let arg = T::one() - (T::one() + self.conic) * c * c * r2;
        if arg <= T::zero() {
            return None;
        }
        let mut g = c / arg.sqrt();
        let mut p = r2;
        for (j, &a) in self.asphere.iter().enumerate() {
            g = g + T::lit((4 + 2 * j) as f64) * a * p;
            p = p * r2;
        }
        Some(g)
    }

    /// Refractive indices (incident, transmitted) for travel along `forward`.
    pub fn indices(&self, forward: bool) -> (T, T) {
        if forward {
            (self.index_before, self.index_after)
        } else {
            (self.index_after, self.index_before)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub surface: usize,
    pub forward: bool,
}

/// Prescription converted to surfaces (meters) plus the surface-level path of
/// one closed trajectory, starting at the near mirror heading toward +z.
#[derive(Debug, Clone)]
pub struct OpticalSystem<T> {
    pub surfaces: Vec<Surface<T>>,
    pub element_surfaces: Vec<Range<usize>>,
    pub path: Vec<PathStep>,
    pub sequence: SurfaceSequence,
    pub launch_z: T,
    pub total_length: T,
    pub reference_z: Option<T>,
    pub trap_wavelength: T,
    pub probe_wavelength: T,
}

impl<T: Real> OpticalSystem<T> {
    pub fn from_prescription(p: &CavityPrescription) -> Result<Self, PrescriptionError> {
        let sequence = unfold_round_trip(p)?;
        let last = p.elements.len() - 1;
        let mut surfaces = Vec::new();
        let mut element_surfaces = Vec::with_capacity(p.elements.len());
        for (idx, e) in p.elements.iter().enumerate() {
            let start = surfaces.len();
            let z = T::lit(e.position_mm * MM);
            let ap = T::lit(e.aperture_mm * MM);
            match &e.kind {
                ElementKind::FlatMirror => surfaces.push(Surface::plain(idx, SurfaceKind::Reflect, z, ap)),
                ElementKind::CurvedMirror { roc_mm } => {
                    let r = if idx == last { -roc_mm } else { *roc_mm };
                    surfaces.push(Surface::plain(idx, SurfaceKind::Reflect, z, ap).shaped(&SurfaceShape::sphere(r)));
                }
                ElementKind::Aperture => surfaces.push(Surface::plain(idx, SurfaceKind::Stop, z, ap)),
                ElementKind::SphericalLens(l) | ElementKind::AsphericLens(l) => {
                    push_slab(&mut surfaces, idx, z, l.thickness_mm, l.index, ap, &l.front, &l.back);
                }
                ElementKind::Window { thickness_mm, index } => {
                    let flat = SurfaceShape::plane();
                    push_slab(&mut surfaces, idx, z, *thickness_mm, *index, ap, &flat, &flat);
                }
                ElementKind::MicrolensArray(m) => {
                    let r = m.lenslet_radius_mm();
                    let (front, back) = match m.curved_side {
                        CurvedSide::Front => (SurfaceShape::sphere(r), SurfaceShape::plane()),
                        CurvedSide::Back => (SurfaceShape::plane(), SurfaceShape::sphere(-r)),
                    };
                    push_slab(&mut surfaces, idx, z, m.thickness_mm, m.index, ap, &front, &back);
                    let lattice = Lattice {
                        pitch: T::lit(m.pitch_um * 1e-6),
                        nx: m.grid[0],
                        ny: m.grid[1],
                        x0: T::lit(m.lenslet_center_mm(0, 0) * MM),
                        y0: T::lit(m.lenslet_center_mm(1, 0) * MM),
                    };
                    let curved = match m.curved_side {
                        CurvedSide::Front => start,
                        CurvedSide::Back => start + 1,
                    };
                    surfaces[curved].lattice = Some(lattice);
                }
            }
            element_surfaces.push(start..surfaces.len());
        }
        let mut path = Vec::new();
        for step in &sequence.steps {
            let range = element_surfaces[step.element].clone();
            match step.direction {
                Direction::Forward => path.extend(range.map(|surface| PathStep { surface, forward: true })),
                Direction::Backward => path.extend(range.rev().map(|surface| PathStep { surface, forward: false })),
            }
        }
        Ok(Self {
            surfaces,
            element_surfaces,
            path,
            sequence,
            launch_z: T::lit(p.elements[0].position_mm * MM),
            total_length: T::lit(p.total_length_mm() * MM),
            reference_z: p.reference_plane_mm.map(|z| T::lit(z * MM)),
            trap_wavelength: T::lit(p.wavelength.trap_nm * 1e-9),
            probe_wavelength: T::lit(p.wavelength.probe_nm * 1e-9),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn push_slab<T: Real>(
    surfaces: &mut Vec<Surface<T>>,
    element: usize,
    z: T,
    thickness_mm: f64,
    index: f64,
    aperture: T,
    front: &SurfaceShape,
    back: &SurfaceShape,
) {
    let n = T::lit(index);
    let mut s1 = Surface::plain(element, SurfaceKind::Refract, z, aperture).shaped(front);
    s1.index_after = n;
    let mut s2 = Surface::plain(element, SurfaceKind::Refract, z + T::lit(thickness_mm * MM), aperture).shaped(back);
    s2.index_before = n;
    surfaces.push(s1);
    surfaces.push(s2);
}
