//! Cavity geometry as data, and its unfolding into the ordered interaction
//! sequence of one closed trajectory.
//!
//! Configuration is TOML with one `[[element]]` table per optic. Lengths are
//! millimeters (`*_mm`), lenslet pitch and grid offsets micrometers (`*_um`),
//! wavelengths nanometers. Everything stays in those units inside
//! [`CavityPrescription`]; the surface model in [`crate::optics`] converts to
//! meters.
//!
//! ```toml
//! name = "two mirror"
//! magnification = 1.0
//! [wavelength]
//! trap_nm = 785.0
//! probe_nm = 780.0
//!
//! [[element]]
//! name = "near"
//! kind = "flat-mirror"
//! position_mm = 0.0
//! aperture_mm = 12.7
//!
//! [[element]]
//! name = "far"
//! kind = "curved-mirror"
//! roc_mm = 100.0
//! position_mm = 50.0
//! aperture_mm = 12.7
//! ```
//!
//! Element kinds: `flat-mirror`, `curved-mirror` (`roc_mm`, concave toward the
//! cavity), `spherical-lens` and `aspheric-lens` (`thickness_mm`, `index`,
//! optional `[element.front]` / `[element.back]` surface tables with
//! `radius_mm`, `conic`, `asphere`; or `focal_mm` for a plano-convex lens with
//! its curved face first), `microlens-array` (`pitch_um`, `grid`,
//! `lenslet_focal_mm`, `thickness_mm`, `index`, `grid_offset_um`), `window`
//! (`thickness_mm`, `index`) and `aperture`. Omitted coating values default to
//! `loss = 0`, no declared reflectivity or transmissivity.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrescriptionError {
    #[error("failed to parse prescription: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("elements not strictly ordered: `{first}` at {first_mm} mm is not before `{second}` at {second_mm} mm")]
    Unordered {
        first: String,
        first_mm: f64,
        second: String,
        second_mm: f64,
    },
    #[error("cavity must be terminated by mirrors at both ends ({0})")]
    MissingEndMirror(String),
    #[error("no element named `{0}`")]
    UnknownElement(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wavelengths {
    pub trap_nm: f64,
    pub probe_nm: f64,
}

/// Whether one closed trajectory visits the far mirror once (ordinary linear
/// cavity) or twice (array geometry whose off-axis modes are inverted by the
/// curved mirror and close only after two passes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    #[default]
    Single,
    Doubled,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurfaceShape {
    /// Vertex radius of curvature, signed: positive when the center of
    /// curvature lies toward +z. `None` is a plane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub conic: f64,
    /// Even asphere coefficients for r^4, r^6, ... (mm^(1-2k)).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub asphere: Vec<f64>,
}

impl SurfaceShape {
    pub fn plane() -> Self {
        Self::default()
    }

    pub fn sphere(radius_mm: f64) -> Self {
        Self {
            radius_mm: Some(radius_mm),
            ..Self::default()
        }
    }

    pub fn curvature_per_mm(&self) -> f64 {
        match self.radius_mm {
            Some(r) if r != 0.0 => 1.0 / r,
            _ => 0.0,
        }
    }
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensGeometry {
    pub thickness_mm: f64,
    pub index: f64,
    /// Shorthand for a plano-convex lens with its curved face first; resolved
    /// into `front.radius_mm` at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_mm: Option<f64>,
    #[serde(default)]
    pub front: SurfaceShape,
    #[serde(default)]
    pub back: SurfaceShape,
}

impl LensGeometry {
    /// Thick-lens effective focal length from the lensmaker equation.
    pub fn effective_focal_mm(&self) -> f64 {
        let n = self.index;
        let c1 = self.front.curvature_per_mm();
        let c2 = self.back.curvature_per_mm();
        let power = (n - 1.0) * (c1 - c2 + (n - 1.0) * self.thickness_mm * c1 * c2 / n);
        1.0 / power
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvedSide {
    #[default]
    Front,
    Back,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlaGeometry {
    pub pitch_um: f64,
    pub grid: [u32; 2],
    pub lenslet_focal_mm: f64,
    pub thickness_mm: f64,
    pub index: f64,
    /// Offset of the lenslet lattice from the optical axis. With an even grid
    /// and zero offset the axis falls on a lenslet corner.
    #[serde(default)]
    pub grid_offset_um: [f64; 2],
    #[serde(default)]
    pub curved_side: CurvedSide,
}

impl MlaGeometry {
    /// Lenslet vertex radius for a plano-convex lenslet of the stated focal length.
    pub fn lenslet_radius_mm(&self) -> f64 {
        self.lenslet_focal_mm * (self.index - 1.0)
    }

    /// Lateral position (mm) of the center of lenslet column/row `i` along `axis`.
    pub fn lenslet_center_mm(&self, axis: usize, i: u32) -> f64 {
        let n = self.grid[axis] as f64;
        (i as f64 - (n - 1.0) / 2.0) * self.pitch_um * 1e-3 + self.grid_offset_um[axis] * 1e-3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ElementKind {
    FlatMirror,
    CurvedMirror { roc_mm: f64 },
    SphericalLens(LensGeometry),
    AsphericLens(LensGeometry),
    MicrolensArray(MlaGeometry),
    Window { thickness_mm: f64, index: f64 },
    Aperture,
}

impl ElementKind {
    pub fn label(&self) -> &'static str {
        match self {
            ElementKind::FlatMirror => "flat-mirror",
            ElementKind::CurvedMirror { .. } => "curved-mirror",
            ElementKind::SphericalLens(_) => "spherical-lens",
            ElementKind::AsphericLens(_) => "aspheric-lens",
            ElementKind::MicrolensArray(_) => "microlens-array",
            ElementKind::Window { .. } => "window",
            ElementKind::Aperture => "aperture",
        }
    }

    pub fn is_mirror(&self) -> bool {
        matches!(self, ElementKind::FlatMirror | ElementKind::CurvedMirror { .. })
    }

    /// Axial extent of the element from its front vertex.
    pub fn thickness_mm(&self) -> f64 {
        match self {
            ElementKind::SphericalLens(l) | ElementKind::AsphericLens(l) => l.thickness_mm,
            ElementKind::MicrolensArray(m) => m.thickness_mm,
            ElementKind::Window { thickness_mm, .. } => *thickness_mm,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalElement {
    pub name: String,
    #[serde(flatten)]
    pub kind: ElementKind,
    /// Axial position of the front vertex.
    pub position_mm: f64,
    /// Clear-aperture radius.
    pub aperture_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transmissivity: Option<f64>,
    /// Loss per pass.
    #[serde(default)]
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityPrescription {
    #[serde(default)]
    pub name: String,
    pub wavelength: Wavelengths,
    pub magnification: f64,
    #[serde(default)]
    pub trajectory: Trajectory,
    /// Reference plane for eigenmode evaluation (the atom plane), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_plane_mm: Option<f64>,
    #[serde(rename = "element")]
    pub elements: Vec<OpticalElement>,
}

/// Parse and validate a prescription from configuration text.
pub fn load_prescription(config_text: &str) -> Result<CavityPrescription, PrescriptionError> {
    let mut p: CavityPrescription =
        toml::from_str(config_text).map_err(|e| PrescriptionError::Parse(e.message().to_string()))?;
    p.normalize();
    p.validate()?;
    Ok(p)
}

pub fn load_prescription_file(path: impl AsRef<Path>) -> Result<CavityPrescription, PrescriptionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PrescriptionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_prescription(&text)
}

/// Bundled reference cavity array microscope.
pub const REFERENCE_CONFIG: &str = include_str!("../configs/reference.toml");
/// Bundled comparison cavity without the microlens array, re-spaced to keep the
/// central mode stable with a comparable waist.
pub const REFERENCE_NO_MLA_CONFIG: &str = include_str!("../configs/reference_no_mla.toml");

pub fn reference_prescription() -> CavityPrescription {
    load_prescription(REFERENCE_CONFIG).expect("bundled reference prescription is valid")
}

pub fn reference_no_mla_prescription() -> CavityPrescription {
    load_prescription(REFERENCE_NO_MLA_CONFIG).expect("bundled no-MLA prescription is valid")
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> PrescriptionError {
    PrescriptionError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

impl CavityPrescription {
    fn normalize(&mut self) {
        for e in &mut self.elements {
            if let ElementKind::SphericalLens(l) | ElementKind::AsphericLens(l) = &mut e.kind {
                if let Some(f) = l.focal_mm.take() {
                    if l.front.radius_mm.is_none() && l.back.radius_mm.is_none() {
                        l.front.radius_mm = Some(f * (l.index - 1.0));
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), PrescriptionError> {
        let wl = &self.wavelength;
        if !(wl.trap_nm > 0.0 && wl.trap_nm.is_finite()) {
            return Err(invalid("wavelength.trap_nm", "must be positive"));
        }
        if !(wl.probe_nm > 0.0 && wl.probe_nm.is_finite()) {
            return Err(invalid("wavelength.probe_nm", "must be positive"));
        }
        if !(self.magnification > 0.0) {
            return Err(invalid("magnification", "must be positive"));
        }
        if self.elements.len() < 2 {
            return Err(invalid("element", "at least two elements are required"));
        }
        for e in &self.elements {
            let key = |k: &str| format!("element[{}].{k}", e.name);
            if !e.position_mm.is_finite() {
                return Err(invalid(key("position_mm"), "must be finite"));
            }
            if !(e.aperture_mm > 0.0) {
                return Err(invalid(key("aperture_mm"), "clear aperture must be positive"));
            }
            for (name, v) in [("reflectivity", e.reflectivity), ("transmissivity", e.transmissivity)] {
                if let Some(v) = v {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(invalid(key(name), "must lie in [0, 1]"));
                    }
                }
            }
            if e.reflectivity.unwrap_or(0.0) + e.transmissivity.unwrap_or(0.0) > 1.0 {
                return Err(invalid(key("reflectivity"), "reflectivity + transmissivity exceeds 1"));
            }
            if !(0.0..1.0).contains(&e.loss) {
                return Err(invalid(key("loss"), "must lie in [0, 1)"));
            }
            match &e.kind {
                ElementKind::CurvedMirror { roc_mm } => {
                    if !(*roc_mm != 0.0 && roc_mm.is_finite()) {
                        return Err(invalid(key("roc_mm"), "must be finite and non-zero"));
                    }
                }
                ElementKind::SphericalLens(l) | ElementKind::AsphericLens(l) => {
                    if !(l.thickness_mm > 0.0) {
                        return Err(invalid(key("thickness_mm"), "must be positive"));
                    }
                    if !(l.index >= 1.0) {
                        return Err(invalid(key("index"), "must be at least 1"));
                    }
                }
                ElementKind::MicrolensArray(m) => {
                    if !(m.pitch_um > 0.0) {
                        return Err(invalid(key("pitch_um"), "lenslet pitch must be positive"));
                    }
                    if m.grid[0] < 1 || m.grid[1] < 1 {
                        return Err(invalid(key("grid"), "grid dimensions must be at least 1"));
                    }
                    if !(m.lenslet_focal_mm > 0.0) {
                        return Err(invalid(key("lenslet_focal_mm"), "must be positive"));
                    }
                    if !(m.thickness_mm > 0.0) {
                        return Err(invalid(key("thickness_mm"), "must be positive"));
                    }
                    if !(m.index > 1.0) {
                        return Err(invalid(key("index"), "must exceed 1"));
                    }
                }
                ElementKind::Window { thickness_mm, index } => {
                    if !(*thickness_mm > 0.0) {
                        return Err(invalid(key("thickness_mm"), "must be positive"));
                    }
                    if !(*index >= 1.0) {
                        return Err(invalid(key("index"), "must be at least 1"));
                    }
                }
                ElementKind::FlatMirror | ElementKind::Aperture => {}
            }
        }
        for pair in self.elements.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if !(a.position_mm + a.kind.thickness_mm() < b.position_mm) {
                return Err(PrescriptionError::Unordered {
                    first: a.name.clone(),
                    first_mm: a.position_mm,
                    second: b.name.clone(),
                    second_mm: b.position_mm,
                });
            }
        }
        if let Some(z) = self.reference_plane_mm {
            if self.locate_medium(z).is_none() {
                return Err(invalid("reference_plane_mm", "must lie in free space inside the cavity"));
            }
        }
        Ok(())
    }

    /// Index of the element whose downstream free-space gap contains `z_mm`.
    fn locate_medium(&self, z_mm: f64) -> Option<usize> {
        self.elements.windows(2).position(|pair| {
            let start = pair[0].position_mm + pair[0].kind.thickness_mm();
            z_mm > start && z_mm < pair[1].position_mm
        })
    }

    /// Last-minus-first element position.
    pub fn total_length_mm(&self) -> f64 {
        let first = self.elements.first().map_or(0.0, |e| e.position_mm);
        let last = self.elements.last().map_or(0.0, |e| e.position_mm);
        last - first
    }

    pub fn element_index(&self, name: &str) -> Result<usize, PrescriptionError> {
        self.elements
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| PrescriptionError::UnknownElement(name.to_string()))
    }

    /// Canonical text form; reloading it reproduces the prescription exactly.
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("prescription serializes")
    }

    /// Copy with every element (and the reference plane) shifted by `dz_mm`.
    pub fn translated(&self, dz_mm: f64) -> Self {
        let mut p = self.clone();
        for e in &mut p.elements {
            e.position_mm += dz_mm;
        }
        if let Some(z) = &mut p.reference_plane_mm {
            *z += dz_mm;
        }
        p
    }

    /// Copy with one element displaced along the axis, re-validated.
    pub fn with_displacement(&self, element: usize, dz_mm: f64) -> Result<Self, PrescriptionError> {
        let mut p = self.clone();
        p.elements[element].position_mm += dz_mm;
        p.validate()?;
        Ok(p)
    }

    pub fn has_microlens_array(&self) -> bool {
        self.elements
            .iter()
            .any(|e| matches!(e.kind, ElementKind::MicrolensArray(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    Reflect,
    Refract,
    ClipCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceStep {
    pub element: usize,
    pub interaction: Interaction,
    pub direction: Direction,
}

/// Element-level interaction order of one closed trajectory, starting just
/// after the near end mirror heading toward the far mirror and ending with the
/// reflection off the near mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSequence {
    pub steps: Vec<SequenceStep>,
    /// Passes per element, indexed like the prescription's elements.
    pub pass_counts: Vec<usize>,
}

impl SurfaceSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Pass counts aggregated by element kind label.
    pub fn counts_by_kind(&self, prescription: &CavityPrescription) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for (e, &n) in prescription.elements.iter().zip(&self.pass_counts) {
            *out.entry(e.kind.label()).or_insert(0) += n;
        }
        out
    }

    /// True when the cyclic sequence of elements reads the same in both
    /// directions around every reflection off the far mirror.
    pub fn is_palindromic_about(&self, element: usize) -> bool {
        let n = self.steps.len();
        let centers: Vec<usize> = (0..n).filter(|&i| self.steps[i].element == element).collect();
        !centers.is_empty()
            && centers.iter().all(|&c| {
                (1..n / 2).all(|k| self.steps[(c + k) % n].element == self.steps[(c + n - k) % n].element)
            })
    }
}

impl fmt::Display for SurfaceSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| {
                let tag = match s.interaction {
                    Interaction::Reflect => "R",
                    Interaction::Refract => "T",
                    Interaction::ClipCheck => "A",
                };
                format!("{}{}", tag, s.element)
            })
            .collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Unfold the prescription into the interaction sequence of one closed
/// trajectory.
pub fn unfold_round_trip(p: &CavityPrescription) -> Result<SurfaceSequence, PrescriptionError> {
    let n = p.elements.len();
    if n < 2 {
        return Err(PrescriptionError::MissingEndMirror("fewer than two elements".into()));
    }
    if !p.elements[0].kind.is_mirror() {
        return Err(PrescriptionError::MissingEndMirror(format!(
            "first element `{}` is not a mirror",
            p.elements[0].name
        )));
    }
    if !p.elements[n - 1].kind.is_mirror() {
        return Err(PrescriptionError::MissingEndMirror(format!(
            "last element `{}` is not a mirror",
            p.elements[n - 1].name
        )));
    }
    if let Some(e) = p.elements[1..n - 1].iter().find(|e| e.kind.is_mirror()) {
        return Err(invalid(
            format!("element[{}].kind", e.name),
            "mirrors are only supported at the cavity ends",
        ));
    }
    let interaction = |e: &OpticalElement| match e.kind {
        ElementKind::FlatMirror | ElementKind::CurvedMirror { .. } => Interaction::Reflect,
        ElementKind::Aperture => Interaction::ClipCheck,
        _ => Interaction::Refract,
    };
    let mut single = Vec::with_capacity(2 * n - 2);
    for i in 1..n - 1 {
        single.push(SequenceStep {
            element: i,
            interaction: interaction(&p.elements[i]),
            direction: Direction::Forward,
        });
    }
    single.push(SequenceStep {
        element: n - 1,
        interaction: Interaction::Reflect,
        direction: Direction::Forward,
    });
    for i in (1..n - 1).rev() {
        single.push(SequenceStep {
            element: i,
            interaction: interaction(&p.elements[i]),
            direction: Direction::Backward,
        });
    }
    single.push(SequenceStep {
        element: 0,
        interaction: Interaction::Reflect,
        direction: Direction::Backward,
    });
    let repeats = match p.trajectory {
        Trajectory::Single => 1,
        Trajectory::Doubled => 2,
    };
    let steps: Vec<SequenceStep> = std::iter::repeat_n(single, repeats).flatten().collect();
    let mut pass_counts = vec![0; n];
    for s in &steps {
        pass_counts[s.element] += 1;
    }
    Ok(SurfaceSequence { steps, pass_counts })
}
