use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::output::{fmt_num, to_json, OutputDir};
use super::CliError;
use crate::analysis::{self, BimodalModel, PostProcess};
use crate::atomsim::{self, DetectorModel, PortGeometry, PortModel, SpcmModel, SpectrumModel};
use crate::budget::{self, BudgetConfig, DegeneracyModel, BOLTZMANN, RB87_MASS_KG};
use crate::hologram::{self, HologramSpec, InputProfile, Target};
use crate::optics::OpticalSystem;
use crate::paraxial;
use crate::prescription::{self, CavityPrescription};
use crate::raytrace::{self, GridSpec, Ray};
use crate::rng;

const BUNDLED_BUDGET: &str = include_str!("../../configs/budget_reference.toml");

fn n(v: f64) -> String {
    fmt_num(v)
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char) -> Result<(T, T), String> {
    let s = s.trim();
    match s.split_once(sep) {
        Some((a, b)) => Ok((
            a.trim().parse().map_err(|_| format!("invalid value '{a}'"))?,
            b.trim().parse().map_err(|_| format!("invalid value '{b}'"))?,
        )),
        None => {
            let v: T = s.parse().map_err(|_| format!("invalid value '{s}'"))?;
            let w: T = s.parse().map_err(|_| format!("invalid value '{s}'"))?;
            Ok((v, w))
        }
    }
}

/// `64x64` or `64`.
fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let g: (usize, usize) = parse_pair(s, 'x')?;
    if g.0 == 0 || g.1 == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok(g)
}

/// `10mm`, `10`, `10x8mm` or `10mmx8mm`.
fn parse_span(s: &str) -> Result<(f64, f64), String> {
    let cleaned = s.replace("mm", "");
    let span: (f64, f64) = parse_pair(&cleaned, 'x')?;
    if !(span.0 >= 0.0 && span.1 >= 0.0) {
        return Err("span must be non-negative".into());
    }
    Ok(span)
}

/// `x,y` in mm.
fn parse_point(s: &str) -> Result<(f64, f64), String> {
    parse_pair(&s.replace("mm", ""), ',')
}

fn parse_model(s: &str) -> Result<BimodalModel, String> {
    match s {
        "gaussian" => Ok(BimodalModel::Gaussian),
        "skew-gaussian" => Ok(BimodalModel::SkewGaussian),
        _ => Err(format!("unknown model '{s}' (gaussian, skew-gaussian)")),
    }
}

fn parse_port_model(s: &str) -> Result<PortModel, String> {
    match s {
        "shared" => Ok(PortModel::Shared),
        "per-waist" => Ok(PortModel::PerWaist),
        _ => Err(format!("unknown port model '{s}' (shared, per-waist)")),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// FNV-1a digest recorded in manifests so that input content is part of the run identity.
fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn input_record(path: &Path) -> Result<(Vec<u8>, Value), CliError> {
    let bytes = read(path)?;
    let rec = json!({"path": path.display().to_string(), "fnv1a": digest(&bytes)});
    Ok((bytes, rec))
}

fn csv_rows<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<Vec<T>, CliError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn with_config<A: Serialize>(args: &A, extra: Value) -> Result<Value, CliError> {
    let mut v = to_json(args)?;
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    Ok(v)
}

fn load_cavity(config: &Option<PathBuf>) -> Result<(CavityPrescription, Value), CliError> {
    let p = match config {
        Some(path) => prescription::load_prescription_file(path)?,
        None => prescription::reference_prescription(),
    };
    let canonical = p.to_canonical_string();
    Ok((p, json!({"prescription": canonical})))
}

pub fn dispatch(cmd: &super::Command, seed: u64, out: &mut OutputDir) -> Result<Value, CliError> {
    use super::Command::*;
    match cmd {
        Trace(a) => trace(a, out),
        ScanMap(a) => scan_map(a, out),
        Stability(a) => stability(a, out),
        Budget(a) => budget_cmd(a, seed, out),
        Degeneracy(a) => degeneracy(a, out),
        Hologram(a) => hologram_cmd(a, out),
        Simulate(s) => simulate(s, seed, out),
        Analyze(a) => analyze(a, out),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    /// Cavity prescription (TOML); the bundled reference cavity when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Launch position x (mm).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub x_mm: f64,
    /// Launch position y (mm).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub y_mm: f64,
    /// Launch slope dx/dz.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub slope_x: f64,
    /// Launch slope dy/dz.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub slope_y: f64,
    /// Closed trajectories to trace.
    #[arg(long, default_value_t = 1)]
    pub round_trips: u32,
}

fn trace(a: &TraceArgs, out: &mut OutputDir) -> Result<Value, CliError> {
    let (p, extra) = load_cavity(&a.config)?;
    let sys = OpticalSystem::<f64>::from_prescription(&p)?;
    let mut ray = Ray::launch(&sys, a.x_mm * 1e-3, a.y_mm * 1e-3, a.slope_x, a.slope_y);
    let mut rows = Vec::new();
    let mut lost = Value::Null;
    for k in 0..a.round_trips {
        let mut hits = Vec::new();
        let result = raytrace::trace_segment_observed(ray, &sys, &mut |h| {
            let element = sys.surfaces[sys.path[h.step].surface].element;
            hits.push(vec![
                (k + 1).to_string(),
                h.step.to_string(),
                p.elements[element].name.clone(),
                format!("{:?}", h.kind).to_lowercase(),
                n(h.point.x * 1e3),
                n(h.point.y * 1e3),
                n(h.point.z * 1e3),
                n(h.outgoing.x),
                n(h.outgoing.y),
                n(h.outgoing.z),
            ]);
        });
        rows.extend(hits);
        match result {
            Ok(r) => ray = r,
            Err(e) => {
                let element = e.step().map(|s| p.elements[sys.surfaces[sys.path[s].surface].element].name.clone());
                lost = json!({"round_trip": k + 1, "step": e.step(), "element": element, "reason": e.to_string()});
                break;
            }
        }
    }
    out.write_csv(
        "trace.csv",
        &["round_trip", "step", "element", "interaction", "x_mm", "y_mm", "z_mm", "dir_x", "dir_y", "dir_z"],
        rows,
    )?;
    let summary = json!({
        "completed_round_trips": ray.round_trips,
        "final_x_mm": ray.position.x * 1e3,
        "final_y_mm": ray.position.y * 1e3,
        "final_slope_x": ray.slope_x(),
        "final_slope_y": ray.slope_y(),
        "lost": lost,
    });
    out.write_json("trace.json", &super::output::round_json(summary))?;
    out.write("prescription.toml", p.to_canonical_string().as_bytes())?;
    with_config(a, extra)
}

#[derive(Debug, Args, Serialize)]
pub struct ScanMapArgs {
    /// Cavity prescription (TOML); the bundled reference cavity when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Launch grid resolution, `NXxNY`.
    #[arg(long, default_value = "64x64", value_parser = parse_grid)]
    pub grid: (usize, usize),
    /// Grid extent, e.g. `10mm` or `10x8mm`.
    #[arg(long, default_value = "10mm", value_parser = parse_span)]
    pub span: (f64, f64),
    /// Grid center `x,y` (mm).
    #[arg(long, default_value = "0,0", value_parser = parse_point, allow_hyphen_values = true)]
    pub center: (f64, f64),
    /// Round-trip cap per launch.
    #[arg(long, default_value_t = 100)]
    pub cap: u32,
}

fn scan_map(a: &ScanMapArgs, out: &mut OutputDir) -> Result<Value, CliError> {
    let (p, extra) = load_cavity(&a.config)?;
    let sys = OpticalSystem::<f64>::from_prescription(&p)?;
    let grid = GridSpec {
        center_mm: a.center,
        span_mm: a.span,
        resolution: a.grid,
        cap: a.cap,
    };
    let map = raytrace::survival_map(&sys, &grid);
    out.write_csv(
        "survival_map.csv",
        &["x_mm", "y_mm", "round_trips"],
        map.cells().map(|(x, y, c)| vec![n(x), n(y), c.to_string()]),
    )?;
    with_config(a, extra)
}

#[derive(Debug, Args, Serialize)]
pub struct StabilityArgs {
    /// Cavity prescription (TOML); the bundled reference cavity when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Element(s) displaced together, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "asphere")]
    pub element: Vec<String>,
    /// Scan start (mm).
    #[arg(long, default_value_t = -0.01, allow_hyphen_values = true)]
    pub from_mm: f64,
    /// Scan end (mm).
    #[arg(long, default_value_t = 0.01, allow_hyphen_values = true)]
    pub to_mm: f64,
    /// Scan samples.
    #[arg(long, default_value_t = 401)]
    pub steps: usize,
}

fn stability(a: &StabilityArgs, out: &mut OutputDir) -> Result<Value, CliError> {
    let (p, extra) = load_cavity(&a.config)?;
    let idx = a
        .element
        .iter()
        .map(|e| p.element_index(e))
        .collect::<Result<Vec<_>, _>>()?;
    let scan = paraxial::stability_scan_group(&p, &idx, (a.from_mm, a.to_mm), a.steps)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), n);
    out.write_csv(
        "stability.csv",
        &["displacement_mm", "waist_um", "gouy_rad", "stable"],
        scan.samples.iter().map(|s| {
            vec![n(s.displacement_mm), opt(s.waist_um), opt(s.gouy_rad), s.stable.to_string()]
        }),
    )?;
    let sys = OpticalSystem::<f64>::from_prescription(&p)?;
    let nominal = paraxial::prescription_matrix(&p)
        .ok()
        .and_then(|m| paraxial::eigen_mode(&m, sys.trap_wavelength).ok());
    let summary = json!({
        "element": scan.element,
        "stable_width_mm": scan.stable_width_mm(),
        "nominal_waist_um": nominal.map(|b| b.waist_um()),
        "rayleigh_width_mm": nominal.map(|b| paraxial::stability_width(b.waist, sys.trap_wavelength) * 1e3),
    });
    out.write_json("stability.json", &super::output::round_json(summary))?;
    with_config(a, extra)
}

#[derive(Debug, Args, Serialize)]
pub struct BudgetArgs {
    /// Budget configuration (TOML); the bundled reference budget when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn budget_cmd(a: &BudgetArgs, seed: u64, out: &mut OutputDir) -> Result<Value, CliError> {
    let text = match &a.config {
        Some(path) => String::from_utf8_lossy(&read(path)?).into_owned(),
        None => BUNDLED_BUDGET.to_string(),
    };
    let cfg: BudgetConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("budget config: {}", e.message())))?;
    let report = budget::budget_report(&cfg, seed)?;
    out.write_json("budget.json", &to_json(&json!({ "quantities": report }))?)?;
    with_config(a, json!({ "budget": to_json(&cfg)? }))
}

#[derive(Debug, Args, Serialize)]
pub struct DegeneracyArgs {
    /// Lens displacement per FSR of detuning at unit cavity index (mm).
    #[arg(long, default_value_t = 19.0)]
    pub xi_mm: f64,
    /// Required axial registration (um).
    #[arg(long, default_value_t = 1.0)]
    pub z0_um: f64,
    /// Cavity finesse.
    #[arg(long, default_value_t = 100.0)]
    pub finesse: f64,
    /// Largest cavity index tabulated.
    #[arg(long, default_value_t = 10)]
    pub max_index: u32,
}

fn degeneracy(a: &DegeneracyArgs, out: &mut OutputDir) -> Result<Value, CliError> {
    let model = DegeneracyModel {
        xi_mm_per_fsr: a.xi_mm,
        z0_um: a.z0_um,
        finesse: a.finesse,
        index: 0,
    };
    model.validate()?;
    let rows: Vec<Vec<String>> = (0..=a.max_index)
        .map(|i| {
            let m = DegeneracyModel { index: i, ..model.clone() };
            let s = m.detuning_per_mm();
            vec![i.to_string(), n(s), n(if s > 0.0 { 1.0 / s } else { f64::INFINITY })]
        })
        .collect();
    out.write_csv("degeneracy.csv", &["index", "detuning_fsr_per_mm", "bandwidth_mm"], rows)?;
    out.write_json("degeneracy.json", &to_json(&json!({ "capacity": model.capacity() }))?)?;
    with_config(a, json!({}))
}

#[derive(Debug, Args, Serialize)]
pub struct HologramArgs {
    /// Targets CSV with columns `x_um,y_um,amp,phase`; a square array when omitted.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Side of the default square array.
    #[arg(long, default_value_t = 3)]
    pub array: usize,
    /// Pitch of the default square array (um, atom plane).
    #[arg(long, default_value_t = 5.0)]
    pub pitch_um: f64,
    /// WGS iterations; 0 synthesizes the plain superposition mask.
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    /// SLM pixels per side.
    #[arg(long, default_value_t = 512)]
    pub pixels: usize,
    /// SLM pixel pitch (um).
    #[arg(long, default_value_t = 15.0)]
    pub slm_pitch_um: f64,
    /// Zero-padding factor of the far-field transform.
    #[arg(long, default_value_t = 2)]
    pub padding: usize,
    /// Demagnification from the SLM focal plane to the atoms.
    #[arg(long, default_value_t = 100.0)]
    pub magnification: f64,
    /// Fourier lens focal length (mm).
    #[arg(long, default_value_t = 300.0)]
    pub focal_mm: f64,
    /// Trap wavelength (nm).
    #[arg(long, default_value_t = 785.0)]
    pub wavelength_nm: f64,
    /// Gaussian illumination 1/e^2 radius (mm).
    #[arg(long, default_value_t = 2.7)]
    pub waist_mm: f64,
    /// Uniform illumination instead of Gaussian.
    #[arg(long)]
    pub uniform: bool,
    /// Spot integration radius (far-field pixels).
    #[arg(long, default_value_t = 3.0)]
    pub disk_radius_px: f64,
}

#[derive(Deserialize)]
struct TargetRow {
    x_um: f64,
    y_um: f64,
    #[serde(default = "unit")]
    amp: f64,
    #[serde(default)]
    phase: f64,
}

fn unit() -> f64 {
    1.0
}

fn hologram_cmd(a: &HologramArgs, out: &mut OutputDir) -> Result<Value, CliError> {
    let (targets, extra) = match &a.targets {
        Some(path) => {
            let (bytes, rec) = input_record(path)?;
            let rows: Vec<TargetRow> = csv_rows(&bytes, path)?;
            let t = rows
                .into_iter()
                .map(|r| Target {
                    amplitude: r.amp,
                    phase: r.phase,
                    ..Target::at(r.x_um, r.y_um)
                })
                .collect();
            (t, json!({ "targets_input": rec }))
        }
        None => (hologram::square_array(a.array, a.pitch_um), json!({})),
    };
    let mut spec = HologramSpec::new(targets);
    spec.magnification = a.magnification;
    spec.focal_mm = a.focal_mm;
    spec.wavelength_nm = a.wavelength_nm;
    spec.pixels = (a.pixels, a.pixels);
    spec.pitch_um = a.slm_pitch_um;
    spec.padding = a.padding;
    spec.disk_radius_px = a.disk_radius_px;
    spec.input = if a.uniform {
        InputProfile::Uniform
    } else {
        InputProfile::Gaussian { waist_mm: a.waist_mm }
    };
    spec.validate()?;
    let (mask, history) = if a.iterations == 0 {
        (hologram::synthesize_phase_mask(&spec)?, Vec::new())
    } else {
        let r = hologram::wgs_homogenize(&spec, a.iterations)?;
        (r.mask, r.history)
    };
    let far = hologram::simulate_farfield(&mask, &spec.input_intensity(), spec.padding)?;
    let spots = hologram::spot_report(&spec, &far);
    let gray = image::GrayImage::from_raw(mask.nx as u32, mask.ny as u32, mask.to_gray())
        .ok_or_else(|| CliError::Compute("mask dimensions do not match its data".into()))?;
    let mut pgm = Vec::new();
    image::codecs::pnm::PnmEncoder::new(&mut pgm)
        .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary))
        .encode(gray.as_raw().as_slice(), mask.nx as u32, mask.ny as u32, image::ExtendedColorType::L8)
        .map_err(|e| CliError::Compute(e.to_string()))?;
    out.write("mask.pgm", &pgm)?;
    let offset = |s: &hologram::SpotReport| {
        ((s.centroid_px.0 - s.predicted_px.0).powi(2) + (s.centroid_px.1 - s.predicted_px.1).powi(2)).sqrt()
    };
    out.write_csv(
        "spots.csv",
        &[
            "index",
            "x_um",
            "y_um",
            "predicted_x_px",
            "predicted_y_px",
            "centroid_x_px",
            "centroid_y_px",
            "offset_px",
            "power",
            "relative_power",
        ],
        spots.iter().map(|s| {
            vec![
                s.index.to_string(),
                n(s.x_um),
                n(s.y_um),
                n(s.predicted_px.0),
                n(s.predicted_px.1),
                n(s.centroid_px.0),
                n(s.centroid_px.1),
                n(offset(s)),
                n(s.power),
                n(s.relative_power),
            ]
        }),
    )?;
    if !history.is_empty() {
        out.write_csv(
            "wgs_history.csv",
            &["iteration", "relative_spread"],
            history.iter().enumerate().map(|(i, v)| vec![(i + 1).to_string(), n(*v)]),
        )?;
    }
    let powers: Vec<f64> = spots.iter().map(|s| s.power).collect();
    let summary = json!({
        "targets": spots.len(),
        "relative_spread": hologram::relative_spread(&powers),
        "max_offset_px": spots.iter().map(offset).fold(0.0, f64::max),
        "atom_pixel_um": spec.atom_pixel_um().0,
        "spot_waist_um": spec.spot_waist_um(),
        "diffraction_efficiency": powers.iter().sum::<f64>() / far.total(),
    });
    out.write_json("hologram.json", &to_json(&summary)?)?;
    with_config(a, extra)
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// EMCCD frames of a loaded cavity array with ground truth.
    Frames(SimFramesArgs),
    /// Photon-counter traces with exponential atom loss.
    Spcm(SimSpcmArgs),
    /// Reflection spectrum of a Lorentzian resonance comb.
    Spectrum(SimSpectrumArgs),
    /// Folded detunings of several cavities over a lens displacement scan.
    Detuning(SimDetuningArgs),
    /// Occupancy statistics of stochastic loading.
    Loading(SimLoadingArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimFramesArgs {
    /// Number of cavities.
    #[arg(long, default_value_t = 9)]
    pub cavities: usize,
    /// Cavities per row of the port layout.
    #[arg(long, default_value_t = 3)]
    pub columns: usize,
    /// Port pitch (pixels).
    #[arg(long, default_value_t = 12)]
    pub pitch_px: usize,
    /// Frame margin around the port layout (pixels).
    #[arg(long, default_value_t = 8)]
    pub margin_px: usize,
    /// Number of shots.
    #[arg(long, default_value_t = 2000)]
    pub shots: usize,
    /// Loading probability per waist.
    #[arg(long, default_value_t = 0.18)]
    pub p: f64,
    /// Detected photons per ms from one occupied waist.
    #[arg(long, default_value_t = DetectorModel::default().photon_rate_per_ms)]
    pub photon_rate_per_ms: f64,
    /// Exposure time (ms).
    #[arg(long, default_value_t = DetectorModel::default().exposure_ms)]
    pub exposure_ms: f64,
    /// Mean EM gain per photoelectron.
    #[arg(long, default_value_t = DetectorModel::default().em_gain)]
    pub em_gain: f64,
    /// Gaussian read noise (counts).
    #[arg(long, default_value_t = DetectorModel::default().read_noise)]
    pub read_noise: f64,
    /// Camera bias (counts).
    #[arg(long, default_value_t = DetectorModel::default().offset, allow_hyphen_values = true)]
    pub offset: f64,
    /// Uniform background photons per pixel per exposure.
    #[arg(long, default_value_t = DetectorModel::default().background)]
    pub background: f64,
    /// Point-spread standard deviation (pixels).
    #[arg(long, default_value_t = DetectorModel::default().psf_sigma_px)]
    pub psf_sigma_px: f64,
    /// `shared` or `per-waist`.
    #[arg(long, default_value = "shared", value_parser = parse_port_model)]
    pub port_model: PortModel,
}

#[derive(Debug, Args, Serialize)]
pub struct SimSpcmArgs {
    /// Number of traces.
    #[arg(long, default_value_t = 1000)]
    pub traces: usize,
    /// Count rate with an atom present (1/s).
    #[arg(long, default_value_t = SpcmModel::default().bright_rate)]
    pub bright_rate: f64,
    /// Count rate without an atom (1/s).
    #[arg(long, default_value_t = SpcmModel::default().dark_rate)]
    pub dark_rate: f64,
    /// Atom lifetime (s).
    #[arg(long, default_value_t = SpcmModel::default().tau_s)]
    pub tau_s: f64,
    /// Trace duration (s).
    #[arg(long, default_value_t = SpcmModel::default().duration_s)]
    pub duration_s: f64,
    /// Time bin (ms).
    #[arg(long, default_value_t = SpcmModel::default().bin_ms)]
    pub bin_ms: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimSpectrumArgs {
    /// Free spectral range (arbitrary frequency unit).
    #[arg(long, default_value_t = 1.0)]
    pub fsr: f64,
    /// Cavity finesse.
    #[arg(long, default_value_t = 13.4)]
    pub finesse: f64,
    /// Fractional dip depth.
    #[arg(long, default_value_t = 0.6)]
    pub depth: f64,
    /// Scan start in FSR units.
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    pub start: f64,
    /// Scan end in FSR units.
    #[arg(long, default_value_t = 2.5, allow_hyphen_values = true)]
    pub stop: f64,
    /// Frequency samples.
    #[arg(long, default_value_t = 3001)]
    pub samples: usize,
    /// Additive Gaussian noise as a fraction of the dip depth.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimDetuningArgs {
    /// Lens displacement per FSR of detuning at unit cavity index (mm).
    #[arg(long, default_value_t = 19.0)]
    pub xi_mm: f64,
    /// Cavity indices, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "-4,-2,-1,0,1,2,4", allow_hyphen_values = true)]
    pub indices: Vec<i32>,
    /// Scan start (mm).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub from_mm: f64,
    /// Scan end (mm).
    #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
    pub to_mm: f64,
    /// Displacement samples.
    #[arg(long, default_value_t = 121)]
    pub steps: usize,
    /// Gaussian noise on the folded detuning (FSR).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SimLoadingArgs {
    /// Loading probability per waist.
    #[arg(long, default_value_t = 0.18)]
    pub p: f64,
    /// Number of cavities.
    #[arg(long, default_value_t = 100)]
    pub cavities: usize,
    /// Number of shots.
    #[arg(long, default_value_t = 1000)]
    pub shots: usize,
}

fn simulate(cmd: &SimulateCommand, seed: u64, out: &mut OutputDir) -> Result<Value, CliError> {
    match cmd {
        SimulateCommand::Frames(a) => {
            let det = DetectorModel {
                photon_rate_per_ms: a.photon_rate_per_ms,
                exposure_ms: a.exposure_ms,
                em_gain: a.em_gain,
                read_noise: a.read_noise,
                offset: a.offset,
                background: a.background,
                psf_sigma_px: a.psf_sigma_px,
                port_model: a.port_model,
            };
            let geometry = PortGeometry::grid(a.cavities, a.columns, a.pitch_px, a.margin_px);
            let occ = atomsim::simulate_loading(a.p, a.cavities, a.shots, seed)?;
            let frames = atomsim::simulate_frames(&occ, &geometry, &det, seed)?;
            let mut bin = Vec::new();
            atomsim::write_frames(&mut bin, &frames)?;
            out.write("frames.bin", &bin)?;
            let rows = (0..occ.shots).flat_map(|s| {
                let occ = &occ;
                (0..occ.cavities).map(move |c| {
                    let w = occ.waist(s, c);
                    vec![
                        s.to_string(),
                        c.to_string(),
                        (w[0] as u8).to_string(),
                        (w[1] as u8).to_string(),
                        occ.count(s, c).to_string(),
                    ]
                })
            });
            out.write_csv("truth.csv", &["shot", "cavity", "waist0", "waist1", "atoms"], rows)?;
            out.write_json("geometry.json", &to_json(&geometry)?)?;
            with_config(a, json!({ "detector": to_json(&det)? }))
        }
        SimulateCommand::Spcm(a) => {
            let model = SpcmModel {
                bright_rate: a.bright_rate,
                dark_rate: a.dark_rate,
                tau_s: a.tau_s,
                duration_s: a.duration_s,
                bin_ms: a.bin_ms,
            };
            let traces = atomsim::simulate_spcm_traces(a.traces, &model, seed)?;
            out.write_csv(
                "spcm.csv",
                &["trace", "bin", "count"],
                traces.iter().enumerate().flat_map(|(t, tr)| {
                    tr.counts
                        .iter()
                        .enumerate()
                        .map(move |(b, c)| vec![t.to_string(), b.to_string(), c.to_string()])
                }),
            )?;
            out.write_csv(
                "spcm_truth.csv",
                &["trace", "loss_time_s"],
                traces
                    .iter()
                    .enumerate()
                    .map(|(t, tr)| vec![t.to_string(), tr.loss_time_s.map_or_else(|| "inf".into(), n)]),
            )?;
            with_config(a, json!({}))
        }
        SimulateCommand::Spectrum(a) => {
            let mut m = SpectrumModel::new(a.fsr, a.finesse);
            m.depth = a.depth;
            m.start = a.start * a.fsr;
            m.stop = a.stop * a.fsr;
            m.samples = a.samples;
            m.noise = a.noise * a.depth;
            let s = atomsim::simulate_spectrum(&m, seed)?;
            out.write_csv(
                "spectrum.csv",
                &["frequency", "reflectance"],
                s.frequency.iter().zip(&s.reflectance).map(|(f, r)| vec![n(*f), n(*r)]),
            )?;
            with_config(a, json!({}))
        }
        SimulateCommand::Detuning(a) => {
            let steps = a.steps.max(2);
            let dz: Vec<f64> = (0..steps)
                .map(|i| a.from_mm + (a.to_mm - a.from_mm) * i as f64 / (steps - 1) as f64)
                .collect();
            let offsets: Vec<f64> = (0..a.indices.len())
                .map(|c| {
                    use rand::Rng;
                    rng::substream(seed, rng::DETUNING, (1 << 32) + c as u64).random::<f64>()
                })
                .collect();
            let scan = atomsim::simulate_detuning_scan(&a.indices, a.xi_mm, &dz, &offsets, a.noise, seed)?;
            let rows = scan.indices.iter().zip(&scan.detunings).flat_map(|(i, d)| {
                scan.displacements_mm
                    .iter()
                    .zip(d)
                    .map(move |(z, v)| vec![i.to_string(), n(*z), n(*v)])
            });
            out.write_csv("detuning.csv", &["index", "displacement_mm", "detuning"], rows)?;
            with_config(a, json!({}))
        }
        SimulateCommand::Loading(a) => {
            let occ = atomsim::simulate_loading(a.p, a.cavities, a.shots, seed)?;
            let f = occ.fractions();
            out.write_json(
                "loading.json",
                &to_json(&json!({"empty": f[0], "single": f[1], "double": f[2], "samples": a.cavities * a.shots}))?,
            )?;
            with_config(a, json!({}))
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Score frames per cavity, fit the bimodal histogram and correlate sites.
    Frames(AnFramesArgs),
    /// Fit and correlate a CSV score table (one column per site, one row per shot).
    Scores(AnScoresArgs),
    /// Finesse from a reflection spectrum CSV (`frequency,reflectance`).
    Spectrum(AnInputArgs),
    /// Degeneracy coefficient from a detuning CSV (`index,displacement_mm,detuning`).
    Detuning(AnInputArgs),
    /// Lifetime from photon-counter traces (`trace,bin,count`).
    Spcm(AnSpcmArgs),
    /// Trap waist from depth and radial trap frequency.
    Trap(AnTrapArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct AnFramesArgs {
    /// Frame container written by `simulate frames`.
    #[arg(long)]
    pub frames: PathBuf,
    /// Port layout JSON written by `simulate frames`.
    #[arg(long)]
    pub geometry: PathBuf,
    /// Ground-truth CSV; adds the labeled fidelity to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// `gaussian` or `skew-gaussian`.
    #[arg(long, default_value = "skew-gaussian", value_parser = parse_model)]
    pub model: BimodalModel,
    /// Binarize and smooth before summing windows.
    #[arg(long)]
    pub postprocess: bool,
    /// Pixel binarization threshold (counts).
    #[arg(long, default_value_t = PostProcess::default().pixel_threshold)]
    pub pixel_threshold: f64,
    /// Smoothing kernel standard deviation (pixels).
    #[arg(long, default_value_t = PostProcess::default().kernel_sigma_px)]
    pub kernel_sigma_px: f64,
    /// Window half-size (pixels).
    #[arg(long, default_value_t = 3)]
    pub window_half: usize,
    /// Score each port separately instead of summing conjugate ports.
    #[arg(long)]
    pub per_port: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AnScoresArgs {
    /// Score table CSV, one column per site and one row per shot.
    #[arg(long)]
    pub input: PathBuf,
    /// `gaussian` or `skew-gaussian`.
    #[arg(long, default_value = "skew-gaussian", value_parser = parse_model)]
    pub model: BimodalModel,
}

#[derive(Debug, Args, Serialize)]
pub struct AnInputArgs {
    /// CSV written by the matching `simulate` subcommand.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnSpcmArgs {
    /// Photon-counter CSV (`trace,bin,count`).
    #[arg(long)]
    pub input: PathBuf,
    /// Time bin (ms).
    #[arg(long, default_value_t = 1.0)]
    pub bin_ms: f64,
    /// Moving-sum window (bins).
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    /// Occupancy threshold on the moving sum; fitted from the data when omitted.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnTrapArgs {
    /// Trap depth (uK).
    #[arg(long, conflicts_with = "light_shift_mhz", required_unless_present = "light_shift_mhz")]
    pub depth_uk: Option<f64>,
    /// Total light shift of the imaging transition (MHz).
    #[arg(long)]
    pub light_shift_mhz: Option<f64>,
    /// Radial trap frequency (kHz).
    #[arg(long)]
    pub frequency_khz: f64,
    /// Atomic mass (kg).
    #[arg(long, default_value_t = RB87_MASS_KG)]
    pub mass_kg: f64,
}

fn fit_report(scores: &analysis::ShotSet, model: BimodalModel, out: &mut OutputDir) -> Result<Value, CliError> {
    let fit = analysis::fit_bimodal(&scores.pooled(), model)?;
    let corr = analysis::pearson_matrix(scores)?;
    out.write("correlation.csv", corr.to_csv().as_bytes())?;
    Ok(json!({
        "fit": to_json(&fit)?,
        "max_abs_off_diagonal_correlation": corr.max_off_diagonal(),
        "sites": scores.sites.len(),
        "shots": scores.scores.len(),
    }))
}

fn write_scores(scores: &analysis::ShotSet, out: &mut OutputDir) -> Result<(), CliError> {
    let names: Vec<String> = scores
        .sites
        .iter()
        .map(|s| match s.port {
            Some(p) => format!("cavity{}_port{}", s.cavity, p),
            None => format!("cavity{}", s.cavity),
        })
        .collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    out.write_csv("scores.csv", &header, scores.scores.iter().map(|r| r.iter().map(|v| n(*v)).collect()))
}

#[derive(Deserialize)]
struct TruthRow {
    shot: usize,
    cavity: usize,
    atoms: u8,
}

#[derive(Deserialize)]
struct SpectrumRow {
    frequency: f64,
    reflectance: f64,
}

#[derive(Deserialize)]
struct DetuningRow {
    index: i32,
    displacement_mm: f64,
    detuning: f64,
}

#[derive(Deserialize)]
struct SpcmRow {
    trace: usize,
    bin: usize,
    count: u32,
}

fn analyze(cmd: &AnalyzeCommand, out: &mut OutputDir) -> Result<Value, CliError> {
    match cmd {
        AnalyzeCommand::Frames(a) => {
            let (frame_bytes, frames_rec) = input_record(&a.frames)?;
            let (geo_bytes, geo_rec) = input_record(&a.geometry)?;
            let frames = atomsim::read_frames(&mut frame_bytes.as_slice())?;
            let geometry: PortGeometry = serde_json::from_slice(&geo_bytes)
                .map_err(|e| CliError::Usage(format!("{}: {e}", a.geometry.display())))?;
            let post = PostProcess {
                pixel_threshold: a.pixel_threshold,
                kernel_sigma_px: a.kernel_sigma_px,
            };
            let scores = analysis::shotset_from_frames(
                &frames,
                &geometry,
                a.window_half,
                a.postprocess.then_some(&post),
                !a.per_port,
            )?;
            write_scores(&scores, out)?;
            let mut report = fit_report(&scores, a.model, out)?;
            let mut extra = json!({"frames_input": frames_rec, "geometry_input": geo_rec});
            if let Some(path) = &a.truth {
                let (bytes, rec) = input_record(path)?;
                let rows: Vec<TruthRow> = csv_rows(&bytes, path)?;
                let mut occupied = vec![vec![false; geometry.cavities()]; frames.len()];
                for r in rows {
                    if r.shot < frames.len() && r.cavity < geometry.cavities() {
                        occupied[r.shot][r.cavity] = r.atoms > 0;
                    }
                }
                let labels: Vec<bool> = scores
                    .scores
                    .iter()
                    .enumerate()
                    .flat_map(|(s, _)| scores.sites.iter().map(move |site| (s, site.cavity)))
                    .map(|(s, c)| occupied[s][c])
                    .collect();
                let (threshold, fidelity) = analysis::labeled_fidelity(&scores.pooled(), &labels);
                report["truth"] = to_json(&json!({"threshold": threshold, "fidelity": fidelity}))?;
                extra["truth_input"] = rec;
            }
            out.write_json("analysis.json", &report)?;
            with_config(a, extra)
        }
        AnalyzeCommand::Scores(a) => {
            let (bytes, rec) = input_record(&a.input)?;
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
            let bad = |e: csv::Error| CliError::Usage(format!("{}: {e}", a.input.display()));
            let width = reader.headers().map_err(bad)?.len();
            let mut rows = Vec::new();
            for rec in reader.records() {
                let rec = rec.map_err(bad)?;
                let row = rec
                    .iter()
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", a.input.display())))?;
                rows.push(row);
            }
            let set = analysis::ShotSet {
                sites: (0..width).map(|c| analysis::SiteInfo { cavity: c, port: None }).collect(),
                scores: rows,
            };
            let report = fit_report(&set, a.model, out)?;
            out.write_json("analysis.json", &report)?;
            with_config(a, json!({ "input_record": rec }))
        }
        AnalyzeCommand::Spectrum(a) => {
            let (bytes, rec) = input_record(&a.input)?;
            let rows: Vec<SpectrumRow> = csv_rows(&bytes, &a.input)?;
            let f: Vec<f64> = rows.iter().map(|r| r.frequency).collect();
            let r: Vec<f64> = rows.iter().map(|r| r.reflectance).collect();
            let fit = analysis::finesse_from_spectrum(&f, &r)?;
            out.write_json("finesse.json", &to_json(&fit)?)?;
            with_config(a, json!({ "input_record": rec }))
        }
        AnalyzeCommand::Detuning(a) => {
            let (bytes, rec) = input_record(&a.input)?;
            let rows: Vec<DetuningRow> = csv_rows(&bytes, &a.input)?;
            let mut indices: Vec<i32> = Vec::new();
            for r in &rows {
                if !indices.contains(&r.index) {
                    indices.push(r.index);
                }
            }
            let dz: Vec<f64> = rows.iter().filter(|r| r.index == indices[0]).map(|r| r.displacement_mm).collect();
            let series: Vec<Vec<f64>> = indices
                .iter()
                .map(|&i| rows.iter().filter(|r| r.index == i).map(|r| r.detuning).collect())
                .collect();
            let fit = analysis::fit_detuning_slopes(&dz, &indices, &series)?;
            out.write_csv(
                "slopes.csv",
                &["index", "slope_fsr_per_mm", "bandwidth_mm", "phase", "rms_residual"],
                fit.cavities.iter().map(|c| {
                    vec![c.index.to_string(), n(c.slope), n(c.bandwidth_mm), n(c.phase), n(c.rms_residual)]
                }),
            )?;
            out.write_json("detuning_fit.json", &to_json(&json!({ "xi_mm": fit.xi_mm }))?)?;
            with_config(a, json!({ "input_record": rec }))
        }
        AnalyzeCommand::Spcm(a) => {
            let (bytes, rec) = input_record(&a.input)?;
            let rows: Vec<SpcmRow> = csv_rows(&bytes, &a.input)?;
            let traces = rows.iter().map(|r| r.trace + 1).max().unwrap_or(0);
            let bins = rows.iter().map(|r| r.bin + 1).max().unwrap_or(0);
            let mut counts = vec![vec![0.0; bins]; traces];
            for r in &rows {
                counts[r.trace][r.bin] = r.count as f64;
            }
            let sums: Vec<Vec<f64>> = counts.iter().map(|c| analysis::moving_sum(c, a.window)).collect();
            let threshold = match a.threshold {
                Some(t) => t,
                None => {
                    let pooled: Vec<f64> = sums.iter().flatten().copied().collect();
                    analysis::fit_bimodal(&pooled, BimodalModel::Gaussian)?.threshold
                }
            };
            let initial: Vec<&Vec<f64>> = sums.iter().filter(|s| s.first().is_some_and(|&v| v > threshold)).collect();
            if initial.is_empty() {
                return Err(CliError::Compute("no trace starts above the occupancy threshold".into()));
            }
            let windows = initial[0].len();
            let bin_s = a.bin_ms * 1e-3;
            let times: Vec<f64> = (0..windows).map(|k| (k as f64 + a.window as f64 / 2.0) * bin_s).collect();
            let fractions: Vec<f64> = (0..windows)
                .map(|k| initial.iter().filter(|s| s[k] > threshold).count() as f64 / initial.len() as f64)
                .collect();
            let fit = analysis::survival_fit(&times, &fractions)?;
            out.write_csv(
                "survival.csv",
                &["time_s", "fraction", "fit"],
                times.iter().zip(&fractions).map(|(t, f)| vec![n(*t), n(*f), n(fit.survival(*t))]),
            )?;
            out.write_json(
                "survival.json",
                &to_json(&json!({
                    "tau_s": if fit.tau_s.is_finite() { json!(fit.tau_s) } else { json!("inf") },
                    "rate_per_s": fit.rate,
                    "threshold": threshold,
                    "initially_occupied": initial.len(),
                    "traces": traces,
                    "survival_4ms": fit.survival(4e-3),
                }))?,
            )?;
            with_config(a, json!({ "input_record": rec }))
        }
        AnalyzeCommand::Trap(a) => {
            let m = match (a.depth_uk, a.light_shift_mhz) {
                (Some(u), _) => analysis::TrapMeasurement::new(BOLTZMANN * u * 1e-6, a.frequency_khz, a.mass_kg)?,
                (None, Some(s)) => analysis::TrapMeasurement::from_light_shift(s, a.frequency_khz, a.mass_kg)?,
                (None, None) => return Err(CliError::Usage("need --depth-uk or --light-shift-mhz".into())),
            };
            out.write_json(
                "trap.json",
                &to_json(&json!({"depth_j": m.depth_j, "frequency_khz": m.frequency_khz, "waist_um": m.waist_um()}))?,
            )?;
            with_config(a, json!({}))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_span_parsing() {
        assert_eq!(parse_grid("64x64"), Ok((64, 64)));
        assert_eq!(parse_grid("32"), Ok((32, 32)));
        assert!(parse_grid("0x4").is_err());
        assert_eq!(parse_span("10mm"), Ok((10.0, 10.0)));
        assert_eq!(parse_span("10x8mm"), Ok((10.0, 8.0)));
        assert_eq!(parse_span("10mmx8mm"), Ok((10.0, 8.0)));
        assert_eq!(parse_point("-1,2.5"), Ok((-1.0, 2.5)));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(digest(b""), "cbf29ce484222325");
        assert_ne!(digest(b"a"), digest(b"b"));
    }
}
