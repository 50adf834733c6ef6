//! Photon bookkeeping: finesse and loss conversions, element-wise loss,
//! outcoupling fraction, cooperativity and the collection chain from the atom
//! to the detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Mass of a rubidium-87 atom (kg).
pub const RB87_MASS_KG: f64 = 1.443_160_6e-25;
/// Polarization factor that, together with the thermal model, reproduces the
/// reported corrected cavity collection; fitted, not derived.
pub const DEFAULT_POLARIZATION_FACTOR: f64 = 0.785;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("`{name}` = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("undefined: {0}")]
    Undefined(&'static str),
}

fn check<T: Real>(name: &'static str, v: T, ok: bool, range: &'static str) -> Result<(), BudgetError> {
    if ok && v.is_finite() {
        Ok(())
    } else {
        Err(BudgetError::OutOfRange {
            name,
            value: v.as_f64(),
            range,
        })
    }
}

/// Finesse of a cavity with fractional round-trip loss `rho`.
pub fn finesse_from_loss<T: Real>(rho: T) -> Result<T, BudgetError> {
    check("rho", rho, rho > T::zero() && rho < T::one(), "(0, 1)")?;
    let s = T::one() - rho;
    let arg = (T::one() - s.sqrt()) / (T::two() * s.sqrt().sqrt());
    Ok(T::PI() / (T::two() * arg.asin()))
}

/// Round-trip loss for finesse `f`, from the quadratic in `(1 - rho)^(1/4)`.
pub fn loss_from_finesse<T: Real>(f: T) -> Result<T, BudgetError> {
    check("finesse", f, f > T::one(), "(1, inf)")?;
    let s = (T::PI() / (T::two() * f)).sin();
    // u^2 + 2 s u - 1 = 0 with u = (1 - rho)^(1/4)
    let u = (s * s + T::one()).sqrt() - s;
    let u2 = u * u;
    Ok(T::one() - u2 * u2)
}

/// Internal loss after removing `passes` encounters with an outcoupler of
/// reflectivity `r_out`.
pub fn internal_loss<T: Real>(rho: T, r_out: T, passes: u32) -> Result<T, BudgetError> {
    check("rho", rho, rho >= T::zero() && rho < T::one(), "[0, 1)")?;
    check("r_out", r_out, r_out > T::zero() && r_out <= T::one(), "(0, 1]")?;
    let rho0 = T::one() - (T::one() - rho) / r_out.powi(passes as i32);
    if !(rho0 >= T::zero() && rho0 < T::one()) {
        return Err(BudgetError::Inconsistent(format!(
            "internal loss {} from rho = {} and r_out = {}",
            rho0.as_f64(),
            rho.as_f64(),
            r_out.as_f64()
        )));
    }
    Ok(rho0)
}

/// Total round-trip loss given the internal loss; inverse of [`internal_loss`].
pub fn total_loss<T: Real>(rho0: T, r_out: T, passes: u32) -> Result<T, BudgetError> {
    check("rho0", rho0, rho0 >= T::zero() && rho0 < T::one(), "[0, 1)")?;
    check("r_out", r_out, r_out > T::zero() && r_out <= T::one(), "(0, 1]")?;
    Ok(T::one() - (T::one() - rho0) * r_out.powi(passes as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossItem {
    pub name: String,
    /// Loss per pass.
    pub loss: f64,
    pub passes: u32,
}

impl LossItem {
    pub fn new(name: &str, loss: f64, passes: u32) -> Self {
        Self {
            name: name.to_string(),
            loss,
            passes,
        }
    }
}

/// Per-element losses and pass counts of the bundled cavity.
pub fn reference_loss_items() -> Vec<LossItem> {
    vec![
        LossItem::new("microlens array", 0.005, 4),
        LossItem::new("spherical lens", 0.0025, 4),
        LossItem::new("vacuum window", 0.005, 4),
        LossItem::new("aspheric lens", 0.025, 4),
        LossItem::new("curved mirror", 0.044, 2),
        LossItem::new("mirror-asphere misalignment", 0.015, 4),
    ]
}

/// Combined round-trip loss `1 - prod (1 - l_i)^p_i`.
pub fn elementwise_loss(items: &[LossItem]) -> Result<f64, BudgetError> {
    let mut survive = 1.0;
    for it in items {
        check("loss", it.loss, (0.0..1.0).contains(&it.loss), "[0, 1)")?;
        survive *= (1.0 - it.loss).powi(it.passes as i32);
    }
    Ok(1.0 - survive)
}

/// Loss probability over a quarter of the closed trajectory.
pub fn quarter_trip_loss<T: Real>(rho0: T) -> Result<T, BudgetError> {
    check("rho0", rho0, rho0 >= T::zero() && rho0 < T::one(), "[0, 1)")?;
    Ok(T::one() - (T::one() - rho0).powf(T::lit(0.25)))
}

/// Probability that a photon in the cavity eventually leaves through the
/// outcoupler rather than being lost internally.
pub fn outcoupling_fraction<T: Real>(p_m: T, p_i: T) -> Result<T, BudgetError> {
    check("p_m", p_m, p_m >= T::zero() && p_m <= T::one(), "(0, 1]")?;
    check("p_i", p_i, p_i >= T::zero() && p_i < T::one(), "[0, 1)")?;
    if p_m == T::zero() && p_i == T::zero() {
        return Err(BudgetError::Undefined("outcoupling fraction with P_M = P_I = 0"));
    }
    let keep = T::one() - p_i;
    Ok(p_m * keep / (T::one() - (T::one() - p_m) * keep * keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: u64,
    pub successes: u64,
}

const MC_CHUNK: u64 = 1 << 16;

/// Monte Carlo of the photon event sequence: one internal quarter trip, then
/// repeated (mirror, quarter, quarter) until the photon exits or is lost.
pub fn montecarlo_outcoupling(p_m: f64, p_i: f64, trials: u64, seed: u64) -> Result<McEstimate, BudgetError> {
    outcoupling_fraction(p_m, p_i)?;
    if trials == 0 {
        return Err(BudgetError::OutOfRange {
            name: "trials",
            value: 0.0,
            range: "[1, inf)",
        });
    }
    let chunks = trials.div_ceil(MC_CHUNK);
    let successes: u64 = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let n = MC_CHUNK.min(trials - k * MC_CHUNK);
            let mut hits = 0u64;
            for _ in 0..n {
                if p_i > 0.0 && rng.random::<f64>() < p_i {
                    continue;
                }
                loop {
                    if rng.random::<f64>() < p_m {
                        hits += 1;
                        break;
                    }
                    if p_i > 0.0 && (rng.random::<f64>() < p_i || rng.random::<f64>() < p_i) {
                        break;
                    }
                }
            }
            hits
        })
        .sum();
    let p = successes as f64 / trials as f64;
    Ok(McEstimate {
        estimate: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
        successes,
    })
}

/// Single-atom cooperativity `(6 F / pi^3) (lambda / w)^2`.
pub fn cooperativity<T: Real>(finesse: T, waist: T, wavelength: T) -> T {
    let r = wavelength / waist;
    T::lit(6.0) * finesse / T::PI().powi(3) * r * r
}

/// Standing-wave contrast reduction from the thermal axial spread of an atom
/// in a harmonic trap.
pub fn thermal_axial_factor<T: Real>(temperature: T, trap_frequency: T, wavelength: T, mass: T) -> T {
    let omega = T::two() * T::PI() * trap_frequency;
    let sigma2 = T::lit(BOLTZMANN) * temperature / (mass * omega * omega);
    let k = T::two() * T::PI() / wavelength;
    (T::one() + (-T::two() * k * k * sigma2).exp()) / T::two()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalModel {
    pub temperature_uk: f64,
    pub trap_frequency_khz: f64,
    #[serde(default = "default_mass")]
    pub mass_kg: f64,
}

fn default_mass() -> f64 {
    RB87_MASS_KG
}

impl ThermalModel {
    pub fn factor(&self, wavelength_m: f64) -> f64 {
        thermal_axial_factor(
            self.temperature_uk * 1e-6,
            self.trap_frequency_khz * 1e3,
            wavelength_m,
            self.mass_kg,
        )
    }
}

/// Where the thermal factor enters the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionOrder {
    /// Scale the cooperativity before the branching ratio.
    #[default]
    ThermalOnCooperativity,
    /// Scale the collection probability after the branching ratio.
    ThermalOnCollection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub efficiency: f64,
}

impl Stage {
    pub fn new(name: &str, efficiency: f64) -> Self {
        Self {
            name: name.to_string(),
            efficiency,
        }
    }
}

/// Downstream stages between the outcoupler and the detected photoelectron.
pub fn reference_stages() -> Vec<Stage> {
    vec![
        Stage::new("glan-taylor polarizer", 0.46),
        Stage::new("telescopes to camera", 0.96),
        Stage::new("quantum efficiency", 0.75),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionChain {
    pub internal_loss: f64,
    pub outcoupler_reflectivity: f64,
    #[serde(default = "default_passes")]
    pub outcoupler_passes: u32,
    pub waist_um: f64,
    pub wavelength_nm: f64,
    #[serde(default)]
    pub thermal: Option<ThermalModel>,
    #[serde(default = "one")]
    pub polarization: f64,
    #[serde(default)]
    pub correction_order: CorrectionOrder,
    #[serde(default, rename = "stage")]
    pub stages: Vec<Stage>,
}

fn default_passes() -> u32 {
    2
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResult {
    pub name: String,
    pub efficiency: f64,
    pub cumulative: f64,
}

/// Every intermediate of the collection chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollectionBreakdown {
    pub total_loss: f64,
    pub finesse: f64,
    pub cooperativity: f64,
    pub thermal_factor: f64,
    pub effective_cooperativity: f64,
    pub branching: f64,
    pub mirror_loss: f64,
    pub quarter_loss: f64,
    pub outcoupling: f64,
    pub peak_collection: f64,
    pub corrected_collection: f64,
    pub stages: Vec<StageResult>,
    pub total: f64,
}

impl CollectionChain {
    pub fn evaluate(&self) -> Result<CollectionBreakdown, BudgetError> {
        check(
            "polarization",
            self.polarization,
            self.polarization > 0.0 && self.polarization <= 1.0,
            "(0, 1]",
        )?;
        for s in &self.stages {
            check("stage efficiency", s.efficiency, s.efficiency > 0.0 && s.efficiency <= 1.0, "(0, 1]")?;
        }
        check("waist_um", self.waist_um, self.waist_um > 0.0, "(0, inf)")?;
        check("wavelength_nm", self.wavelength_nm, self.wavelength_nm > 0.0, "(0, inf)")?;
        let rho = total_loss(self.internal_loss, self.outcoupler_reflectivity, self.outcoupler_passes)?;
        let finesse = finesse_from_loss(rho)?;
        let lambda = self.wavelength_nm * 1e-9;
        let c = cooperativity(finesse, self.waist_um * 1e-6, lambda);
        let thermal_factor = self.thermal.map_or(1.0, |t| t.factor(lambda));
        let effective_cooperativity = match self.correction_order {
            CorrectionOrder::ThermalOnCooperativity => c * thermal_factor,
            CorrectionOrder::ThermalOnCollection => c,
        };
        let p_m = 1.0 - self.outcoupler_reflectivity;
        let p_i = quarter_trip_loss(self.internal_loss)?;
        let outcoupling = outcoupling_fraction(p_m, p_i)?;
        let peak_collection = c / (1.0 + c) * outcoupling;
        let branching = effective_cooperativity / (1.0 + effective_cooperativity);
        let mut corrected = branching * outcoupling * self.polarization;
        if self.correction_order == CorrectionOrder::ThermalOnCollection {
            corrected *= thermal_factor;
        }
        let mut cumulative = corrected;
        let stages = self
            .stages
            .iter()
            .map(|s| {
                cumulative *= s.efficiency;
                StageResult {
                    name: s.name.clone(),
                    efficiency: s.efficiency,
                    cumulative,
                }
            })
            .collect();
        Ok(CollectionBreakdown {
            total_loss: rho,
            finesse,
            cooperativity: c,
            thermal_factor,
            effective_cooperativity,
            branching,
            mirror_loss: p_m,
            quarter_loss: p_i,
            outcoupling,
            peak_collection,
            corrected_collection: corrected,
            stages,
            total: cumulative,
        })
    }
}

/// Largest circular array that stays within one linewidth of degeneracy for a
/// lens positioning accuracy `z0` (same length unit as `xi`, per FSR).
pub fn degeneracy_capacity<T: Real>(finesse: T, z0: T, xi: T) -> T {
    T::PI() * xi / (finesse * z0)
}

/// Detuning (FSR units) of the cavity with index `x` after a lens displacement `dz`.
pub fn detuning_sensitivity<T: Real>(x: T, xi: T, dz: T) -> T {
    x * x * dz / xi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyModel {
    pub xi_mm_per_fsr: f64,
    pub z0_um: f64,
    pub finesse: f64,
    /// Cavity index counted from the optical axis.
    #[serde(default)]
    pub index: u32,
}

impl DegeneracyModel {
    pub fn validate(&self) -> Result<(), BudgetError> {
        check("xi_mm_per_fsr", self.xi_mm_per_fsr, self.xi_mm_per_fsr > 0.0, "(0, inf)")?;
        check("z0_um", self.z0_um, self.z0_um > 0.0, "(0, inf)")?;
        check("finesse", self.finesse, self.finesse > 0.0, "(0, inf)")
    }

    pub fn capacity(&self) -> f64 {
        degeneracy_capacity(self.finesse, self.z0_um * 1e-3, self.xi_mm_per_fsr)
    }

    /// Detuning in FSR of cavity `index` per millimetre of lens displacement.
    pub fn detuning_per_mm(&self) -> f64 {
        detuning_sensitivity(self.index as f64, self.xi_mm_per_fsr, 1.0)
    }
}

/// Per-element loss ledger around an outcoupler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    #[serde(rename = "item")]
    pub items: Vec<LossItem>,
    pub outcoupler_reflectivity: f64,
    #[serde(default = "default_passes")]
    pub outcoupler_passes: u32,
    /// Measured finesse, if available, for comparison with the element-wise estimate.
    #[serde(default)]
    pub measured_finesse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSummary {
    pub internal_loss: f64,
    pub total_loss: f64,
    pub quarter_loss: f64,
    pub finesse: f64,
}

impl LossBudget {
    /// Derived quantities from the element-wise internal loss.
    pub fn elementwise(&self) -> Result<LossSummary, BudgetError> {
        let rho0 = elementwise_loss(&self.items)?;
        self.summary_from_internal(rho0)
    }

    /// Derived quantities from the measured finesse.
    pub fn measured(&self) -> Result<Option<LossSummary>, BudgetError> {
        let Some(f) = self.measured_finesse else {
            return Ok(None);
        };
        let rho = loss_from_finesse(f)?;
        let rho0 = internal_loss(rho, self.outcoupler_reflectivity, self.outcoupler_passes)?;
        Ok(Some(LossSummary {
            internal_loss: rho0,
            total_loss: rho,
            quarter_loss: quarter_trip_loss(rho0)?,
            finesse: f,
        }))
    }

    fn summary_from_internal(&self, rho0: f64) -> Result<LossSummary, BudgetError> {
        let rho = total_loss(rho0, self.outcoupler_reflectivity, self.outcoupler_passes)?;
        Ok(LossSummary {
            internal_loss: rho0,
            total_loss: rho,
            quarter_loss: quarter_trip_loss(rho0)?,
            finesse: finesse_from_loss(rho)?,
        })
    }
}

/// Inputs of the `budget` report; every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    #[serde(default)]
    pub loss: Option<LossBudget>,
    #[serde(default)]
    pub collection: Option<CollectionChain>,
    #[serde(default)]
    pub degeneracy: Option<DegeneracyModel>,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub mirror_loss: f64,
    pub quarter_loss: f64,
    pub trials: u64,
}

/// One reported number with the formula that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
    pub formula: &'static str,
}

fn q(out: &mut Vec<Quantity>, name: impl Into<String>, value: f64, formula: &'static str) {
    out.push(Quantity {
        name: name.into(),
        value,
        formula,
    });
}

fn loss_quantities(out: &mut Vec<Quantity>, prefix: &str, s: &LossSummary) {
    q(out, format!("{prefix}.internal_loss"), s.internal_loss, "rho0 = 1 - (1 - rho) / R_out^passes");
    q(out, format!("{prefix}.total_loss"), s.total_loss, "rho = 1 - (1 - rho0) R_out^passes");
    q(out, format!("{prefix}.quarter_loss"), s.quarter_loss, "P_I = 1 - (1 - rho0)^(1/4)");
    q(
        out,
        format!("{prefix}.finesse"),
        s.finesse,
        "F = pi / (2 asin((1 - sqrt(1 - rho)) / (2 (1 - rho)^(1/4))))",
    );
}

/// Flat list of every intermediate quantity for the sections present in `cfg`.
pub fn budget_report(cfg: &BudgetConfig, seed: u64) -> Result<Vec<Quantity>, BudgetError> {
    let mut out = Vec::new();
    if let Some(loss) = &cfg.loss {
        q(&mut out, "loss.elementwise", elementwise_loss(&loss.items)?, "1 - prod (1 - l_i)^p_i");
        loss_quantities(&mut out, "loss.elementwise", &loss.elementwise()?);
        if let Some(m) = loss.measured()? {
            loss_quantities(&mut out, "loss.measured", &m);
        }
    }
    if let Some(chain) = &cfg.collection {
        let b = chain.evaluate()?;
        let f = &mut out;
        q(f, "collection.total_loss", b.total_loss, "rho = 1 - (1 - rho0) R_out^passes");
        q(f, "collection.finesse", b.finesse, "F = pi / (2 asin((1 - sqrt(1 - rho)) / (2 (1 - rho)^(1/4))))");
        q(f, "collection.cooperativity", b.cooperativity, "C = 6 F / pi^3 (lambda / w)^2");
        q(f, "collection.thermal_factor", b.thermal_factor, "eta = (1 + exp(-2 k^2 sigma^2)) / 2");
        q(f, "collection.effective_cooperativity", b.effective_cooperativity, "C_eff = C eta or C");
        q(f, "collection.branching", b.branching, "C_eff / (1 + C_eff)");
        q(f, "collection.mirror_loss", b.mirror_loss, "P_M = 1 - R_out");
        q(f, "collection.quarter_loss", b.quarter_loss, "P_I = 1 - (1 - rho0)^(1/4)");
        q(
            f,
            "collection.outcoupling",
            b.outcoupling,
            "Lambda = P_M (1 - P_I) / (1 - (1 - P_M) (1 - P_I)^2)",
        );
        q(f, "collection.peak_collection", b.peak_collection, "P_col = C / (1 + C) Lambda");
        q(
            f,
            "collection.corrected_collection",
            b.corrected_collection,
            "C_eff / (1 + C_eff) Lambda kappa_pol",
        );
        for s in &b.stages {
            q(f, format!("collection.stage.{}", s.name), s.cumulative, "previous * efficiency");
        }
        q(f, "collection.total", b.total, "corrected_collection prod efficiency");
    }
    if let Some(d) = &cfg.degeneracy {
        d.validate()?;
        q(&mut out, "degeneracy.capacity", d.capacity(), "N = pi xi / (F z0)");
        q(&mut out, "degeneracy.detuning_per_mm", d.detuning_per_mm(), "Delta_f = x^2 Delta_z / xi");
    }
    if let Some(mc) = &cfg.montecarlo {
        let exact = outcoupling_fraction(mc.mirror_loss, mc.quarter_loss)?;
        let est = montecarlo_outcoupling(mc.mirror_loss, mc.quarter_loss, mc.trials, seed)?;
        let f = &mut out;
        q(f, "montecarlo.analytic", exact, "Lambda = P_M (1 - P_I) / (1 - (1 - P_M) (1 - P_I)^2)");
        q(f, "montecarlo.estimate", est.estimate, "exits / trials");
        q(f, "montecarlo.stderr", est.stderr, "sqrt(p (1 - p) / trials)");
    }
    Ok(out)
}
