//! Statistical pipeline for readout data: frame scoring, bimodal fits and
//! discrimination fidelity, correlations, survival, trap waists, finesse and
//! degeneracy-slope fits.

mod bimodal;
mod correlation;
mod frames;
mod spectra;
mod survival;
mod trap;

pub use bimodal::{
    fidelity_of, fit_bimodal, labeled_fidelity, BimodalFit, BimodalModel, Component, ComponentShape,
};
pub use correlation::{pearson_matrix, CorrelationMatrix};
pub use frames::{
    pair_sums, postprocess_frame, raw_window_sums, shotset_from_frames, windows_for, PostProcess, ShotSet, SiteInfo,
    Window,
};
pub use spectra::{fit_detuning_slopes, finesse_from_spectrum, CavitySlope, DetuningFit, FinesseFit};
pub use survival::{moving_sum, normalize_by_threshold, occupancy_from_trace, survival_fit, SurvivalFit};
pub use trap::{gaussian_trap_frequency, trap_waist, TrapMeasurement, LIGHT_SHIFT_DEPTH_FRACTION, PLANCK};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("fit did not converge (residual {residual:.3e})")]
    NonConvergent { residual: f64 },
    #[error("window at ({cx}, {cy}) with half-size {half} exceeds the {width}x{height} frame")]
    WindowOutOfBounds {
        cx: usize,
        cy: usize,
        half: usize,
        width: usize,
        height: usize,
    },
    #[error("found {0} resolvable dips, need at least 2")]
    TooFewDips(usize),
    #[error("linewidth {linewidth:.3e} is below two samples ({step:.3e})")]
    Unresolved { linewidth: f64, step: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("{0}")]
    Invalid(String),
}
