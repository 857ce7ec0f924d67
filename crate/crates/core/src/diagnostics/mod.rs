//! Model diagnostics: concordance, Cox-Snell residual fit, time-dependent
//! ROC curves and single-factor screening.

mod concordance;
mod residuals;
mod screen;
mod troc;

use thiserror::Error;

use crate::cox::FitError;

pub use concordance::harrell_c;
pub use residuals::{
    cox_snell_residuals, ks_one_sample, ks_statistic, ks_two_sample, CensoredAdjustment, CoxSnellResiduals, KsMode,
    KsResult,
};
pub use screen::{screen_all, screen_single_factor, ScreenResult};
pub use troc::{
    period_markers, spell_markers, tauc, trapezoid_auc, troc_classical, troc_clustered, ClusterWeighting,
    ClusteredMarker, MarkerObs, ThresholdGrid, TrocConfig, TrocCurve, TrocVariant,
};

#[derive(Debug, Error)]
pub enum DiagnosticError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("no comparable pairs: no spell fails while another is at risk")]
    NoComparablePairs,
    #[error("sample is empty")]
    EmptySample,
    #[error("marker values must be finite")]
    NonFiniteMarker,
    #[error("tROC undefined at horizon {0}: no events by the horizon")]
    NoEventsByHorizon(i64),
    #[error("tROC undefined at horizon {0}: no survivors past the horizon")]
    NoSurvivorsAtHorizon(i64),
    #[error("neighbourhood parameter lambda = {0} must lie in (0, 0.5)")]
    Lambda(f64),
}
