use serde::Serialize;

use super::{harrell_c, DiagnosticError};
use crate::cox::{aic, fit, Coefficient, CoxFit, FitOptions};
use crate::spells::SpellDataset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenResult {
    pub coefficient: Coefficient,
    pub harrell_c: f64,
    pub aic: f64,
    #[serde(skip)]
    pub fit: CoxFit,
}

/// Fits a one-covariate model and scores its discrimination.
pub fn screen_single_factor(
    ds: &SpellDataset,
    name: &str,
    options: &FitOptions,
) -> Result<ScreenResult, DiagnosticError> {
    let options = FitOptions { covariates: Some(vec![name.to_string()]), ..options.clone() };
    let model = fit(ds, &options)?;
    let c = harrell_c(&model, ds)?;
    Ok(ScreenResult { coefficient: model.coefficients().remove(0), harrell_c: c, aic: aic(&model), fit: model })
}

/// Screens every covariate in the schema, in schema order.
pub fn screen_all(ds: &SpellDataset, options: &FitOptions) -> Vec<(String, Result<ScreenResult, DiagnosticError>)> {
    ds.schema.iter().map(|name| (name.clone(), screen_single_factor(ds, name, options))).collect()
}
