use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DiagnosticError;
use crate::cox::{survival_with_columns, CoxFit};
use crate::spells::SpellDataset;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CensoredAdjustment {
    None,
    /// Add ln 2, the median of the unit exponential, to censored residuals.
    #[default]
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoxSnellResiduals {
    pub residuals: Vec<f64>,
    pub events: Vec<bool>,
}

/// Cox-Snell residual of every spell: the fitted cumulative hazard it has
/// accumulated by its final stop, optionally adjusted when censored.
pub fn cox_snell_residuals(
    fit: &CoxFit,
    ds: &SpellDataset,
    adjust: CensoredAdjustment,
) -> Result<CoxSnellResiduals, DiagnosticError> {
    let columns = fit.column_map(&ds.schema)?;
    let spells: Vec<_> = ds.spells().collect();
    let pairs: Vec<(f64, bool)> = spells
        .par_iter()
        .map(|spell| {
            let h = survival_with_columns(fit, ds.technique, spell, &columns).cumulative_hazard();
            let event = spell[spell.len() - 1].status;
            let r = match (event, adjust) {
                (false, CensoredAdjustment::Median) => h + std::f64::consts::LN_2,
                _ => h,
            };
            (r, event)
        })
        .collect();
    let (residuals, events) = pairs.into_iter().unzip();
    Ok(CoxSnellResiduals { residuals, events })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KsMode {
    /// Against the analytic unit-exponential CDF.
    #[default]
    OneSample,
    /// Against a seeded unit-exponential sample of the same size.
    TwoSample { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub d: f64,
    /// Fit score; larger means a smaller departure from the reference.
    pub one_minus_d: f64,
}

/// Kolmogorov-Smirnov distance of a residual sample from the unit
/// exponential.
pub fn ks_statistic(residuals: &[f64], mode: KsMode) -> Result<KsResult, DiagnosticError> {
    if residuals.is_empty() {
        return Err(DiagnosticError::EmptySample);
    }
    let d = match mode {
        KsMode::OneSample => ks_one_sample(residuals, |x| if x <= 0.0 { 0.0 } else { 1.0 - (-x).exp() }),
        KsMode::TwoSample { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference: Vec<f64> = (0..residuals.len()).map(|_| Exp1.sample(&mut rng)).collect();
            ks_two_sample(residuals, &reference)
        }
    };
    Ok(KsResult { d, one_minus_d: 1.0 - d })
}

/// `sup |F_n - F|` for a continuous reference CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    d
}

/// `sup |F_a - F_b|` between two empirical CDFs.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
