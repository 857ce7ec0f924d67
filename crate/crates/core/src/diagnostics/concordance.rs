use std::collections::{BTreeMap, BTreeSet};

use super::DiagnosticError;
use crate::cox::CoxFit;
use crate::spells::SpellDataset;

/// Harrell's concordance of a fitted model on a spell dataset.
///
/// For each spell failing at `t`, the comparable partners are the spells of
/// the same stratum that are still at risk after `t`: they have an interval
/// covering `t` and either stop later or are censored at `t`. Scores are the
/// linear predictors at `t`, so time-varying covariates are compared as of
/// the failure time. Equal scores count one half.
pub fn harrell_c(fit: &CoxFit, ds: &SpellDataset) -> Result<f64, DiagnosticError> {
    let columns = fit.column_map(&ds.schema)?;
    // per stratum and time: (score, spell failing at t, spell still at risk after t)
    let mut by_time: BTreeMap<(u32, i64), Vec<(f64, bool, bool)>> = BTreeMap::new();
    let mut failure_times: BTreeSet<(u32, i64)> = BTreeSet::new();
    for spell in ds.spells() {
        let last = &spell[spell.len() - 1];
        if last.status {
            failure_times.insert((ds.stratum(last), last.stop));
        }
    }
    for spell in ds.spells() {
        let last = &spell[spell.len() - 1];
        let stratum = ds.stratum(last);
        for r in spell {
            let lp = fit.linear_predictor(&r.covariates, &columns);
            let lo = (stratum, r.entry + 1);
            let hi = (stratum, r.stop);
            for &(_, t) in failure_times.range(lo..=hi) {
                let fails = last.status && last.stop == t;
                let survives = last.stop > t || (last.stop == t && !last.status);
                by_time.entry((stratum, t)).or_default().push((lp, fails, survives));
            }
        }
    }

    let (mut concordant, mut tied, mut comparable) = (0.0, 0.0, 0.0);
    for entries in by_time.values() {
        let mut controls: Vec<f64> = entries.iter().filter(|e| e.2).map(|e| e.0).collect();
        controls.sort_by(f64::total_cmp);
        for &(score, fails, _) in entries {
            if !fails {
                continue;
            }
            let below = controls.partition_point(|&c| c < score);
            let not_above = controls.partition_point(|&c| c <= score);
            concordant += below as f64;
            tied += (not_above - below) as f64;
            comparable += controls.len() as f64;
        }
    }
    if comparable == 0.0 {
        return Err(DiagnosticError::NoComparablePairs);
    }
    Ok((concordant + 0.5 * tied) / comparable)
}
