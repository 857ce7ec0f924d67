//! Clustered train/validation splitting and the resolution-rate screen for
//! sampling representativeness.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::panel::{LoanId, LoanState, Panel};
use crate::spells::{ResolutionType, SpellDataset};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("train fraction {0} is outside (0, 1)")]
    Fraction(f64),
    #[error("loan `{0}` has no stratum label")]
    MissingStratum(LoanId),
    #[error("stratum `{0}` has no loans in the panel")]
    EmptyStratum(String),
    #[error("stratum column `{0}` is not in the panel schema")]
    UnknownColumn(String),
}

/// Splits a panel into training and validation panels by loan.
///
/// Within each stratum the loans are shuffled with a seeded generator and
/// the first `round(train_fraction * size)` go to training. Every row of a
/// loan lands on the same side.
pub fn split_sample(
    panel: &Panel,
    train_fraction: f64,
    strata: &HashMap<LoanId, String>,
    seed: u64,
) -> Result<(Panel, Panel), SampleError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SampleError::Fraction(train_fraction));
    }
    let mut groups: BTreeMap<&str, Vec<LoanId>> = BTreeMap::new();
    for id in panel.loan_ids() {
        let label = strata.get(&id).ok_or_else(|| SampleError::MissingStratum(id.clone()))?;
        groups.entry(label.as_str()).or_default().push(id);
    }
    let present: HashSet<&str> = groups.keys().copied().collect();
    let mut labels: Vec<&String> = strata.values().collect();
    labels.sort();
    if let Some(empty) = labels.into_iter().find(|l| !present.contains(l.as_str())) {
        return Err(SampleError::EmptyStratum(empty.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = HashSet::new();
    for loans in groups.values_mut() {
        loans.shuffle(&mut rng);
        let n_train = (train_fraction * loans.len() as f64).round() as usize;
        train.extend(loans[..n_train].iter().cloned());
    }
    Ok((panel.filter_loans(|id| train.contains(id)), panel.filter_loans(|id| !train.contains(id))))
}

/// Stratum labels from each loan's final observed state: `active` for loans
/// still performing, otherwise `defaulted`, `settled` or `written-off`.
pub fn status_strata(panel: &Panel) -> HashMap<LoanId, String> {
    panel
        .loans()
        .map(|rows| {
            let last = &rows[rows.len() - 1];
            let label = match last.state {
                LoanState::Performing => "active",
                LoanState::Default => "defaulted",
                LoanState::Settled => "settled",
                LoanState::WriteOff => "written-off",
            };
            (last.loan_id.clone(), label.to_string())
        })
        .collect()
}

/// Stratum labels from a covariate column, read on each loan's last row.
pub fn column_strata(panel: &Panel, column: &str) -> Result<HashMap<LoanId, String>, SampleError> {
    let idx = panel.covariate_index(column).ok_or_else(|| SampleError::UnknownColumn(column.to_string()))?;
    Ok(panel
        .loans()
        .map(|rows| {
            let last = &rows[rows.len() - 1];
            (last.loan_id.clone(), last.covariates[idx].to_string())
        })
        .collect())
}

/// Per-month share of spells resolving into one resolution type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolutionSeries {
    pub kappa: ResolutionType,
    /// Calendar months with at least one spell stopping, ascending.
    pub times: Vec<i64>,
    pub rates: Vec<f64>,
    pub n_at_risk: Vec<usize>,
}

impl ResolutionSeries {
    /// CSV with columns `t_prime,n,rate`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t_prime", "n", "rate"])?;
        for ((t, n), r) in self.times.iter().zip(&self.n_at_risk).zip(&self.rates) {
            w.write_record([t.to_string(), n.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Resolution rates with spells grouped by the calendar month in which they
/// stop (cohort-end). The month of a spell is the panel period of its last
/// interval, offset by `calendar_origin` when the panel has one.
pub fn resolution_rate(ds: &SpellDataset, kappa: ResolutionType, calendar_origin: Option<i64>) -> ResolutionSeries {
    let mut cohorts: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for spell in ds.spells() {
        let last = &spell[spell.len() - 1];
        let t = last.period + calendar_origin.unwrap_or(0);
        let c = cohorts.entry(t).or_insert((0, 0));
        c.0 += 1;
        if last.resolution == kappa {
            c.1 += 1;
        }
    }
    let mut series = ResolutionSeries { kappa, times: vec![], rates: vec![], n_at_risk: vec![] };
    for (t, (n, k)) in cohorts {
        series.times.push(t);
        series.n_at_risk.push(n);
        series.rates.push(k as f64 / n as f64);
    }
    series
}

#[derive(Debug, Error, PartialEq)]
pub enum DiscrepancyError {
    #[error("series have different resolution types")]
    KappaMismatch,
    #[error("series share no time points")]
    NoOverlap,
}

/// Mean absolute difference of two resolution series over the months where
/// both are defined.
pub fn avg_discrepancy(a: &ResolutionSeries, b: &ResolutionSeries) -> Result<f64, DiscrepancyError> {
    if a.kappa != b.kappa {
        return Err(DiscrepancyError::KappaMismatch);
    }
    let (mut i, mut j) = (0, 0);
    let (mut total, mut n) = (0.0, 0usize);
    while i < a.times.len() && j < b.times.len() {
        match a.times[i].cmp(&b.times[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                total += (a.rates[i] - b.rates[j]).abs();
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if n == 0 {
        return Err(DiscrepancyError::NoOverlap);
    }
    Ok(total / n as f64)
}
