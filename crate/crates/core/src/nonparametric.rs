//! Kaplan-Meier estimation and term-structures of default probability.
//!
//! The actual term-structure is `f_A(t) = S(t-1) h(t)` from the product-limit
//! estimator. The predicted one averages, over the spells observed at `t`,
//! the per-spell mass `S(t-1|x) - S(t|x)` of a fitted Cox model.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{survival_with_columns, CoxFit, FitError};
use crate::spells::SpellDataset;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KaplanMeier {
    /// Unique failure times, ascending.
    pub times: Vec<i64>,
    pub n_at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub surv: Vec<f64>,
    /// Discrete hazard `d_t / n_t`.
    pub hazard: Vec<f64>,
}

impl KaplanMeier {
    /// Right-continuous survival estimate; 1 before the first failure.
    pub fn surv_at(&self, t: i64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 1.0,
            k => self.surv[k - 1],
        }
    }

    pub fn hazard_at(&self, t: i64) -> f64 {
        self.times.binary_search(&t).map(|k| self.hazard[k]).unwrap_or(0.0)
    }
}

/// Number of intervals with `entry < u <= stop` for every integer `u` in
/// `[lo, hi]`.
struct AtRiskCounts {
    lo: i64,
    counts: Vec<usize>,
}

impl AtRiskCounts {
    fn new(ds: &SpellDataset) -> Self {
        let lo = ds.records.iter().map(|r| r.entry + 1).min().unwrap_or(1);
        let hi = ds.records.iter().map(|r| r.stop).max().unwrap_or(0);
        let width = (hi - lo + 2).max(1) as usize;
        let mut diff = vec![0i64; width + 1];
        for r in &ds.records {
            diff[(r.entry + 1 - lo) as usize] += 1;
            diff[(r.stop + 1 - lo) as usize] -= 1;
        }
        let mut acc = 0i64;
        let counts = diff
            .iter()
            .map(|d| {
                acc += d;
                acc as usize
            })
            .collect();
        AtRiskCounts { lo, counts }
    }

    fn at(&self, u: i64) -> usize {
        if u < self.lo {
            return 0;
        }
        self.counts.get((u - self.lo) as usize).copied().unwrap_or(0)
    }
}

/// Product-limit estimator on the dataset's own clock. Left truncation is
/// respected through the `entry < u` condition of the risk set.
pub fn kaplan_meier(ds: &SpellDataset) -> KaplanMeier {
    let at_risk = AtRiskCounts::new(ds);
    let mut failures: Vec<i64> = ds.records.iter().filter(|r| r.status).map(|r| r.stop).collect();
    failures.sort_unstable();
    let mut km = KaplanMeier { times: vec![], n_at_risk: vec![], events: vec![], surv: vec![], hazard: vec![] };
    let mut s = 1.0;
    for chunk in failures.chunk_by(|a, b| a == b) {
        let t = chunk[0];
        let n = at_risk.at(t);
        let h = chunk.len() as f64 / n as f64;
        s *= 1.0 - h;
        km.times.push(t);
        km.n_at_risk.push(n);
        km.events.push(chunk.len());
        km.surv.push(s);
        km.hazard.push(h);
    }
    km
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    Actual,
    Predicted,
}

/// Event probabilities on the integer grid `1..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermStructure {
    pub kind: TermKind,
    pub times: Vec<i64>,
    pub probs: Vec<f64>,
    /// At-risk count (actual) or number of spells averaged (predicted).
    pub n_at_risk: Vec<usize>,
}

impl TermStructure {
    /// Probability at `t`, zero where the structure has no entry.
    pub fn value_at(&self, t: i64) -> f64 {
        self.times.binary_search(&t).map(|k| self.probs[k]).unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// CSV with columns `t,f,n_at_risk`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "f", "n_at_risk"])?;
        for ((t, f), n) in self.times.iter().zip(&self.probs).zip(&self.n_at_risk) {
            w.write_record([t.to_string(), f.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes the overlay file `t,f_actual,f_predicted,abs_gap` over the times
/// of `actual`.
pub fn write_overlay<W: Write>(actual: &TermStructure, predicted: &TermStructure, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "f_actual", "f_predicted", "abs_gap"])?;
    for &t in &actual.times {
        let (a, p) = (actual.value_at(t), predicted.value_at(t));
        w.write_record([t.to_string(), a.to_string(), p.to_string(), (a - p).abs().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn actual_term_structure(ds: &SpellDataset, horizon: i64) -> TermStructure {
    let km = kaplan_meier(ds);
    let at_risk = AtRiskCounts::new(ds);
    let times: Vec<i64> = (1..=horizon.max(0)).collect();
    let probs = times.iter().map(|&t| km.surv_at(t - 1) * km.hazard_at(t)).collect();
    let n_at_risk = times.iter().map(|&t| at_risk.at(t)).collect();
    TermStructure { kind: TermKind::Actual, times, probs, n_at_risk }
}

/// Which spells enter the portfolio average at time `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioAveraging {
    /// Only spells whose observed span covers `t`.
    #[default]
    CoveringSpells,
    /// Every spell; those not observed at `t` contribute zero.
    AllSpells,
}

pub fn predicted_term_structure(
    fit: &CoxFit,
    ds: &SpellDataset,
    horizon: i64,
    averaging: PortfolioAveraging,
) -> Result<TermStructure, FitError> {
    let columns = fit.column_map(&ds.schema)?;
    let spells: Vec<_> = ds.spells().collect();
    let per_spell: Vec<Vec<(i64, f64)>> = spells
        .par_iter()
        .map(|spell| {
            let curve = survival_with_columns(fit, ds.technique, spell, &columns);
            let first = curve.times.first().copied().unwrap_or(0);
            let last = curve.times.last().copied().unwrap_or(0);
            ((first + 1).max(1)..=last.min(horizon)).map(|t| (t, curve.at(t - 1) - curve.at(t))).collect()
        })
        .collect();

    let len = horizon.max(0) as usize;
    let mut sums = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for contributions in &per_spell {
        for &(t, f) in contributions {
            sums[(t - 1) as usize] += f;
            counts[(t - 1) as usize] += 1;
        }
    }
    let n_all = spells.len();
    let probs = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| {
            let n = match averaging {
                PortfolioAveraging::CoveringSpells => c,
                PortfolioAveraging::AllSpells => n_all,
            };
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        })
        .collect();
    Ok(TermStructure { kind: TermKind::Predicted, times: (1..=horizon.max(0)).collect(), probs, n_at_risk: counts })
}

#[derive(Debug, Error, PartialEq)]
#[error("MAE window is empty: horizon {horizon} must exceed start {start}")]
pub struct EmptyWindow {
    pub start: i64,
    pub horizon: i64,
}

/// Mean absolute gap between two structures over `start..=horizon`, divided
/// by `horizon - start` as in the usual statement of the measure (the sum
/// itself has `horizon - start + 1` terms).
pub fn term_structure_mae(a: &TermStructure, b: &TermStructure, start: i64, horizon: i64) -> Result<f64, EmptyWindow> {
    if horizon <= start {
        return Err(EmptyWindow { start, horizon });
    }
    let total: f64 = (start..=horizon).map(|t| (a.value_at(t) - b.value_at(t)).abs()).sum();
    Ok(total / (horizon - start) as f64)
}
