//! Time-dependent ROC curves under the cumulative-case / dynamic-control
//! definition, estimated with the nearest-neighbour (Akritas) bivariate
//! survivor estimator.
//!
//! The classical estimator treats every marker as an independent subject.
//! The clustered variant accepts several markers per spell and averages
//! within each spell before averaging across spells, both for the
//! bivariate survivor function and for the marker distribution.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::DiagnosticError;
use crate::cox::CoxFit;
use crate::spells::SpellDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdGrid {
    /// Distinct empirical marker quantiles at multiples of `step`.
    Quantiles { step: f64 },
    /// Every distinct marker value.
    AllUnique,
}

/// Divisor of the within-spell averages of the clustered estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeighting {
    /// The number of the spell's markers that qualify at the threshold
    /// (above it for the survivor term, at or below it for the marker CDF).
    #[default]
    Qualifying,
    /// The spell's total number of markers, so that both averages share one
    /// denominator and `1 - F(p) - S(p, t)` stays nonnegative.
    SpellLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrocConfig {
    /// Half the neighbourhood mass: two markers are neighbours when their
    /// empirical CDF values differ by less than `lambda`.
    pub lambda: f64,
    pub horizons: Vec<i64>,
    pub grid: ThresholdGrid,
    /// Only used by the clustered estimator.
    pub cluster_weighting: ClusterWeighting,
}

impl Default for TrocConfig {
    fn default() -> Self {
        TrocConfig {
            lambda: 0.05,
            horizons: vec![3, 12, 24, 36],
            grid: ThresholdGrid::Quantiles { step: 0.01 },
            cluster_weighting: ClusterWeighting::Qualifying,
        }
    }
}

impl TrocConfig {
    fn check(&self) -> Result<(), DiagnosticError> {
        if !(self.lambda > 0.0 && self.lambda < 0.5) {
            return Err(DiagnosticError::Lambda(self.lambda));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrocVariant {
    Classical,
    Clustered,
}

impl std::str::FromStr for TrocVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classical" => Ok(TrocVariant::Classical),
            "clustered" => Ok(TrocVariant::Clustered),
            other => Err(format!("unknown tROC variant `{other}`; expected classical or clustered")),
        }
    }
}

/// One subject: marker, observed time and event flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerObs {
    pub marker: f64,
    pub time: i64,
    pub event: bool,
}

/// One marker of a spell observed over several periods. `spell` groups
/// markers; `time` and `event` describe the spell and repeat on each row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteredMarker {
    pub spell: usize,
    pub marker: f64,
    pub time: i64,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrocCurve {
    pub horizon: i64,
    pub variant: TrocVariant,
    /// Thresholds from `+inf` down to `-inf`.
    pub thresholds: Vec<f64>,
    /// Estimated `(F+, T+)` per threshold.
    pub raw: Vec<(f64, f64)>,
    /// `raw` clamped to `[0, 1]` and made monotone by running maxima.
    pub points: Vec<(f64, f64)>,
    pub tauc: f64,
}

impl TrocCurve {
    /// CSV with columns `p_c,fpr,tpr,fpr_raw,tpr_raw`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["p_c", "fpr", "tpr", "fpr_raw", "tpr_raw"])?;
        for ((p, (f, t)), (fr, tr)) in self.thresholds.iter().zip(&self.points).zip(&self.raw) {
            w.write_record([p.to_string(), f.to_string(), t.to_string(), fr.to_string(), tr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trapezoidal area under a polyline of `(F+, T+)` points.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn tauc(curve: &TrocCurve) -> f64 {
    trapezoid_auc(&curve.points)
}

fn monotone_cleanup(raw: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (mut f, mut t) = (0.0f64, 0.0f64);
    raw.iter()
        .map(|&(fr, tr)| {
            f = f.max(fr.clamp(0.0, 1.0));
            t = t.max(tr.clamp(0.0, 1.0));
            (f, t)
        })
        .collect()
}

fn threshold_grid(markers: &[f64], grid: ThresholdGrid) -> Vec<f64> {
    let mut sorted = markers.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut inner: Vec<f64> = match grid {
        ThresholdGrid::AllUnique => sorted.clone(),
        ThresholdGrid::Quantiles { step } => {
            let n = sorted.len();
            let k_max = (1.0 / step).round() as usize;
            (0..=k_max)
                .map(|k| {
                    let q = (k as f64 * step).min(1.0);
                    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
                    sorted[idx]
                })
                .collect()
        }
    };
    inner.dedup();
    let mut out = Vec::with_capacity(inner.len() + 2);
    out.push(f64::INFINITY);
    out.extend(inner.into_iter().rev());
    out.push(f64::NEG_INFINITY);
    out
}

/// Nearest-neighbour conditional survival `S(t | M = m_s)` for every
/// observation, from a product-limit estimator over the observations whose
/// empirical-CDF values lie within `lambda` of `m_s`'s.
fn conditional_survival(markers: &[f64], times: &[i64], events: &[bool], lambda: f64, horizon: i64) -> Vec<f64> {
    let n = markers.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| markers[a].total_cmp(&markers[b]));
    // rank[k] = n * F(marker of order[k]), the count of markers <= it
    let mut rank = vec![0usize; n];
    let mut k = 0;
    while k < n {
        let mut end = k;
        while end + 1 < n && markers[order[end + 1]] == markers[order[k]] {
            end += 1;
        }
        for r in &mut rank[k..=end] {
            *r = end + 1;
        }
        k = end + 1;
    }
    let mut time_axis: Vec<i64> = times.to_vec();
    time_axis.sort_unstable();
    time_axis.dedup();
    let tix: Vec<usize> = times.iter().map(|t| time_axis.binary_search(t).unwrap()).collect();
    let n_times = time_axis.len();
    let mut count = vec![0i64; n_times];
    let mut deaths = vec![0i64; n_times];

    let width = lambda * n as f64;
    let within = |a: usize, b: usize| (a as f64 - b as f64).abs() < width;
    let mut out = vec![1.0; n];
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut k = 0;
    while k < n {
        let r = rank[k];
        while hi < n && within(rank[hi], r) {
            count[tix[order[hi]]] += 1;
            deaths[tix[order[hi]]] += i64::from(events[order[hi]]);
            hi += 1;
        }
        while lo < hi && !within(rank[lo], r) {
            count[tix[order[lo]]] -= 1;
            deaths[tix[order[lo]]] -= i64::from(events[order[lo]]);
            lo += 1;
        }
        let mut at_risk: i64 = count.iter().sum();
        let mut s = 1.0;
        for q in 0..n_times {
            if time_axis[q] > horizon {
                break;
            }
            if deaths[q] > 0 && at_risk > 0 {
                s *= 1.0 - deaths[q] as f64 / at_risk as f64;
            }
            at_risk -= count[q];
        }
        while k < n && rank[k] == r {
            out[order[k]] = s;
            k += 1;
        }
    }
    out
}

fn assemble(
    horizon: i64,
    variant: TrocVariant,
    thresholds: Vec<f64>,
    marker_cdf: impl Fn(f64) -> f64,
    joint_survival: impl Fn(f64) -> f64,
) -> Result<TrocCurve, DiagnosticError> {
    let s_t = joint_survival(f64::NEG_INFINITY);
    if 1.0 - s_t <= 1e-15 {
        return Err(DiagnosticError::NoEventsByHorizon(horizon));
    }
    if s_t <= 1e-15 {
        return Err(DiagnosticError::NoSurvivorsAtHorizon(horizon));
    }
    let raw: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&p| {
            let s_pt = joint_survival(p);
            let tpr = ((1.0 - marker_cdf(p)) - s_pt) / (1.0 - s_t);
            let fpr = s_pt / s_t;
            (fpr, tpr)
        })
        .collect();
    let points = monotone_cleanup(&raw);
    let tauc = trapezoid_auc(&points);
    Ok(TrocCurve { horizon, variant, thresholds, raw, points, tauc })
}

fn check_markers<'a>(markers: impl Iterator<Item = &'a f64>) -> Result<(), DiagnosticError> {
    let mut any = false;
    for m in markers {
        any = true;
        if !m.is_finite() {
            return Err(DiagnosticError::NonFiniteMarker);
        }
    }
    if !any {
        return Err(DiagnosticError::EmptySample);
    }
    Ok(())
}

/// Classical NN-estimated tROC curve at one horizon.
pub fn troc_classical(obs: &[MarkerObs], config: &TrocConfig, horizon: i64) -> Result<TrocCurve, DiagnosticError> {
    config.check()?;
    check_markers(obs.iter().map(|o| &o.marker))?;
    let markers: Vec<f64> = obs.iter().map(|o| o.marker).collect();
    let times: Vec<i64> = obs.iter().map(|o| o.time).collect();
    let events: Vec<bool> = obs.iter().map(|o| o.event).collect();
    let cond = conditional_survival(&markers, &times, &events, config.lambda, horizon);
    let n = obs.len() as f64;

    // descending markers with suffix sums of conditional survival
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| markers[b].total_cmp(&markers[a]));
    let desc: Vec<f64> = order.iter().map(|&i| markers[i]).collect();
    let mut cum = Vec::with_capacity(order.len() + 1);
    cum.push(0.0);
    for &i in &order {
        cum.push(cum[cum.len() - 1] + cond[i]);
    }
    let above = |p: f64| desc.partition_point(|&m| m > p);

    let thresholds = threshold_grid(&markers, config.grid);
    assemble(horizon, TrocVariant::Classical, thresholds, |p| 1.0 - above(p) as f64 / n, |p| cum[above(p)] / n)
}

/// Clustered tROC curve: within-spell means of the conditional survival and
/// of the marker indicator, averaged over spells. A spell with no qualifying
/// marker at a threshold contributes zero and still counts in the number of
/// spells. Neighbourhoods use the marker-level empirical CDF.
pub fn troc_clustered(
    obs: &[ClusteredMarker],
    config: &TrocConfig,
    horizon: i64,
) -> Result<TrocCurve, DiagnosticError> {
    config.check()?;
    check_markers(obs.iter().map(|o| &o.marker))?;
    let markers: Vec<f64> = obs.iter().map(|o| o.marker).collect();
    let times: Vec<i64> = obs.iter().map(|o| o.time).collect();
    let events: Vec<bool> = obs.iter().map(|o| o.event).collect();
    let cond = conditional_survival(&markers, &times, &events, config.lambda, horizon);

    let mut spell_ids: Vec<usize> = obs.iter().map(|o| o.spell).collect();
    spell_ids.sort_unstable();
    spell_ids.dedup();
    // per spell: markers ascending with suffix sums of conditional survival
    let mut groups: Vec<Vec<(f64, f64)>> = vec![Vec::new(); spell_ids.len()];
    for (i, o) in obs.iter().enumerate() {
        groups[spell_ids.binary_search(&o.spell).unwrap()].push((o.marker, cond[i]));
    }
    let spells: Vec<(Vec<f64>, Vec<f64>)> = groups
        .into_iter()
        .map(|mut g| {
            g.sort_by(|a, b| a.0.total_cmp(&b.0));
            let ms: Vec<f64> = g.iter().map(|x| x.0).collect();
            let mut suffix = vec![0.0; g.len() + 1];
            for k in (0..g.len()).rev() {
                suffix[k] = suffix[k + 1] + g[k].1;
            }
            (ms, suffix)
        })
        .collect();
    let n = spells.len() as f64;

    let weighting = config.cluster_weighting;
    let marker_cdf = |p: f64| {
        let total: f64 = spells
            .iter()
            .map(|(ms, _)| {
                let at_or_below = ms.partition_point(|&m| m <= p);
                match (weighting, at_or_below) {
                    (_, 0) => 0.0,
                    // a mean of ones over the qualifying markers
                    (ClusterWeighting::Qualifying, _) => 1.0,
                    (ClusterWeighting::SpellLength, k) => k as f64 / ms.len() as f64,
                }
            })
            .sum();
        total / n
    };
    let joint = |p: f64| {
        let total: f64 = spells
            .iter()
            .map(|(ms, suffix)| {
                let first_above = ms.partition_point(|&m| m <= p);
                let eta = match weighting {
                    ClusterWeighting::Qualifying => ms.len() - first_above,
                    ClusterWeighting::SpellLength => ms.len(),
                };
                if first_above == ms.len() {
                    0.0
                } else {
                    suffix[first_above] / eta as f64
                }
            })
            .sum();
        total / n
    };
    let thresholds = threshold_grid(&markers, config.grid);
    assemble(horizon, TrocVariant::Clustered, thresholds, marker_cdf, joint)
}

/// One marker per spell: the linear predictor on its final interval, with
/// the spell age as time.
pub fn spell_markers(fit: &CoxFit, ds: &SpellDataset) -> Result<Vec<MarkerObs>, DiagnosticError> {
    let columns = fit.column_map(&ds.schema)?;
    Ok(ds
        .spells()
        .map(|spell| {
            let last = &spell[spell.len() - 1];
            MarkerObs {
                marker: fit.linear_predictor(&last.covariates, &columns),
                time: last.spell_age,
                event: last.status,
            }
        })
        .collect())
}

/// One marker per spell period, grouped by spell.
pub fn period_markers(fit: &CoxFit, ds: &SpellDataset) -> Result<Vec<ClusteredMarker>, DiagnosticError> {
    let columns = fit.column_map(&ds.schema)?;
    Ok(ds
        .spells()
        .enumerate()
        .flat_map(|(k, spell)| {
            let last = &spell[spell.len() - 1];
            let columns = &columns;
            spell.iter().map(move |r| ClusteredMarker {
                spell: k,
                marker: fit.linear_predictor(&r.covariates, columns),
                time: last.spell_age,
                event: last.status,
            })
        })
        .collect())
}
