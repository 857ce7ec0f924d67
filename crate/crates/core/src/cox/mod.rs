//! Cox proportional-hazards fitting for counting-process spell data.
//!
//! TFD and AG fits share a single baseline hazard; PWP fits stratify the
//! baseline by binned spell number. The partial likelihood is maximized by
//! Newton-Raphson with step-halving, starting from zero.

mod likelihood;
mod risk;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub use likelihood::{PartialLikelihood, PlEvaluation, Ties};
pub use risk::{build_risk_sets, RiskSet, StratumRiskSets};

use likelihood::{sweep, Design};

use crate::spells::{SpellDataset, SpellRecord, Technique};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("covariate `{0}` is not in the dataset schema")]
    UnknownCovariate(String),
    #[error("dataset has no events")]
    NoEvents,
    #[error("covariate matrix is rank deficient; offending column(s): {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("monotone likelihood after {iterations} iteration(s): |beta| diverging for {}", .covariates.join(", "))]
    Separation { covariates: Vec<String>, iterations: usize },
    #[error("information matrix is not positive definite at iteration {0}")]
    Singular(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub ties: Ties,
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the score.
    pub tol: f64,
    /// Columns to fit on; `None` uses the full dataset schema.
    pub covariates: Option<Vec<String>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { ties: Ties::Efron, max_iter: 25, tol: 1e-9, covariates: None }
    }
}

/// Breslow baseline of one stratum as a step function over failure times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumBaseline {
    pub stratum: u32,
    pub times: Vec<i64>,
    pub increments: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl StratumBaseline {
    pub fn increment_at(&self, t: i64) -> f64 {
        self.times.binary_search(&t).map(|k| self.increments[k]).unwrap_or(0.0)
    }

    /// Cumulative baseline hazard at `t` (right-continuous step function).
    pub fn cumulative_at(&self, t: i64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 0.0,
            k => self.cumulative[k - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub technique: Technique,
    pub ties: Ties,
    pub schema: Vec<String>,
    pub beta: Vec<f64>,
    /// Inverse observed information at `beta`.
    pub vcov: Vec<Vec<f64>>,
    pub log_pl: f64,
    /// Log partial likelihood at `beta = 0`.
    pub log_pl_null: f64,
    pub n_events: usize,
    pub n_spells: usize,
    pub n_intervals: usize,
    pub baseline: Vec<StratumBaseline>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

impl CoxFit {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.vcov[k][k].max(0.0).sqrt()).collect()
    }

    /// Wald table with two-sided normal p-values.
    pub fn coefficients(&self) -> Vec<Coefficient> {
        let normal = Normal::standard();
        self.schema
            .iter()
            .zip(self.beta.iter().zip(self.std_errors()))
            .map(|(name, (&beta, se))| {
                let z = beta / se;
                Coefficient { name: name.clone(), beta, se, z, p_value: 2.0 * (1.0 - normal.cdf(z.abs())) }
            })
            .collect()
    }

    /// Positions of the fitted columns inside another schema.
    pub fn column_map(&self, schema: &[String]) -> Result<Vec<usize>, FitError> {
        self.schema
            .iter()
            .map(|name| schema.iter().position(|s| s == name).ok_or_else(|| FitError::UnknownCovariate(name.clone())))
            .collect()
    }

    pub fn linear_predictor(&self, covariates: &[f64], columns: &[usize]) -> f64 {
        self.beta.iter().zip(columns).map(|(b, &c)| b * covariates[c]).sum()
    }

    /// Baseline of `stratum`, falling back to the nearest lower stratum when
    /// the fit never saw it (e.g. a spell number absent from training data).
    pub fn stratum_baseline(&self, stratum: u32) -> Option<&StratumBaseline> {
        self.baseline.iter().rev().find(|b| b.stratum <= stratum).or(self.baseline.first())
    }
}

pub fn aic(fit: &CoxFit) -> f64 {
    -2.0 * fit.log_pl + 2.0 * fit.dim() as f64
}

/// Fits a Cox model to a spell dataset.
///
/// Non-convergence within `max_iter` is not an error: the fit is returned
/// with `converged == false`.
pub fn fit(ds: &SpellDataset, options: &FitOptions) -> Result<CoxFit, FitError> {
    let names = options.covariates.clone().unwrap_or_else(|| ds.schema.clone());
    let pl = PartialLikelihood::new(ds, &names, options.ties)?;
    if pl.n_events() == 0 {
        return Err(FitError::NoEvents);
    }
    let p = pl.dim();
    check_rank(&pl, &names)?;

    let mut beta = vec![0.0; p];
    let mut current = pl.evaluate(&beta);
    let log_pl_null = current.log_pl;
    let mut iterations = 0;
    let mut converged = max_abs(&current.gradient) <= options.tol;
    while !converged && iterations < options.max_iter {
        let delta = newton_direction(&current, p).ok_or(FitError::Singular(iterations))?;
        iterations += 1;
        let mut step = 1.0;
        let slack = 1e-12 * (1.0 + current.log_pl.abs());
        let accepted = loop {
            let candidate: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            let eval = pl.evaluate(&candidate);
            if eval.log_pl.is_finite() && eval.log_pl >= current.log_pl - slack {
                break Some((candidate, eval));
            }
            step *= 0.5;
            if step < 1e-10 {
                break None;
            }
        };
        match accepted {
            Some((b, e)) => {
                beta = b;
                current = e;
            }
            // no ascent possible from here: we are at the numerical optimum
            None => break,
        }
        let diverging: Vec<String> = (0..p)
            .filter(|&k| beta[k].abs() * pl.design.sds[k].max(f64::MIN_POSITIVE) > SEPARATION_LIMIT)
            .map(|k| names[k].clone())
            .collect();
        if !diverging.is_empty() {
            return Err(FitError::Separation { covariates: diverging, iterations });
        }
        converged = max_abs(&current.gradient) <= options.tol;
    }

    let vcov = invert_information(&current.information, p).ok_or(FitError::Singular(iterations))?;
    let baseline = breslow(&pl.design, &beta);
    Ok(CoxFit {
        technique: ds.technique,
        ties: options.ties,
        schema: names,
        beta,
        vcov,
        log_pl: current.log_pl,
        log_pl_null,
        n_events: pl.n_events(),
        n_spells: ds.n_spells(),
        n_intervals: ds.records.len(),
        baseline,
        converged,
        iterations,
        max_abs_score: max_abs(&current.gradient),
    })
}

/// `|beta_k| * sd(x_k)` beyond this means a relative risk of e^10 per
/// standard deviation, which only happens when the likelihood is monotone.
const SEPARATION_LIMIT: f64 = 10.0;
const RANK_TOL: f64 = 1e-10;

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton_direction(eval: &PlEvaluation, p: usize) -> Option<Vec<f64>> {
    if p == 0 {
        return Some(Vec::new());
    }
    let info = DMatrix::from_row_slice(p, p, &eval.information);
    let chol = info.cholesky()?;
    Some(chol.solve(&DVector::from_column_slice(&eval.gradient)).iter().copied().collect())
}

fn invert_information(information: &[f64], p: usize) -> Option<Vec<Vec<f64>>> {
    if p == 0 {
        return Some(Vec::new());
    }
    let inv = DMatrix::from_row_slice(p, p, information).cholesky()?.inverse();
    Some((0..p).map(|i| (0..p).map(|j| 0.5 * (inv[(i, j)] + inv[(j, i)])).collect()).collect())
}

/// Rejects constant columns and columns that are linear combinations of
/// earlier ones, using a pivoted Cholesky of the correlation-scaled
/// information matrix at `beta = 0`.
fn check_rank(pl: &PartialLikelihood, names: &[String]) -> Result<(), FitError> {
    let p = pl.dim();
    let design = &pl.design;
    let mut bad: Vec<usize> = (0..p).filter(|&k| design.sds[k] <= RANK_TOL * (1.0 + design.means[k].abs())).collect();
    let info = pl.evaluate(&vec![0.0; p]).information;
    let live: Vec<usize> = (0..p).filter(|k| !bad.contains(k) && info[k * p + k] > 0.0).collect();
    for k in 0..p {
        if !bad.contains(&k) && !live.contains(&k) {
            bad.push(k);
        }
    }
    let m = live.len();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (i, &ki) in live.iter().enumerate() {
        for (j, &kj) in live.iter().enumerate() {
            a[(i, j)] = info[ki * p + kj] / (info[ki * p + ki] * info[kj * p + kj]).sqrt();
        }
    }
    // pivoted Cholesky, always taking the largest remaining diagonal
    let mut remaining: Vec<usize> = (0..m).collect();
    while !remaining.is_empty() {
        let (pos, &piv) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| a[(*x.1, *x.1)].total_cmp(&a[(*y.1, *y.1)]).then(y.1.cmp(x.1)))
            .unwrap();
        let d = a[(piv, piv)];
        if d < RANK_TOL {
            bad.extend(remaining.iter().map(|&i| live[i]));
            break;
        }
        remaining.remove(pos);
        let root = d.sqrt();
        for &i in &remaining {
            a[(i, piv)] /= root;
        }
        for &i in &remaining {
            for &j in &remaining {
                a[(i, j)] -= a[(i, piv)] * a[(j, piv)];
            }
        }
    }
    if bad.is_empty() {
        return Ok(());
    }
    bad.sort_unstable();
    Err(FitError::RankDeficient(bad.into_iter().map(|k| names[k].clone()).collect()))
}

fn breslow(design: &Design, beta: &[f64]) -> Vec<StratumBaseline> {
    let p = design.p;
    // risk weights are computed on centered covariates; this factor brings
    // the baseline back to x = 0
    let shift: f64 = beta.iter().zip(&design.means).map(|(b, m)| b * m).sum::<f64>().exp();
    design
        .strata
        .iter()
        .filter(|s| !s.failures.is_empty())
        .map(|s| {
            let w: Vec<f64> = (0..s.len())
                .map(|i| s.x[i * p..(i + 1) * p].iter().zip(beta).map(|(x, b)| x * b).sum::<f64>().exp())
                .collect();
            let mut times = Vec::new();
            let mut increments = Vec::new();
            sweep(s, p, &w, false, |t, sums, events| {
                times.push(t);
                increments.push(events.len() as f64 / (sums.s0 * shift));
            });
            times.reverse();
            increments.reverse();
            let cumulative = increments
                .iter()
                .scan(0.0, |acc, h| {
                    *acc += h;
                    Some(*acc)
                })
                .collect();
            StratumBaseline { stratum: s.id, times, increments, cumulative }
        })
        .collect()
}

/// Breslow baseline hazard of `ds` under the coefficients of `fit`.
pub fn baseline_hazard(fit: &CoxFit, ds: &SpellDataset) -> Result<Vec<StratumBaseline>, FitError> {
    let design = Design::new(ds, &fit.schema)?;
    Ok(breslow(&design, &fit.beta))
}

/// Predicted survival over one spell, evaluated at every integer time from
/// the spell's first entry (where it is 1) to its last stop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalCurve {
    pub times: Vec<i64>,
    pub surv: Vec<f64>,
}

impl SurvivalCurve {
    /// Value at `t`; 1 before the spell starts, last value after it ends.
    pub fn at(&self, t: i64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 1.0,
            k => self.surv[k - 1],
        }
    }

    pub fn cumulative_hazard(&self) -> f64 {
        -self.surv.last().copied().unwrap_or(1.0).ln()
    }
}

/// Survival of one spell `S(t | x) = exp(-sum h0(t_k) exp(beta'x(t_k)))`,
/// with `x(t_k)` taken from the interval covering each failure time.
///
/// `spell` must be the records of a single spell from `ds`.
pub fn predict_survival(fit: &CoxFit, ds: &SpellDataset, spell: &[SpellRecord]) -> Result<SurvivalCurve, FitError> {
    let columns = fit.column_map(&ds.schema)?;
    Ok(survival_with_columns(fit, ds.technique, spell, &columns))
}

pub(crate) fn survival_with_columns(
    fit: &CoxFit,
    technique: Technique,
    spell: &[SpellRecord],
    columns: &[usize],
) -> SurvivalCurve {
    let Some(first) = spell.first() else {
        return SurvivalCurve { times: Vec::new(), surv: Vec::new() };
    };
    let baseline = fit.stratum_baseline(first.stratum(technique));
    let mut times = vec![first.entry];
    let mut surv = vec![1.0];
    let mut cumhaz = 0.0;
    for r in spell {
        let risk = fit.linear_predictor(&r.covariates, columns).exp();
        for u in (r.entry + 1)..=r.stop {
            if let Some(b) = baseline {
                cumhaz += b.increment_at(u) * risk;
            }
            times.push(u);
            surv.push((-cumhaz).exp());
        }
    }
    SurvivalCurve { times, surv }
}
