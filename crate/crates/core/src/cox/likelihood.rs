use serde::{Deserialize, Serialize};

use super::FitError;
use crate::spells::SpellDataset;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

impl std::str::FromStr for Ties {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "efron" => Ok(Ties::Efron),
            "breslow" => Ok(Ties::Breslow),
            other => Err(format!("unknown ties method `{other}`; expected efron or breslow")),
        }
    }
}

/// Intervals of one stratum with sweep orderings precomputed.
#[derive(Debug, Clone)]
pub(crate) struct Stratum {
    pub id: u32,
    pub entry: Vec<i64>,
    pub stop: Vec<i64>,
    pub status: Vec<bool>,
    /// Centered covariates, row-major `n x p`.
    pub x: Vec<f64>,
    /// Index into the source dataset's records.
    pub source: Vec<usize>,
    by_stop_desc: Vec<usize>,
    by_entry_desc: Vec<usize>,
    /// Unique failure times, descending, with the failing intervals.
    pub failures: Vec<(i64, Vec<usize>)>,
}

impl Stratum {
    pub fn len(&self) -> usize {
        self.entry.len()
    }
}

/// Covariate design split by stratum, shared by the likelihood, the
/// baseline estimator and the rank check.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub p: usize,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub strata: Vec<Stratum>,
}

impl Design {
    pub fn new(ds: &SpellDataset, covariates: &[String]) -> Result<Self, FitError> {
        let cols: Vec<usize> = covariates
            .iter()
            .map(|name| ds.covariate_index(name).ok_or_else(|| FitError::UnknownCovariate(name.clone())))
            .collect::<Result<_, _>>()?;
        let p = cols.len();
        let n = ds.records.len();
        let mut means = vec![0.0; p];
        for r in &ds.records {
            for (m, &c) in means.iter_mut().zip(&cols) {
                *m += r.covariates[c];
            }
        }
        if n > 0 {
            means.iter_mut().for_each(|m| *m /= n as f64);
        }
        let mut sds = vec![0.0; p];
        for r in &ds.records {
            for k in 0..p {
                let d = r.covariates[cols[k]] - means[k];
                sds[k] += d * d;
            }
        }
        if n > 1 {
            sds.iter_mut().for_each(|s| *s = (*s / (n - 1) as f64).sqrt());
        }

        let mut ids: Vec<u32> = ds.records.iter().map(|r| ds.stratum(r)).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut strata: Vec<Stratum> = ids
            .iter()
            .map(|&id| Stratum {
                id,
                entry: Vec::new(),
                stop: Vec::new(),
                status: Vec::new(),
                x: Vec::new(),
                source: Vec::new(),
                by_stop_desc: Vec::new(),
                by_entry_desc: Vec::new(),
                failures: Vec::new(),
            })
            .collect();
        for (i, r) in ds.records.iter().enumerate() {
            let s = &mut strata[ids.binary_search(&ds.stratum(r)).unwrap()];
            s.entry.push(r.entry);
            s.stop.push(r.stop);
            s.status.push(r.status);
            s.source.push(i);
            for k in 0..p {
                s.x.push(r.covariates[cols[k]] - means[k]);
            }
        }
        for s in &mut strata {
            let n = s.len();
            // ties broken by index so the reduction order is fixed
            s.by_stop_desc = (0..n).collect();
            s.by_stop_desc.sort_by(|&a, &b| s.stop[b].cmp(&s.stop[a]).then(a.cmp(&b)));
            s.by_entry_desc = (0..n).collect();
            s.by_entry_desc.sort_by(|&a, &b| s.entry[b].cmp(&s.entry[a]).then(a.cmp(&b)));
            for &i in &s.by_stop_desc {
                if !s.status[i] {
                    continue;
                }
                match s.failures.last_mut() {
                    Some((t, idx)) if *t == s.stop[i] => idx.push(i),
                    _ => s.failures.push((s.stop[i], vec![i])),
                }
            }
        }
        Ok(Design { p, means, sds, strata })
    }

    pub fn n_events(&self) -> usize {
        self.strata.iter().flat_map(|s| &s.failures).map(|(_, e)| e.len()).sum()
    }
}

/// Running risk-set sums for a sweep over descending failure times.
pub(crate) struct RiskSums {
    pub count: usize,
    pub s0: f64,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

/// Visits every failure time of a stratum in descending order with the sums
/// of `w`, `w x` and (if `second`) `w x x'` over the intervals at risk,
/// i.e. those with `entry < t <= stop`.
pub(crate) fn sweep<F>(s: &Stratum, p: usize, w: &[f64], second: bool, mut visit: F)
where
    F: FnMut(i64, &RiskSums, &[usize]),
{
    let mut sums = RiskSums { count: 0, s0: 0.0, s1: vec![0.0; p], s2: vec![0.0; if second { p * p } else { 0 }] };
    let n = s.len();
    let (mut ia, mut ir) = (0, 0);
    for (t, events) in &s.failures {
        while ia < n && s.stop[s.by_stop_desc[ia]] >= *t {
            accumulate(&mut sums, s, p, w, s.by_stop_desc[ia], 1.0, second);
            ia += 1;
        }
        while ir < n && s.entry[s.by_entry_desc[ir]] >= *t {
            accumulate(&mut sums, s, p, w, s.by_entry_desc[ir], -1.0, second);
            ir += 1;
        }
        if sums.count == 0 {
            sums.s0 = 0.0;
            sums.s1.iter_mut().for_each(|v| *v = 0.0);
            sums.s2.iter_mut().for_each(|v| *v = 0.0);
        }
        visit(*t, &sums, events);
    }
}

fn accumulate(sums: &mut RiskSums, s: &Stratum, p: usize, w: &[f64], i: usize, sign: f64, second: bool) {
    if sign > 0.0 {
        sums.count += 1;
    } else {
        sums.count -= 1;
    }
    let wi = sign * w[i];
    sums.s0 += wi;
    let xi = &s.x[i * p..(i + 1) * p];
    for a in 0..p {
        sums.s1[a] += wi * xi[a];
    }
    if second {
        for a in 0..p {
            for b in 0..p {
                sums.s2[a * p + b] += wi * xi[a] * xi[b];
            }
        }
    }
}

/// Log partial likelihood with its gradient and observed information
/// (negative Hessian, row-major `p x p`).
#[derive(Debug, Clone, PartialEq)]
pub struct PlEvaluation {
    pub log_pl: f64,
    pub gradient: Vec<f64>,
    pub information: Vec<f64>,
}

/// The stratified log partial likelihood of a spell dataset.
#[derive(Debug, Clone)]
pub struct PartialLikelihood {
    pub(crate) design: Design,
    pub ties: Ties,
}

impl PartialLikelihood {
    pub fn new(ds: &SpellDataset, covariates: &[String], ties: Ties) -> Result<Self, FitError> {
        Ok(PartialLikelihood { design: Design::new(ds, covariates)?, ties })
    }

    pub fn dim(&self) -> usize {
        self.design.p
    }

    pub fn n_events(&self) -> usize {
        self.design.n_events()
    }

    pub fn log_pl(&self, beta: &[f64]) -> f64 {
        self.evaluate_inner(beta, false).log_pl
    }

    pub fn evaluate(&self, beta: &[f64]) -> PlEvaluation {
        self.evaluate_inner(beta, true)
    }

    fn evaluate_inner(&self, beta: &[f64], derivatives: bool) -> PlEvaluation {
        let p = self.design.p;
        assert_eq!(beta.len(), p, "beta has wrong length");
        let mut log_pl = 0.0;
        let mut gradient = vec![0.0; p];
        let mut information = vec![0.0; p * p];
        let mut mean = vec![0.0; p];
        let mut a1 = vec![0.0; p];
        let mut a2 = vec![0.0; p * p];
        for s in &self.design.strata {
            let eta: Vec<f64> =
                (0..s.len()).map(|i| s.x[i * p..(i + 1) * p].iter().zip(beta).map(|(x, b)| x * b).sum()).collect();
            let w: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
            sweep(s, p, &w, derivatives, |_, sums, events| {
                let d = events.len() as f64;
                let mut a0 = 0.0;
                a1.iter_mut().for_each(|v| *v = 0.0);
                a2.iter_mut().for_each(|v| *v = 0.0);
                for &i in events {
                    log_pl += eta[i];
                    a0 += w[i];
                    let xi = &s.x[i * p..(i + 1) * p];
                    for a in 0..p {
                        gradient[a] += xi[a];
                        a1[a] += w[i] * xi[a];
                        if derivatives {
                            for b in 0..p {
                                a2[a * p + b] += w[i] * xi[a] * xi[b];
                            }
                        }
                    }
                }
                for l in 0..events.len() {
                    let f = match self.ties {
                        Ties::Efron => l as f64 / d,
                        Ties::Breslow => 0.0,
                    };
                    let denom = sums.s0 - f * a0;
                    log_pl -= denom.ln();
                    for a in 0..p {
                        mean[a] = (sums.s1[a] - f * a1[a]) / denom;
                        gradient[a] -= mean[a];
                    }
                    if derivatives {
                        for a in 0..p {
                            for b in 0..p {
                                information[a * p + b] +=
                                    (sums.s2[a * p + b] - f * a2[a * p + b]) / denom - mean[a] * mean[b];
                            }
                        }
                    }
                }
            });
        }
        PlEvaluation { log_pl, gradient, information }
    }
}
