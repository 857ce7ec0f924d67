use serde::Serialize;

use crate::spells::SpellDataset;

/// Intervals at risk at one failure time. Indices refer to `records` of the
/// dataset the sets were built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RiskSet {
    pub failure_time: i64,
    pub at_risk: Vec<usize>,
    pub event_set: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StratumRiskSets {
    pub stratum: u32,
    pub sets: Vec<RiskSet>,
}

/// Enumerates the risk set of every unique failure time, per stratum.
///
/// An interval is at risk at `t` when `entry < t <= stop`; it is in the
/// event set when additionally `stop == t` and it carries the event. Strata
/// with no events are omitted.
pub fn build_risk_sets(ds: &SpellDataset) -> Vec<StratumRiskSets> {
    let mut strata: Vec<u32> = ds.records.iter().map(|r| ds.stratum(r)).collect();
    strata.sort_unstable();
    strata.dedup();
    let mut out = Vec::new();
    for stratum in strata {
        let members: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.stratum(&ds.records[i]) == stratum).collect();
        let mut times: Vec<i64> =
            members.iter().filter(|&&i| ds.records[i].status).map(|&i| ds.records[i].stop).collect();
        times.sort_unstable();
        times.dedup();
        if times.is_empty() {
            continue;
        }
        let sets = times
            .into_iter()
            .map(|t| {
                let at_risk: Vec<usize> =
                    members.iter().copied().filter(|&i| ds.records[i].entry < t && t <= ds.records[i].stop).collect();
                let event_set =
                    at_risk.iter().copied().filter(|&i| ds.records[i].stop == t && ds.records[i].status).collect();
                RiskSet { failure_time: t, at_risk, event_set }
            })
            .collect();
        out.push(StratumRiskSets { stratum, sets });
    }
    out
}
