mod common;

use common::{toy_dataset, two_covariate_spec};
use proptest::prelude::*;
use spellhaz::cox::baseline_hazard;
use spellhaz::diagnostics::{
    cox_snell_residuals, harrell_c, ks_one_sample, ks_statistic, ks_two_sample, spell_markers, trapezoid_auc,
    troc_classical, troc_clustered, CensoredAdjustment, ClusterWeighting, ClusteredMarker, KsMode, MarkerObs,
    ThresholdGrid, TrocConfig,
};
use spellhaz::synth::generate;
use spellhaz::{build_spells, fit, FitOptions, Technique};

fn twenty() -> Vec<(i64, i64, bool, Vec<f64>)> {
    (0..20)
        .map(|i| {
            let x = ((i * 7) % 11) as f64 / 5.0 - 1.0;
            let entry = i64::from(i % 4 == 3);
            (entry, 2 + (i * 5) % 9, i % 3 != 0, vec![x])
        })
        .collect()
}

#[test]
fn concordance_matches_pair_enumeration() {
    let rows = twenty();
    let ds = toy_dataset(Technique::Tfd, &rows);
    let model = fit(&ds, &FitOptions::default()).unwrap();
    let lp: Vec<f64> = rows.iter().map(|r| model.beta[0] * r.3[0]).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, a) in rows.iter().enumerate() {
        if !a.2 {
            continue;
        }
        let t = a.1;
        for (j, b) in rows.iter().enumerate() {
            let at_risk_after = b.0 < t && (b.1 > t || (b.1 == t && !b.2));
            if i == j || !at_risk_after {
                continue;
            }
            den += 1.0;
            if lp[i] > lp[j] {
                num += 1.0;
            } else if lp[i] == lp[j] {
                num += 0.5;
            }
        }
    }
    assert_eq!(harrell_c(&model, &ds).unwrap(), num / den);
}

fn obs_from(rows: &[(f64, i64, bool)]) -> Vec<MarkerObs> {
    rows.iter().map(|&(marker, time, event)| MarkerObs { marker, time, event }).collect()
}

#[test]
fn constant_marker_gives_the_diagonal() {
    let obs = obs_from(&[(1.0, 2, true), (1.0, 5, false), (1.0, 3, true), (1.0, 9, true)]);
    let cfg = TrocConfig { lambda: 0.3, ..Default::default() };
    let curve = troc_classical(&obs, &cfg, 4).unwrap();
    assert_eq!(curve.tauc, 0.5);
    assert_eq!(trapezoid_auc(&[(0.0, 0.0), (1.0, 1.0)]), 0.5);
}

fn fitted_markers() -> Vec<MarkerObs> {
    let panel = generate(&two_covariate_spec(600, 8)).unwrap();
    let ds = build_spells(&panel, Technique::Pwp).unwrap();
    let model = fit(&ds, &FitOptions::default()).unwrap();
    spell_markers(&model, &ds).unwrap()
}

#[test]
fn clustered_reduces_to_classical_for_single_markers() {
    let obs = fitted_markers();
    let clustered: Vec<ClusteredMarker> = obs
        .iter()
        .enumerate()
        .map(|(spell, o)| ClusteredMarker { spell, marker: o.marker, time: o.time, event: o.event })
        .collect();
    for weighting in [ClusterWeighting::Qualifying, ClusterWeighting::SpellLength] {
        let cfg = TrocConfig { cluster_weighting: weighting, ..Default::default() };
        for h in [6, 12, 24] {
            let a = troc_classical(&obs, &cfg, h).unwrap();
            let b = troc_clustered(&clustered, &cfg, h).unwrap();
            assert_eq!(a.thresholds, b.thresholds);
            for (p, q) in a.raw.iter().zip(&b.raw) {
                assert!((p.0 - q.0).abs() <= 1e-12 && (p.1 - q.1).abs() <= 1e-12);
            }
            assert!((a.tauc - b.tauc).abs() <= 1e-12);
        }
    }
}

/// Product-limit survival at `horizon` over a subset of observations.
fn km_at(obs: &[&ClusteredMarker], horizon: i64) -> f64 {
    let mut times: Vec<i64> = obs.iter().filter(|o| o.event && o.time <= horizon).map(|o| o.time).collect();
    times.sort_unstable();
    times.dedup();
    times.iter().fold(1.0, |s, &t| {
        let n = obs.iter().filter(|o| o.time >= t).count() as f64;
        let d = obs.iter().filter(|o| o.event && o.time == t).count() as f64;
        s * (1.0 - d / n)
    })
}

fn brute_clustered(obs: &[ClusteredMarker], lambda: f64, horizon: i64, weighting: ClusterWeighting) -> Vec<(f64, f64)> {
    let n_obs = obs.len() as f64;
    let rank = |m: f64| obs.iter().filter(|o| o.marker <= m).count() as f64;
    let cond: Vec<f64> = obs
        .iter()
        .map(|o| {
            let near: Vec<&ClusteredMarker> =
                obs.iter().filter(|q| (rank(q.marker) - rank(o.marker)).abs() < lambda * n_obs).collect();
            km_at(&near, horizon)
        })
        .collect();
    let mut spells: Vec<usize> = obs.iter().map(|o| o.spell).collect();
    spells.sort_unstable();
    spells.dedup();
    let n = spells.len() as f64;
    let f_and_s = |p: f64| {
        let (mut f, mut s) = (0.0, 0.0);
        for &id in &spells {
            let members: Vec<usize> = (0..obs.len()).filter(|&k| obs[k].spell == id).collect();
            let len = members.len() as f64;
            let below = members.iter().filter(|&&k| obs[k].marker <= p).count() as f64;
            let above: Vec<usize> = members.iter().copied().filter(|&k| obs[k].marker > p).collect();
            let (f_div, s_div) = match weighting {
                ClusterWeighting::Qualifying => (below, above.len() as f64),
                ClusterWeighting::SpellLength => (len, len),
            };
            if below > 0.0 {
                f += below / f_div;
            }
            if !above.is_empty() {
                s += above.iter().map(|&k| cond[k]).sum::<f64>() / s_div;
            }
        }
        (f / n, s / n)
    };
    let s_t = f_and_s(f64::NEG_INFINITY).1;
    let mut thresholds: Vec<f64> = obs.iter().map(|o| o.marker).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    thresholds.push(f64::NEG_INFINITY);
    thresholds
        .iter()
        .map(|&p| {
            let (f, s) = f_and_s(p);
            (s / s_t, ((1.0 - f) - s) / (1.0 - s_t))
        })
        .collect()
}

#[test]
fn clustered_sums_match_brute_force_on_two_spells() {
    let obs = vec![
        ClusteredMarker { spell: 0, marker: 0.1, time: 5, event: true },
        ClusteredMarker { spell: 0, marker: 0.5, time: 5, event: true },
        ClusteredMarker { spell: 0, marker: 0.9, time: 5, event: true },
        ClusteredMarker { spell: 1, marker: 0.3, time: 8, event: false },
        ClusteredMarker { spell: 1, marker: 0.7, time: 8, event: false },
    ];
    for weighting in [ClusterWeighting::Qualifying, ClusterWeighting::SpellLength] {
        let cfg = TrocConfig {
            lambda: 0.3,
            grid: ThresholdGrid::AllUnique,
            cluster_weighting: weighting,
            ..Default::default()
        };
        let curve = troc_clustered(&obs, &cfg, 6).unwrap();
        let want = brute_clustered(&obs, 0.3, 6, weighting);
        assert_eq!(curve.raw.len(), want.len());
        for (got, want) in curve.raw.iter().zip(&want) {
            assert!((got.0 - want.0).abs() <= 1e-12, "{weighting:?}: {got:?} vs {want:?}");
            assert!((got.1 - want.1).abs() <= 1e-12, "{weighting:?}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn troc_points_ignore_monotone_transforms() {
    let obs = fitted_markers();
    let moved: Vec<MarkerObs> = obs.iter().map(|o| MarkerObs { marker: (2.0 * o.marker).exp() + 3.0, ..*o }).collect();
    let cfg = TrocConfig::default();
    for h in [6, 12, 24] {
        let a = troc_classical(&obs, &cfg, h).unwrap();
        let b = troc_classical(&moved, &cfg, h).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p.0 - q.0).abs() <= 1e-12 && (p.1 - q.1).abs() <= 1e-12);
        }
    }
}

#[test]
fn undefined_horizons_are_reported() {
    let obs = obs_from(&[(0.1, 2, false), (0.4, 5, false), (0.2, 9, false)]);
    assert!(troc_classical(&obs, &TrocConfig { lambda: 0.3, ..Default::default() }, 4).is_err());
    let obs = obs_from(&[(0.1, 2, true), (0.4, 3, true)]);
    assert!(troc_classical(&obs, &TrocConfig { lambda: 0.3, ..Default::default() }, 4).is_err());
}

#[test]
fn ks_known_values() {
    assert!((ks_one_sample(&[std::f64::consts::LN_2], |x| 1.0 - (-x).exp()) - 0.5).abs() < 1e-15);
    assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]), 0.0);
    assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
    assert!(ks_statistic(&[], KsMode::OneSample).is_err());
    let a = ks_statistic(&[0.3, 1.2, 0.8], KsMode::TwoSample { seed: 4 }).unwrap();
    let b = ks_statistic(&[0.3, 1.2, 0.8], KsMode::TwoSample { seed: 4 }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn null_residuals_are_nelson_aalen_sums() {
    let rows = twenty();
    let ds = toy_dataset(Technique::Tfd, &rows);
    let mut null = fit(&ds, &FitOptions::default()).unwrap();
    null.beta = vec![0.0];
    null.baseline = baseline_hazard(&null, &ds).unwrap();
    let cs = cox_snell_residuals(&null, &ds, CensoredAdjustment::None).unwrap();
    let na = |t: i64| {
        let d = rows.iter().filter(|r| r.2 && r.1 == t).count() as f64;
        let n = rows.iter().filter(|r| r.0 < t && t <= r.1).count() as f64;
        if d == 0.0 {
            0.0
        } else {
            d / n
        }
    };
    for (r, row) in cs.residuals.iter().zip(&rows) {
        let want: f64 = ((row.0 + 1)..=row.1).map(na).sum();
        assert!((r - want).abs() < 1e-12);
    }
    let adjusted = cox_snell_residuals(&null, &ds, CensoredAdjustment::Median).unwrap();
    for ((a, b), &event) in adjusted.residuals.iter().zip(&cs.residuals).zip(&cs.events) {
        let shift = if event { 0.0 } else { std::f64::consts::LN_2 };
        assert!((a - b - shift).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn troc_points_are_monotone_and_bounded(
        markers in prop::collection::vec(-3.0f64..3.0, 20..80),
        times in prop::collection::vec(1i64..20, 80),
        events in prop::collection::vec(any::<bool>(), 80),
        lambda in 0.02f64..0.45,
    ) {
        let obs: Vec<MarkerObs> = markers
            .iter()
            .enumerate()
            .map(|(i, &m)| MarkerObs { marker: m, time: times[i], event: events[i] })
            .collect();
        let cfg = TrocConfig { lambda, ..Default::default() };
        if let Ok(curve) = troc_classical(&obs, &cfg, 10) {
            prop_assert_eq!(curve.points[0], (0.0, 0.0));
            prop_assert!(curve.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1)));
            prop_assert!((0.0..=1.0).contains(&curve.tauc));
        }
    }

    #[test]
    fn ks_distance_is_a_bounded_metric(
        a in prop::collection::vec(0.0f64..5.0, 1..40),
        b in prop::collection::vec(0.0f64..5.0, 1..40),
    ) {
        let d = ks_two_sample(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_two_sample(&b, &a));
        prop_assert_eq!(ks_two_sample(&a, &a), 0.0);
    }
}

#[test]
fn screening_ranks_informative_above_noise() {
    use spellhaz::diagnostics::screen_all;
    use spellhaz::synth::{CovariateModel, CovariateSpec};

    let mut spec = two_covariate_spec(1500, 13);
    spec.covariates.push(CovariateSpec { name: "noise".into(), model: CovariateModel::Normal { mean: 0.0, sd: 1.0 } });
    spec.covariates.push(CovariateSpec { name: "flat".into(), model: CovariateModel::Normal { mean: 2.0, sd: 0.0 } });
    spec.true_beta = vec![0.8, -0.3, 0.0, 0.0];
    let ds = build_spells(&generate(&spec).unwrap(), Technique::Pwp).unwrap();
    let results = screen_all(&ds, &FitOptions::default());
    let c = |name: &str| results.iter().find(|r| r.0 == name).unwrap().1.as_ref().map(|r| r.harrell_c);
    assert!(c("x1").unwrap() > c("noise").unwrap());
    assert!(c("flat").is_err());
}
