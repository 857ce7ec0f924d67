//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use spellhaz::cox::{baseline_hazard, PartialLikelihood};
use spellhaz::diagnostics::{
    cox_snell_residuals, harrell_c, ks_statistic, spell_markers, troc_classical, troc_clustered, CensoredAdjustment,
    ClusterWeighting, ClusteredMarker, KsMode, MarkerObs, ThresholdGrid, TrocConfig,
};
use spellhaz::nonparametric::{actual_term_structure, kaplan_meier, predicted_term_structure, PortfolioAveraging};
use spellhaz::synth::{generate, CovariateModel, CovariateSpec, GeneratorSpec};
use spellhaz::{
    build_spells, fit, ingest_panel, FitOptions, ResolutionType, SchemaConfig, SpellDataset, SpellRecord, Technique,
    Ties,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn normal(name: &str) -> CovariateSpec {
    CovariateSpec { name: name.into(), model: CovariateModel::Normal { mean: 0.0, sd: 1.0 } }
}

fn ar1(name: &str) -> CovariateSpec {
    CovariateSpec { name: name.into(), model: CovariateModel::Ar1 { mean: 0.0, sd: 1.0, phi: 0.8 } }
}

fn spec(n_loans: usize, hazards: Vec<f64>, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        n_loans,
        max_horizon: 60,
        covariates: vec![normal("x1"), ar1("x2")],
        true_beta: vec![0.5, -0.3],
        baseline_hazards: hazards,
        cure_prob: 0.3,
        settle_hazard: 0.01,
        censoring: Default::default(),
        seed,
    }
}

/// One interval per spell from `(entry, stop, event, x)`.
fn toy(rows: &[(i64, i64, bool, f64)]) -> SpellDataset {
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, &(entry, stop, event, x))| SpellRecord {
            loan_id: format!("{i:03}"),
            period: stop,
            spell_num: 1,
            spell_num_binned: 1,
            spell_period: stop - entry,
            entry,
            stop,
            spell_entry: entry,
            spell_stop: stop,
            status: event,
            resolution: if event { ResolutionType::Default } else { ResolutionType::Censored },
            spell_age: stop - entry,
            covariates: vec![x],
        })
        .collect();
    SpellDataset { technique: Technique::Tfd, schema: vec!["x1".into()], records }
}

fn reference_layout_fidelity() -> Outcome {
    let cfg = SchemaConfig { covariates: vec!["ltv".into()], calendar_origin: None };
    let panel =
        ingest_panel(File::open(fixtures().join("four_loan_panel.csv")).unwrap(), &cfg).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for technique in Technique::ALL {
        let ds = build_spells(&panel, technique).map_err(|e| e.to_string())?;
        let got: Vec<Vec<String>> = ds
            .records
            .iter()
            .map(|r| {
                [r.loan_id.clone()]
                    .into_iter()
                    .chain(
                        [r.period, i64::from(r.spell_num), r.spell_period, r.spell_entry, r.spell_stop]
                            .map(|v| v.to_string()),
                    )
                    .chain([r.resolution.code().to_string(), r.spell_age.to_string()])
                    .collect()
            })
            .collect();
        let want: Vec<Vec<String>> = csv::Reader::from_path(fixtures().join(format!("four_loan_{technique}.csv")))
            .unwrap()
            .records()
            .map(|r| r.unwrap().iter().map(str::to_string).collect())
            .collect();
        ensure(got == want, || format!("{technique} layout differs from its reference table"))?;
        rows += want.len();
    }
    Ok(format!("{rows} rows over tfd/ag/pwp match exactly"))
}

fn reference_log_pl(rows: &[(i64, i64, bool, f64)], beta: f64) -> f64 {
    let mut times: Vec<i64> = rows.iter().filter(|r| r.2).map(|r| r.1).collect();
    times.sort_unstable();
    times.dedup();
    times
        .iter()
        .map(|&t| {
            let risk: f64 = rows.iter().filter(|r| r.0 < t && t <= r.1).map(|r| (beta * r.3).exp()).sum();
            let dead: Vec<f64> = rows.iter().filter(|r| r.2 && r.1 == t).map(|r| r.3).collect();
            let d = dead.len() as f64;
            let dead_risk: f64 = dead.iter().map(|x| (beta * x).exp()).sum();
            dead.iter().map(|x| beta * x).sum::<f64>()
                - (0..dead.len()).map(|l| (risk - l as f64 / d * dead_risk).ln()).sum::<f64>()
        })
        .sum()
}

fn likelihood_oracle() -> Outcome {
    let rows = [
        (0, 2, true, 0.5),
        (0, 3, true, 1.2),
        (0, 3, true, -0.4),
        (0, 4, false, 0.3),
        (1, 5, true, -1.0),
        (0, 6, false, 0.8),
    ];
    let ds = toy(&rows);
    let fitted = fit(&ds, &FitOptions { ties: Ties::Efron, ..Default::default() }).map_err(|e| e.to_string())?;
    let f = |b: f64| reference_log_pl(&rows, b);
    let coarse = (-400..=400).map(|k| k as f64 * 0.01).max_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
    let (mut lo, mut hi) = (coarse - 0.02, coarse + 0.02);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-10 {
        let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let brute = 0.5 * (lo + hi);
    let d_beta = (fitted.beta[0] - brute).abs();
    ensure(d_beta <= 1e-6, || format!("|beta - brute| = {d_beta:e}"))?;

    let pl = PartialLikelihood::new(&ds, &["x1".into()], Ties::Efron).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for b in [-0.8, 0.3, 1.1] {
        let ev = pl.evaluate(&[b]);
        let fd_grad = (pl.log_pl(&[b + h]) - pl.log_pl(&[b - h])) / (2.0 * h);
        let fd_hess = (pl.evaluate(&[b + h]).gradient[0] - pl.evaluate(&[b - h]).gradient[0]) / (2.0 * h);
        worst = worst.max((ev.gradient[0] - fd_grad).abs() / fd_grad.abs());
        worst = worst.max((-ev.information[0] - fd_hess).abs() / fd_hess.abs());
    }
    ensure(worst <= 1e-5, || format!("finite-difference relative error {worst:e}"))?;
    Ok(format!("|dbeta| = {d_beta:.1e}, worst derivative rel. error = {worst:.1e}"))
}

fn coefficient_recovery() -> Outcome {
    let truth = [0.5, -0.3];
    // one baseline for every spell, so all three layouts are well specified
    let panel = generate(&spec(5000, vec![0.03], 20240501)).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for technique in Technique::ALL {
        let ds = build_spells(&panel, technique).map_err(|e| e.to_string())?;
        let f = fit(&ds, &FitOptions::default()).map_err(|e| e.to_string())?;
        let se = f.std_errors();
        for k in 0..2 {
            let z = (f.beta[k] - truth[k]) / se[k];
            ensure(z.abs() <= 3.0, || format!("{technique} beta[{k}] = {:.4} is {z:.2} se from truth", f.beta[k]))?;
        }
        detail.push(format!("{technique} ({:.3}, {:.3})", f.beta[0], f.beta[1]));
    }

    let mut single = spec(2000, vec![0.03], 20240502);
    single.cure_prob = 0.0;
    let panel = generate(&single).map_err(|e| e.to_string())?;
    let fits: Vec<_> = Technique::ALL
        .iter()
        .map(|&t| fit(&build_spells(&panel, t).unwrap(), &FitOptions::default()).unwrap())
        .collect();
    let gap =
        fits[1..].iter().flat_map(|f| f.beta.iter().zip(&fits[0].beta).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
    ensure(gap <= 1e-8, || format!("single-spell layouts differ by {gap:e}"))?;
    Ok(format!("{}; single-spell max gap {gap:.1e}", detail.join(", ")))
}

fn baseline_contrast() -> Outcome {
    let mut s = spec(5000, vec![0.02, 0.04], 20240503);
    s.max_horizon = 120;
    s.cure_prob = 0.5;
    let panel = generate(&s).map_err(|e| e.to_string())?;
    let pwp = fit(&build_spells(&panel, Technique::Pwp).unwrap(), &FitOptions::default()).map_err(|e| e.to_string())?;
    let ag = fit(&build_spells(&panel, Technique::Ag).unwrap(), &FitOptions::default()).map_err(|e| e.to_string())?;
    let cum = |k: u32| pwp.baseline.iter().find(|b| b.stratum == k).map(|b| b.cumulative_at(24));
    let (Some(h1), Some(h2)) = (cum(1), cum(2)) else {
        return Err("PWP fit lacks a stratum-1 or stratum-2 baseline".into());
    };
    let ratio = h2 / h1;
    ensure((ratio - 2.0).abs() <= 0.25 * 2.0, || format!("stratum ratio at 24 = {ratio:.3}"))?;
    ensure(ag.baseline.len() == 1, || format!("AG has {} baselines", ag.baseline.len()))?;
    Ok(format!("PWP H2(24)/H1(24) = {ratio:.3}; AG baselines = {}", ag.baseline.len()))
}

fn term_structure_axioms() -> Outcome {
    let s = GeneratorSpec {
        n_loans: 3000,
        max_horizon: 1500,
        covariates: vec![normal("x1")],
        true_beta: vec![0.0],
        baseline_hazards: vec![0.02],
        cure_prob: 0.0,
        settle_hazard: 0.0,
        censoring: Default::default(),
        seed: 20240504,
    };
    let ds = build_spells(&generate(&s).map_err(|e| e.to_string())?, Technique::Tfd).map_err(|e| e.to_string())?;
    ensure(ds.n_events() == ds.n_spells(), || "dataset is not fully resolved".into())?;
    let horizon = ds.records.iter().map(|r| r.stop).max().unwrap();
    let actual = actual_term_structure(&ds, horizon);
    let total = actual.total();
    ensure((total - 1.0).abs() <= 1e-9, || format!("sum f_A = {total}"))?;
    let km = kaplan_meier(&ds);
    let step_gap =
        km.times.iter().map(|&t| (actual.value_at(t) - (km.surv_at(t - 1) - km.surv_at(t))).abs()).fold(0.0, f64::max);
    ensure(step_gap <= 1e-12, || format!("f_A differs from survival steps by {step_gap:e}"))?;

    let mut null = fit(&ds, &FitOptions::default()).map_err(|e| e.to_string())?;
    null.beta = vec![0.0];
    null.baseline = baseline_hazard(&null, &ds).map_err(|e| e.to_string())?;
    let predicted =
        predicted_term_structure(&null, &ds, horizon, PortfolioAveraging::CoveringSpells).map_err(|e| e.to_string())?;
    let fp_gap = km.times.iter().map(|&t| (actual.value_at(t) - predicted.value_at(t)).abs()).fold(0.0, f64::max);
    ensure(fp_gap <= 1e-3, || format!("max |f_P - f_A| = {fp_gap:e}"))?;
    Ok(format!("|sum - 1| = {:.1e}, step gap {step_gap:.1e}, max |f_P - f_A| = {fp_gap:.1e}", (total - 1.0).abs()))
}

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

/// Clustered `(F+, T+)` from the double sums written out term by term.
fn brute_clustered(obs: &[ClusteredMarker], lambda: f64, horizon: i64) -> Vec<(f64, f64)> {
    let n_obs = obs.len() as f64;
    let rank = |m: f64| obs.iter().filter(|o| o.marker <= m).count() as f64;
    let cond: Vec<f64> = obs
        .iter()
        .map(|o| {
            let near: Vec<_> =
                obs.iter().filter(|q| (rank(q.marker) - rank(o.marker)).abs() < lambda * n_obs).collect();
            km_at(&near, horizon)
        })
        .collect();
    let n_spells = 2.0;
    let sums = |p: f64| {
        let (mut f, mut s) = (0.0, 0.0);
        for id in 0..2 {
            let members: Vec<usize> = (0..obs.len()).filter(|&k| obs[k].spell == id).collect();
            if members.iter().any(|&k| obs[k].marker <= p) {
                f += 1.0;
            }
            let above: Vec<usize> = members.into_iter().filter(|&k| obs[k].marker > p).collect();
            if !above.is_empty() {
                s += above.iter().map(|&k| cond[k]).sum::<f64>() / above.len() as f64;
            }
        }
        (f / n_spells, s / n_spells)
    };
    let s_t = sums(f64::NEG_INFINITY).1;
    let mut thresholds: Vec<f64> = obs.iter().map(|o| o.marker).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.insert(0, f64::INFINITY);
    thresholds.push(f64::NEG_INFINITY);
    thresholds
        .iter()
        .map(|&p| {
            let (f, s) = sums(p);
            (s / s_t, ((1.0 - f) - s) / (1.0 - s_t))
        })
        .collect()
}

fn max_point_gap(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(p, q)| (p.0 - q.0).abs().max((p.1 - q.1).abs())).fold(0.0, f64::max)
}

fn diagnostics_oracles() -> Outcome {
    // concordance against every comparable pair
    let rows: Vec<(i64, i64, bool, f64)> = (0..20)
        .map(|i| (i64::from(i % 4 == 3), 2 + (i * 5) % 9, i % 3 != 0, ((i * 7) % 11) as f64 / 5.0 - 1.0))
        .collect();
    let ds = toy(&rows);
    let model = fit(&ds, &FitOptions::default()).map_err(|e| e.to_string())?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, a) in rows.iter().enumerate().filter(|(_, a)| a.2) {
        for (j, b) in rows.iter().enumerate() {
            if i != j && b.0 < a.1 && (b.1 > a.1 || (b.1 == a.1 && !b.2)) {
                den += 1.0;
                let (si, sj) = (model.beta[0] * a.3, model.beta[0] * b.3);
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    let c = harrell_c(&model, &ds).map_err(|e| e.to_string())?;
    ensure(c == num / den, || format!("c = {c} but enumeration gives {}", num / den))?;

    // a constant marker traces the diagonal
    let flat: Vec<MarkerObs> = [(2, true), (5, false), (3, true), (9, true)]
        .iter()
        .map(|&(time, event)| MarkerObs { marker: 1.0, time, event })
        .collect();
    let diag =
        troc_classical(&flat, &TrocConfig { lambda: 0.3, ..Default::default() }, 4).map_err(|e| e.to_string())?;
    ensure(diag.tauc == 0.5, || format!("diagonal tAUC = {}", diag.tauc))?;

    // single-marker spells: clustered equals classical
    let panel = generate(&spec(600, vec![0.03, 0.06], 20240505)).map_err(|e| e.to_string())?;
    let pwp = build_spells(&panel, Technique::Pwp).map_err(|e| e.to_string())?;
    let pwp_fit = fit(&pwp, &FitOptions::default()).map_err(|e| e.to_string())?;
    let obs = spell_markers(&pwp_fit, &pwp).map_err(|e| e.to_string())?;
    let single: Vec<ClusteredMarker> = obs
        .iter()
        .enumerate()
        .map(|(spell, o)| ClusteredMarker { spell, marker: o.marker, time: o.time, event: o.event })
        .collect();
    let cfg = TrocConfig::default();
    let mut reduction_gap: f64 = 0.0;
    let mut invariance_gap: f64 = 0.0;
    let moved: Vec<MarkerObs> = obs.iter().map(|o| MarkerObs { marker: (2.0 * o.marker).exp() + 3.0, ..*o }).collect();
    for h in [6, 12, 24] {
        let a = troc_classical(&obs, &cfg, h).map_err(|e| e.to_string())?;
        let b = troc_clustered(&single, &cfg, h).map_err(|e| e.to_string())?;
        reduction_gap = reduction_gap.max(max_point_gap(&a.raw, &b.raw));
        let m = troc_classical(&moved, &cfg, h).map_err(|e| e.to_string())?;
        invariance_gap = invariance_gap.max(max_point_gap(&a.points, &m.points));
    }
    ensure(reduction_gap <= 1e-12, || format!("clustered vs classical gap {reduction_gap:e}"))?;
    ensure(invariance_gap <= 1e-12, || format!("monotone transform moved points by {invariance_gap:e}"))?;

    // two-spell toy against the written-out double sums
    let toy_obs = [(0, 0.1, 5, true), (0, 0.5, 5, true), (0, 0.9, 5, true), (1, 0.3, 8, false), (1, 0.7, 8, false)]
        .map(|(spell, marker, time, event)| ClusteredMarker { spell, marker, time, event });
    let toy_cfg = TrocConfig {
        lambda: 0.3,
        grid: ThresholdGrid::AllUnique,
        cluster_weighting: ClusterWeighting::Qualifying,
        ..Default::default()
    };
    let curve = troc_clustered(&toy_obs, &toy_cfg, 6).map_err(|e| e.to_string())?;
    let brute_gap = max_point_gap(&curve.raw, &brute_clustered(&toy_obs, 0.3, 6));
    ensure(brute_gap <= 1e-12, || format!("clustered sums differ from enumeration by {brute_gap:e}"))?;

    Ok(format!(
        "c exact ({c:.4}), diagonal 0.5, reduction {reduction_gap:.1e}, two-spell {brute_gap:.1e}, transform {invariance_gap:.1e}"
    ))
}

fn gof_calibration() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let s = GeneratorSpec {
            n_loans: 2000,
            max_horizon: 120,
            covariates: vec![normal("x1"), ar1("x2")],
            true_beta: vec![1.2, -0.3],
            baseline_hazards: vec![0.05],
            cure_prob: 0.0,
            settle_hazard: 0.0,
            censoring: Default::default(),
            seed: 20240600 + seed,
        };
        let ds = build_spells(&generate(&s).map_err(|e| e.to_string())?, Technique::Tfd).map_err(|e| e.to_string())?;
        ensure(ds.n_spells() == 2000, || format!("{} spells", ds.n_spells()))?;
        let d_of = |covariates: Vec<String>| -> Result<f64, String> {
            let f = fit(&ds, &FitOptions { covariates: Some(covariates), ..Default::default() })
                .map_err(|e| e.to_string())?;
            let cs = cox_snell_residuals(&f, &ds, CensoredAdjustment::Median).map_err(|e| e.to_string())?;
            Ok(ks_statistic(&cs.residuals, KsMode::OneSample).map_err(|e| e.to_string())?.d)
        };
        let good = d_of(vec!["x1".into(), "x2".into()])?;
        let bad = d_of(vec!["x2".into()])?;
        ensure(good <= 0.05, || format!("seed {seed}: well-specified D = {good:.4}"))?;
        ensure(bad > good, || format!("seed {seed}: misspecified D = {bad:.4} <= {good:.4}"))?;
        lines.push(format!("{good:.3}<{bad:.3}"));
    }
    Ok(format!("D well<omitted per seed: {}", lines.join(" ")))
}

fn run_cli(out: &Path, threads: usize) -> Result<(), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pipeline.json");
    let status = Command::new(env!("CARGO_BIN_EXE_spellhaz"))
        .args(["--seed", "7", "--threads", &threads.to_string(), "--out-dir"])
        .arg(out)
        .arg("pipeline")
        .arg("--config")
        .arg(config)
        .stdout(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("pipeline exited with {status}"))
}

fn csv_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let n = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    run_cli(dirs[0].path(), 1)?;
    run_cli(dirs[1].path(), 1)?;
    run_cli(dirs[2].path(), n)?;
    let base = csv_outputs(dirs[0].path());
    ensure(!base.is_empty(), || "pipeline wrote no CSV files".into())?;
    for (label, dir) in [("repeat run", &dirs[1]), ("threads N", &dirs[2])] {
        let other = csv_outputs(dir.path());
        ensure(other.len() == base.len(), || format!("{label}: {} vs {} files", other.len(), base.len()))?;
        for ((name, a), (_, b)) in base.iter().zip(&other) {
            ensure(a == b, || format!("{label}: {name} differs"))?;
        }
    }
    Ok(format!("{} CSV files identical across repeat and --threads 1 vs {n}", base.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 8] = [
        ("reference layout fidelity", reference_layout_fidelity, 1),
        ("partial-likelihood oracle", likelihood_oracle, 1),
        ("coefficient recovery", coefficient_recovery, 60),
        ("baseline-hazard contrast", baseline_contrast, 120),
        ("term-structure axioms", term_structure_axioms, 30),
        ("diagnostics oracles", diagnostics_oracles, 10),
        ("goodness-of-fit calibration", gof_calibration, 60),
        ("determinism", determinism, 120),
    ];
    let mut failed = 0;
    for (k, (name, check, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= Duration::from_secs(*limit) {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {:.2}s, limit {limit}s", elapsed.as_secs_f64()))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({:.2}s)", k + 1, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({:.2}s)", k + 1, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
