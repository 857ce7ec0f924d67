#![allow(dead_code)]

use std::fs::File;
use std::path::PathBuf;

use spellhaz::synth::{CovariateModel, CovariateSpec, GeneratorSpec};
use spellhaz::{ingest_panel, Panel, ResolutionType, SchemaConfig, SpellDataset, SpellRecord, Technique};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_panel() -> Panel {
    let cfg = SchemaConfig { covariates: vec!["ltv".into()], calendar_origin: None };
    ingest_panel(File::open(fixture("four_loan_panel.csv")).unwrap(), &cfg).unwrap()
}

/// A one-interval-per-spell dataset from `(entry, stop, event, x)` rows.
pub fn toy_dataset(technique: Technique, rows: &[(i64, i64, bool, Vec<f64>)]) -> SpellDataset {
    let width = rows.first().map_or(0, |r| r.3.len());
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (entry, stop, event, x))| SpellRecord {
            loan_id: format!("{i:04}"),
            period: *stop,
            spell_num: 1,
            spell_num_binned: 1,
            spell_period: *stop - *entry,
            entry: *entry,
            stop: *stop,
            spell_entry: *entry,
            spell_stop: *stop,
            status: *event,
            resolution: if *event { ResolutionType::Default } else { ResolutionType::Censored },
            spell_age: *stop - *entry,
            covariates: x.clone(),
        })
        .collect();
    SpellDataset { technique, schema: (1..=width).map(|k| format!("x{k}")).collect(), records }
}

pub fn two_covariate_spec(n_loans: usize, seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        n_loans,
        max_horizon: 60,
        covariates: vec![
            CovariateSpec { name: "x1".into(), model: CovariateModel::Normal { mean: 0.0, sd: 1.0 } },
            CovariateSpec { name: "x2".into(), model: CovariateModel::Ar1 { mean: 0.0, sd: 1.0, phi: 0.8 } },
        ],
        true_beta: vec![0.5, -0.3],
        baseline_hazards: vec![0.02, 0.04],
        cure_prob: 0.25,
        settle_hazard: 0.01,
        censoring: Default::default(),
        seed,
    }
}
