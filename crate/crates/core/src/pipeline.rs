//! End-to-end run driven by a JSON config: build spells, split, fit,
//! screen, diagnose and compare term-structures for each technique, writing
//! every artifact plus a manifest into one output directory.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cox::{aic, fit, Coefficient, CoxFit, FitError, FitOptions, StratumBaseline, Ties};
use crate::diagnostics::{
    cox_snell_residuals, harrell_c, ks_statistic, period_markers, screen_all, spell_markers, troc_classical,
    troc_clustered, CensoredAdjustment, DiagnosticError, KsMode, TrocConfig, TrocVariant,
};
use crate::nonparametric::{
    actual_term_structure, predicted_term_structure, term_structure_mae, write_overlay, PortfolioAveraging,
};
use crate::panel::{ingest_panel, Panel, PanelError, SchemaConfig};
use crate::sampling::{avg_discrepancy, column_strata, resolution_rate, split_sample, status_strata};
use crate::spells::{build_spells, ResolutionType, SpellDataset, SpellError, Technique};
use crate::synth::{generate, GeneratorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    /// A panel CSV; a relative path is resolved against the config's folder.
    Panel {
        path: PathBuf,
        schema: SchemaConfig,
    },
    Synth {
        spec: GeneratorSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Spells,
    Sample,
    Fit,
    Screen,
    Diagnose,
    TermStructure,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Spells, Stage::Sample, Stage::Fit, Stage::Screen, Stage::Diagnose, Stage::TermStructure];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Spells => "build-spells",
            Stage::Sample => "sample",
            Stage::Fit => "fit",
            Stage::Screen => "screen",
            Stage::Diagnose => "diagnose",
            Stage::TermStructure => "term-structure",
        }
    }
}

fn default_techniques() -> Vec<String> {
    Technique::ALL.iter().map(|t| t.name().to_string()).collect()
}

fn default_train_fraction() -> Option<f64> {
    Some(0.7)
}

fn default_term_horizon() -> i64 {
    60
}

fn default_mae_start() -> i64 {
    1
}

fn default_variant() -> TrocVariant {
    TrocVariant::Classical
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub input: InputConfig,
    #[serde(default = "default_techniques")]
    pub techniques: Vec<String>,
    #[serde(default)]
    pub ties: Ties,
    /// Model covariates; all panel covariates when absent.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// `null` fits and evaluates on the full panel.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: Option<f64>,
    /// `resolution` for final-status strata, otherwise a covariate column.
    #[serde(default)]
    pub strata: Option<String>,
    #[serde(default)]
    pub troc: TrocConfig,
    #[serde(default = "default_variant")]
    pub troc_variant: TrocVariant,
    #[serde(default)]
    pub ks: KsMode,
    #[serde(default)]
    pub censored_adjustment: CensoredAdjustment,
    #[serde(default = "default_term_horizon")]
    pub term_horizon: i64,
    #[serde(default = "default_mae_start")]
    pub mae_start: i64,
    #[serde(default)]
    pub averaging: PortfolioAveraging,
    /// Stages to run; all when absent.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
}

impl PipelineConfig {
    pub fn techniques(&self) -> Result<Vec<Technique>, PipelineError> {
        let parsed: Result<Vec<Technique>, _> = self.techniques.iter().map(|s| s.parse()).collect();
        parsed.map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn stages(&self) -> Result<Vec<Stage>, PipelineError> {
        let mut stages = self.stages.clone().unwrap_or_else(|| Stage::ALL.to_vec());
        stages.sort();
        stages.dedup();
        let needs_fit = stages.iter().any(|s| matches!(s, Stage::Diagnose | Stage::TermStructure));
        if needs_fit && !stages.contains(&Stage::Fit) {
            return Err(PipelineError::Config("diagnose and term_structure need the fit stage".into()));
        }
        Ok(stages)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let techniques = self.techniques()?;
        if techniques.is_empty() {
            return Err(PipelineError::Config("no techniques given; supported: tfd, ag, pwp".into()));
        }
        self.stages()?;
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(PipelineError::Config(format!("train_fraction {f} is outside (0, 1)")));
            }
        }
        if !(self.troc.lambda > 0.0 && self.troc.lambda < 0.5) {
            return Err(PipelineError::Config(format!("troc.lambda {} is outside (0, 0.5)", self.troc.lambda)));
        }
        if self.term_horizon <= self.mae_start {
            return Err(PipelineError::Config(format!(
                "term_horizon {} must exceed mae_start {}",
                self.term_horizon, self.mae_start
            )));
        }
        if let InputConfig::Synth { spec } = &self.input {
            spec.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String, validation: bool },
}

impl PipelineError {
    /// True for bad configs and bad input data, as opposed to failures
    /// while computing or writing.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(_) => true,
            PipelineError::Stage { validation, .. } => *validation,
        }
    }
}

fn stage_err(stage: Stage, validation: bool) -> impl FnOnce(String) -> PipelineError {
    move |message| PipelineError::Stage { stage: stage.name(), message, validation }
}

fn io_err<E: std::fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| stage_err(stage, false)(e.to_string())
}

fn panel_err(stage: Stage) -> impl FnOnce(PanelError) -> PipelineError {
    move |e| {
        let validation = !matches!(e, PanelError::Io(_));
        stage_err(stage, validation)(e.to_string())
    }
}

fn spell_err(stage: Stage) -> impl FnOnce(SpellError) -> PipelineError {
    move |e| {
        let validation = matches!(e, SpellError::InvalidPanel { .. });
        stage_err(stage, validation)(e.to_string())
    }
}

fn fit_err(stage: Stage) -> impl FnOnce(FitError) -> PipelineError {
    move |e| {
        let validation = matches!(e, FitError::UnknownCovariate(_));
        stage_err(stage, validation)(e.to_string())
    }
}

fn diag_err(stage: Stage) -> impl FnOnce(DiagnosticError) -> PipelineError {
    move |e| {
        let validation = matches!(e, DiagnosticError::Fit(FitError::UnknownCovariate(_)) | DiagnosticError::Lambda(_));
        stage_err(stage, validation)(e.to_string())
    }
}

/// Fit summary as written to `fit_<technique>.json`. It carries enough to
/// rebuild the fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub technique: Technique,
    pub ties: Ties,
    pub converged: bool,
    pub iterations: usize,
    pub n_events: usize,
    pub n_spells: usize,
    pub n_intervals: usize,
    pub log_pl: f64,
    pub log_pl_null: f64,
    pub aic: f64,
    pub max_abs_score: f64,
    pub coefficients: Vec<Coefficient>,
    pub vcov: Vec<Vec<f64>>,
    pub baseline: Vec<StratumBaseline>,
}

impl From<&CoxFit> for FitReport {
    fn from(f: &CoxFit) -> Self {
        FitReport {
            technique: f.technique,
            ties: f.ties,
            converged: f.converged,
            iterations: f.iterations,
            n_events: f.n_events,
            n_spells: f.n_spells,
            n_intervals: f.n_intervals,
            log_pl: f.log_pl,
            log_pl_null: f.log_pl_null,
            aic: aic(f),
            max_abs_score: f.max_abs_score,
            coefficients: f.coefficients(),
            vcov: f.vcov.clone(),
            baseline: f.baseline.clone(),
        }
    }
}

impl FitReport {
    pub fn into_fit(self) -> CoxFit {
        CoxFit {
            technique: self.technique,
            ties: self.ties,
            schema: self.coefficients.iter().map(|c| c.name.clone()).collect(),
            beta: self.coefficients.iter().map(|c| c.beta).collect(),
            vcov: self.vcov,
            log_pl: self.log_pl,
            log_pl_null: self.log_pl_null,
            n_events: self.n_events,
            n_spells: self.n_spells,
            n_intervals: self.n_intervals,
            baseline: self.baseline,
            converged: self.converged,
            iterations: self.iterations,
            max_abs_score: self.max_abs_score,
        }
    }
}

/// One row of `summary_<technique>.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub horizon: i64,
    pub tauc: Option<f64>,
    pub harrell_c: f64,
    pub aic: f64,
    pub ks_d: f64,
    pub one_minus_d: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub troc_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discrepancy {
    pub resolution: ResolutionType,
    pub full_vs_train: Option<f64>,
    pub full_vs_valid: Option<f64>,
    pub train_vs_valid: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct StageTime {
    stage: String,
    seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest {
    version: &'static str,
    seed: u64,
    config_sha256: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    stage_times: Vec<StageTime>,
    outputs: Vec<OutputEntry>,
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub out_dir: PathBuf,
    pub config_sha256: String,
    pub outputs: Vec<PathBuf>,
    pub fits: Vec<FitReport>,
    pub summaries: Vec<(Technique, Vec<SummaryRow>)>,
}

struct Run<'a> {
    out_dir: &'a Path,
    outputs: Vec<PathBuf>,
    times: Vec<StageTime>,
}

impl Run<'_> {
    fn create(&mut self, name: &str, stage: Stage) -> Result<BufWriter<File>, PipelineError> {
        let path = self.out_dir.join(name);
        let file = File::create(&path).map_err(io_err(stage))?;
        self.outputs.push(path);
        Ok(BufWriter::new(file))
    }

    fn json<T: Serialize>(&mut self, name: &str, stage: Stage, value: &T) -> Result<(), PipelineError> {
        let mut w = self.create(name, stage)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(io_err(stage))?;
        writeln!(w).map_err(io_err(stage))?;
        w.flush().map_err(io_err(stage))
    }

    fn timed<T>(
        &mut self,
        label: String,
        f: impl FnOnce(&mut Self) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let start = Instant::now();
        let out = f(self);
        self.times.push(StageTime { stage: label, seconds: start.elapsed().as_secs_f64() });
        out
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads and parses a config file, returning it with its raw bytes.
pub fn load_config(path: &Path) -> Result<(PipelineConfig, Vec<u8>), PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let config = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok((config, bytes))
}

/// Runs the configured stages and writes their artifacts to `out_dir`.
///
/// `config_bytes` and every input file feed the manifest hash, together
/// with the effective seed. `base_dir` resolves relative input paths. On a
/// stage failure the manifest records the error, lists what was written so
/// far and a `STALE` marker is left in `out_dir`.
pub fn run_pipeline(
    config: &PipelineConfig,
    config_bytes: &[u8],
    base_dir: &Path,
    out_dir: &Path,
) -> Result<PipelineReport, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::Config(format!("{}: {e}", out_dir.display())))?;
    let _ = fs::remove_file(out_dir.join("STALE"));

    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    hasher.update(config.seed.to_le_bytes());
    let input_bytes = match &config.input {
        InputConfig::Panel { path, .. } => {
            let path = base_dir.join(path);
            Some(fs::read(&path).map_err(|e| PipelineError::Stage {
                stage: "ingest",
                message: format!("{}: {e}", path.display()),
                validation: false,
            })?)
        }
        InputConfig::Synth { .. } => None,
    };
    if let Some(bytes) = &input_bytes {
        hasher.update(bytes);
    }
    let config_sha256 = hex::encode(hasher.finalize());

    let mut run = Run { out_dir, outputs: Vec::new(), times: Vec::new() };
    let result = execute(config, input_bytes.as_deref(), &mut run);
    let (status, error) = match &result {
        Ok(_) => ("ok", None),
        Err(e) => ("failed", Some(e.to_string())),
    };
    let mut outputs = Vec::new();
    for path in &run.outputs {
        let bytes = fs::read(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let name = path.strip_prefix(out_dir).unwrap_or(path).display().to_string();
        outputs.push(OutputEntry { path: name, sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_sha256: config_sha256.clone(),
        status,
        error,
        stage_times: std::mem::take(&mut run.times),
        outputs,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out_dir.join("manifest.json"), manifest_json + "\n")
        .map_err(|e| PipelineError::Config(format!("manifest: {e}")))?;
    if result.is_err() {
        let listing: String = run.outputs.iter().map(|p| format!("{}\n", p.display())).collect();
        let _ = fs::write(out_dir.join("STALE"), listing);
    }
    let (fits, summaries) = result?;
    Ok(PipelineReport { out_dir: out_dir.to_path_buf(), config_sha256, outputs: run.outputs, fits, summaries })
}

type Outcome = (Vec<FitReport>, Vec<(Technique, Vec<SummaryRow>)>);

fn execute(config: &PipelineConfig, input: Option<&[u8]>, run: &mut Run<'_>) -> Result<Outcome, PipelineError> {
    let stages = config.stages()?;
    let techniques = config.techniques()?;
    let panel = run.timed("ingest".into(), |run| load_panel(config, input, run))?;

    let split = if stages.contains(&Stage::Sample) && config.train_fraction.is_some() {
        Some(run.timed("sample".into(), |_| split_panel(config, &panel))?)
    } else {
        None
    };

    let mut fits = Vec::new();
    let mut summaries = Vec::new();
    for technique in techniques {
        let tag = technique.name();
        let full = run.timed(format!("build-spells/{tag}"), |run| {
            let ds = build_spells(&panel, technique).map_err(spell_err(Stage::Spells))?;
            if stages.contains(&Stage::Spells) {
                let w = run.create(&format!("spells_{tag}.csv"), Stage::Spells)?;
                ds.write_csv(w).map_err(spell_err(Stage::Spells))?;
            }
            Ok(ds)
        })?;
        let (train, valid) = match &split {
            Some((t, v)) => (
                build_spells(t, technique).map_err(spell_err(Stage::Sample))?,
                build_spells(v, technique).map_err(spell_err(Stage::Sample))?,
            ),
            None => (full.clone(), full.clone()),
        };
        if split.is_some() {
            run.timed(format!("sample/{tag}"), |run| write_resolution_rates(tag, &panel, &full, &train, &valid, run))?;
        }
        if !stages.contains(&Stage::Fit) {
            continue;
        }
        let options = FitOptions { ties: config.ties, covariates: config.covariates.clone(), ..FitOptions::default() };
        let model = run.timed(format!("fit/{tag}"), |run| {
            let model = fit(&train, &options).map_err(fit_err(Stage::Fit))?;
            let report = FitReport::from(&model);
            run.json(&format!("fit_{tag}.json"), Stage::Fit, &report)?;
            fits.push(report);
            Ok(model)
        })?;
        if stages.contains(&Stage::Screen) {
            run.timed(format!("screen/{tag}"), |run| write_screen(tag, &train, &options, config, run))?;
        }
        if stages.contains(&Stage::Diagnose) {
            let rows = run.timed(format!("diagnose/{tag}"), |run| diagnose(tag, &model, &valid, config, run))?;
            summaries.push((technique, rows));
        }
        if stages.contains(&Stage::TermStructure) {
            run.timed(format!("term-structure/{tag}"), |run| term_structures(tag, &model, &valid, config, run))?;
        }
    }
    Ok((fits, summaries))
}

fn load_panel(config: &PipelineConfig, input: Option<&[u8]>, run: &mut Run<'_>) -> Result<Panel, PipelineError> {
    match (&config.input, input) {
        (InputConfig::Panel { schema, .. }, Some(bytes)) => {
            ingest_panel(bytes, schema).map_err(panel_err(Stage::Spells))
        }
        (InputConfig::Synth { spec }, _) => {
            let panel = generate(spec).map_err(|e| stage_err(Stage::Spells, true)(e.to_string()))?;
            let w = run.create("panel.csv", Stage::Spells)?;
            panel.write_csv(w).map_err(panel_err(Stage::Spells))?;
            Ok(panel)
        }
        (InputConfig::Panel { .. }, None) => unreachable!("panel bytes are read before execution"),
    }
}

fn split_panel(config: &PipelineConfig, panel: &Panel) -> Result<(Panel, Panel), PipelineError> {
    let strata: HashMap<String, String> = match config.strata.as_deref() {
        None | Some("resolution") => status_strata(panel),
        Some(column) => column_strata(panel, column).map_err(|e| stage_err(Stage::Sample, true)(e.to_string()))?,
    };
    let fraction = config.train_fraction.expect("split requested");
    split_sample(panel, fraction, &strata, config.seed).map_err(|e| stage_err(Stage::Sample, true)(e.to_string()))
}

fn write_resolution_rates(
    tag: &str,
    panel: &Panel,
    full: &SpellDataset,
    train: &SpellDataset,
    valid: &SpellDataset,
    run: &mut Run<'_>,
) -> Result<(), PipelineError> {
    let origin = panel.calendar_origin;
    let mut rows = Vec::new();
    for kappa in [ResolutionType::Default, ResolutionType::Settled, ResolutionType::WriteOff, ResolutionType::Censored]
    {
        let series: Vec<_> = [full, train, valid].iter().map(|ds| resolution_rate(ds, kappa, origin)).collect();
        if kappa == ResolutionType::Default {
            for (name, s) in ["full", "train", "valid"].iter().zip(&series) {
                let w = run.create(&format!("resolution_rate_{tag}_{name}.csv"), Stage::Sample)?;
                s.write_csv(w).map_err(io_err(Stage::Sample))?;
            }
        }
        rows.push(Discrepancy {
            resolution: kappa,
            full_vs_train: avg_discrepancy(&series[0], &series[1]).ok(),
            full_vs_valid: avg_discrepancy(&series[0], &series[2]).ok(),
            train_vs_valid: avg_discrepancy(&series[1], &series[2]).ok(),
        });
    }
    run.json(&format!("sampling_{tag}.json"), Stage::Sample, &rows)
}

fn write_screen(
    tag: &str,
    ds: &SpellDataset,
    options: &FitOptions,
    config: &PipelineConfig,
    run: &mut Run<'_>,
) -> Result<(), PipelineError> {
    let names = config.covariates.clone().unwrap_or_else(|| ds.schema.clone());
    let subset = ds.select_covariates(&names).ok_or_else(|| {
        stage_err(Stage::Screen, true)(format!("model covariates {names:?} are not all in the panel schema"))
    })?;
    let options = FitOptions { covariates: None, ..options.clone() };
    let w = run.create(&format!("screen_{tag}.csv"), Stage::Screen)?;
    let mut w = csv::Writer::from_writer(w);
    let err = io_err::<csv::Error>(Stage::Screen);
    let header = ["covariate", "beta", "se", "z", "p_value", "harrell_c", "aic", "error"];
    if let Err(e) = w.write_record(header) {
        return Err(err(e));
    }
    for (name, result) in screen_all(&subset, &options) {
        let record = match result {
            Ok(r) => vec![
                name,
                r.coefficient.beta.to_string(),
                r.coefficient.se.to_string(),
                r.coefficient.z.to_string(),
                r.coefficient.p_value.to_string(),
                r.harrell_c.to_string(),
                r.aic.to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut row = vec![name];
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(e.to_string());
                row
            }
        };
        w.write_record(&record).map_err(io_err(Stage::Screen))?;
    }
    w.flush().map_err(io_err(Stage::Screen))
}

fn diagnose(
    tag: &str,
    model: &CoxFit,
    ds: &SpellDataset,
    config: &PipelineConfig,
    run: &mut Run<'_>,
) -> Result<Vec<SummaryRow>, PipelineError> {
    let c = harrell_c(model, ds).map_err(diag_err(Stage::Diagnose))?;
    let residuals = cox_snell_residuals(model, ds, config.censored_adjustment).map_err(diag_err(Stage::Diagnose))?;
    let ks = ks_statistic(&residuals.residuals, config.ks).map_err(diag_err(Stage::Diagnose))?;
    {
        let w = run.create(&format!("residuals_{tag}.csv"), Stage::Diagnose)?;
        let mut w = csv::Writer::from_writer(w);
        let write = |w: &mut csv::Writer<_>| -> Result<(), csv::Error> {
            w.write_record(["residual", "event"])?;
            for (r, e) in residuals.residuals.iter().zip(&residuals.events) {
                w.write_record([r.to_string(), u8::from(*e).to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        write(&mut w).map_err(io_err(Stage::Diagnose))?;
    }
    let spell_obs = spell_markers(model, ds).map_err(diag_err(Stage::Diagnose))?;
    let period_obs = match config.troc_variant {
        TrocVariant::Clustered => period_markers(model, ds).map_err(diag_err(Stage::Diagnose))?,
        TrocVariant::Classical => Vec::new(),
    };
    let mut rows = Vec::new();
    for &h in &config.troc.horizons {
        let curve = match config.troc_variant {
            TrocVariant::Classical => troc_classical(&spell_obs, &config.troc, h),
            TrocVariant::Clustered => troc_clustered(&period_obs, &config.troc, h),
        };
        let (tauc, troc_error) = match curve {
            Ok(curve) => {
                let w = run.create(&format!("troc_{tag}_h{h}.csv"), Stage::Diagnose)?;
                curve.write_csv(w).map_err(io_err(Stage::Diagnose))?;
                (Some(curve.tauc), None)
            }
            Err(e @ (DiagnosticError::NoEventsByHorizon(_) | DiagnosticError::NoSurvivorsAtHorizon(_))) => {
                (None, Some(e.to_string()))
            }
            Err(e) => return Err(diag_err(Stage::Diagnose)(e)),
        };
        rows.push(SummaryRow {
            horizon: h,
            tauc,
            harrell_c: c,
            aic: aic(model),
            ks_d: ks.d,
            one_minus_d: ks.one_minus_d,
            troc_error,
        });
    }
    run.json(&format!("summary_{tag}.json"), Stage::Diagnose, &rows)?;
    Ok(rows)
}

#[derive(Serialize)]
struct TermSummary {
    horizon: i64,
    mae_start: i64,
    mae: f64,
    total_actual: f64,
    total_predicted: f64,
}

fn term_structures(
    tag: &str,
    model: &CoxFit,
    ds: &SpellDataset,
    config: &PipelineConfig,
    run: &mut Run<'_>,
) -> Result<(), PipelineError> {
    let stage = Stage::TermStructure;
    let actual = actual_term_structure(ds, config.term_horizon);
    let predicted =
        predicted_term_structure(model, ds, config.term_horizon, config.averaging).map_err(fit_err(stage))?;
    actual.write_csv(run.create(&format!("term_{tag}_actual.csv"), stage)?).map_err(io_err(stage))?;
    predicted.write_csv(run.create(&format!("term_{tag}_predicted.csv"), stage)?).map_err(io_err(stage))?;
    write_overlay(&actual, &predicted, run.create(&format!("term_{tag}_overlay.csv"), stage)?)
        .map_err(io_err(stage))?;
    let mae = term_structure_mae(&actual, &predicted, config.mae_start, config.term_horizon).map_err(io_err(stage))?;
    let summary = TermSummary {
        horizon: config.term_horizon,
        mae_start: config.mae_start,
        mae,
        total_actual: actual.total(),
        total_predicted: predicted.total(),
    };
    run.json(&format!("term_{tag}.json"), stage, &summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(json: &str) -> PipelineConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn unknown_technique_names_the_supported_set() {
        let c = config(
            r#"{"input": {"kind": "panel", "path": "x.csv", "schema": {"covariates": []}}, "techniques": ["wlw"]}"#,
        );
        let err = c.validate().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("tfd, ag, pwp"), "{err}");
    }

    #[test]
    fn diagnose_without_fit_is_rejected() {
        let c = config(
            r#"{"input": {"kind": "panel", "path": "x.csv", "schema": {"covariates": []}}, "stages": ["spells", "diagnose"]}"#,
        );
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: Result<PipelineConfig, _> =
            serde_json::from_str(r#"{"input": {"kind": "synth", "spec": {}}, "bogus": 1}"#);
        assert!(r.is_err());
    }
}
