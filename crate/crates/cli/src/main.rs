use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spellhaz::cox::{fit, predict_survival, FitError, FitOptions, Ties};
use spellhaz::diagnostics::{
    cox_snell_residuals, harrell_c, ks_statistic, period_markers, screen_all, spell_markers, troc_classical,
    troc_clustered, CensoredAdjustment, ClusterWeighting, DiagnosticError, KsMode, ThresholdGrid, TrocConfig,
    TrocVariant,
};
use spellhaz::nonparametric::{
    actual_term_structure, predicted_term_structure, term_structure_mae, write_overlay, PortfolioAveraging,
};
use spellhaz::panel::{ingest_panel, validate_panel, Panel, PanelError, SchemaConfig};
use spellhaz::pipeline::{load_config, run_pipeline, FitReport, PipelineError};
use spellhaz::sampling::{avg_discrepancy, column_strata, resolution_rate, split_sample, status_strata};
use spellhaz::spells::{build_spells, spell_summary, ResolutionType, SpellDataset, SpellError, Technique};
use spellhaz::synth::{generate, GeneratorSpec};

#[derive(Parser)]
#[command(name = "spellhaz", version, about = "Recurrent-event survival models for loan panels")]
struct Cli {
    /// Seed for sampling, generation and seeded reference samples.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for outputs; relative output paths are placed inside it.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "panel.csv")]
        out: PathBuf,
    },
    /// Read and validate a panel, reporting every violation.
    Ingest {
        #[command(flatten)]
        input: PanelArgs,
        /// Write the panel back out, sorted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a panel into a spell dataset.
    BuildSpells {
        #[command(flatten)]
        input: PanelArgs,
        #[arg(long)]
        technique: Technique,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a panel into training and validation sets by loan.
    Sample {
        #[command(flatten)]
        input: PanelArgs,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        /// `resolution` for final-status strata, or a covariate column.
        #[arg(long, default_value = "resolution")]
        strata_col: String,
        /// Technique used for the resolution-rate comparison.
        #[arg(long, default_value = "ag")]
        technique: Technique,
    },
    /// Fit a Cox model.
    Fit {
        #[command(flatten)]
        input: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-factor fits ranked by concordance.
    Screen {
        #[command(flatten)]
        input: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "screen.csv")]
        out: PathBuf,
    },
    /// Concordance, residual fit and tROC curves.
    Diagnose {
        #[command(flatten)]
        input: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Fit JSON to evaluate; fits on the input when absent.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![3i64, 12, 24, 36])]
        horizons: Vec<i64>,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long, default_value = "classical")]
        troc: TrocVariant,
        /// Weight clustered within-spell averages by spell length.
        #[arg(long)]
        spell_length_weights: bool,
        /// Use every distinct marker as a threshold instead of percentiles.
        #[arg(long)]
        all_thresholds: bool,
        /// Compare residuals with a seeded exponential sample.
        #[arg(long)]
        two_sample: bool,
    },
    /// Actual and predicted term-structures of default probability.
    TermStructure {
        #[command(flatten)]
        input: PanelArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        horizon: i64,
        #[arg(long, default_value_t = 1)]
        mae_start: i64,
        /// Average over every spell instead of those observed at each month.
        #[arg(long)]
        all_spells: bool,
    },
    /// Run every stage from a JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct PanelArgs {
    /// Panel CSV with `loan_id,period,state` and covariate columns.
    #[arg(long)]
    panel: PathBuf,
    /// Schema JSON; without it every extra column is a covariate.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value = "pwp")]
    technique: Technique,
    #[arg(long, default_value = "efron")]
    ties: Ties,
    /// Comma-separated covariates; all when absent.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

impl ModelArgs {
    fn options(&self) -> FitOptions {
        FitOptions { ties: self.ties, covariates: self.covariates.clone(), ..FitOptions::default() }
    }
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string() }
    }

    fn other(message: impl ToString) -> Self {
        Failure { code: 1, message: message.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::other(e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::other(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::validation(e)
    }
}

impl From<PanelError> for Failure {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::Io(_) => Failure::other(e),
            _ => Failure::validation(e),
        }
    }
}

impl From<SpellError> for Failure {
    fn from(e: SpellError) -> Self {
        match e {
            SpellError::InvalidPanel { .. } => Failure::validation(e),
            _ => Failure::other(e),
        }
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::UnknownCovariate(_) => Failure::validation(e),
            _ => Failure::other(e),
        }
    }
}

impl From<DiagnosticError> for Failure {
    fn from(e: DiagnosticError) -> Self {
        match e {
            DiagnosticError::Fit(e) => e.into(),
            DiagnosticError::Lambda(_) => Failure::validation(e),
            _ => Failure::other(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { code: if e.is_validation() { 2 } else { 1 }, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn output(out_dir: &Path, path: &Path) -> Result<BufWriter<File>, Failure> {
    let path = out_dir.join(path);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let file = File::open(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn load_panel(args: &PanelArgs) -> Result<Panel, Failure> {
    let mut bytes = Vec::new();
    File::open(&args.panel)
        .map_err(|e| Failure::other(format!("{}: {e}", args.panel.display())))?
        .read_to_end(&mut bytes)?;
    let schema = match &args.schema {
        Some(path) => read_json::<SchemaConfig>(path)?,
        None => {
            let header = csv::Reader::from_reader(bytes.as_slice()).headers()?.clone();
            let covariates = header.iter().skip(3).map(str::to_string).collect();
            SchemaConfig { covariates, calendar_origin: None }
        }
    };
    Ok(ingest_panel(bytes.as_slice(), &schema)?)
}

fn load_spells(args: &PanelArgs, technique: Technique) -> Result<SpellDataset, Failure> {
    Ok(build_spells(&load_panel(args)?, technique)?)
}

fn load_or_fit(ds: &SpellDataset, model: &ModelArgs, fit_path: Option<&Path>) -> Result<spellhaz::CoxFit, Failure> {
    match fit_path {
        Some(path) => {
            let report: FitReport = read_json(path)?;
            if report.technique != ds.technique {
                return Err(Failure::validation(format!(
                    "fit is for technique {}, data were built for {}",
                    report.technique.name(),
                    ds.technique.name()
                )));
            }
            Ok(report.into_fit())
        }
        None => Ok(fit(ds, &model.options())?),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out_dir = cli.out_dir.as_path();
    match cli.command {
        Command::Synth { spec, out } => {
            let mut spec: GeneratorSpec = read_json(&spec)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let panel = generate(&spec).map_err(Failure::validation)?;
            panel.write_csv(output(out_dir, &out)?)?;
            println!("{} loans, {} rows", panel.n_loans(), panel.rows.len());
        }
        Command::Ingest { input, out } => {
            let panel = load_panel(&input)?;
            let violations = validate_panel(&panel);
            for v in &violations {
                eprintln!("loan {}: {}", v.loan_id, v.description);
            }
            println!("{} loans, {} rows, {} violation(s)", panel.n_loans(), panel.rows.len(), violations.len());
            if let Some(out) = out {
                panel.write_csv(output(out_dir, &out)?)?;
            }
            if !violations.is_empty() {
                return Err(Failure::validation(format!("panel has {} violation(s)", violations.len())));
            }
        }
        Command::BuildSpells { input, technique, out } => {
            let ds = load_spells(&input, technique)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("spells_{}.csv", technique.name())));
            ds.write_csv(output(out_dir, &out)?)?;
            println!("{}", serde_json::to_string_pretty(&spell_summary(&ds))?);
        }
        Command::Sample { input, train_fraction, strata_col, technique } => {
            let panel = load_panel(&input)?;
            let strata = match strata_col.as_str() {
                "resolution" => status_strata(&panel),
                column => column_strata(&panel, column).map_err(Failure::validation)?,
            };
            let (train, valid) =
                split_sample(&panel, train_fraction, &strata, cli.seed.unwrap_or(0)).map_err(Failure::validation)?;
            train.write_csv(output(out_dir, Path::new("train.csv"))?)?;
            valid.write_csv(output(out_dir, Path::new("valid.csv"))?)?;
            let sets = [&panel, &train, &valid].map(|p| build_spells(p, technique));
            let [full, train_ds, valid_ds] = sets;
            let (full, train_ds, valid_ds) = (full?, train_ds?, valid_ds?);
            let origin = panel.calendar_origin;
            let mut report = Vec::new();
            for kappa in
                [ResolutionType::Default, ResolutionType::Settled, ResolutionType::WriteOff, ResolutionType::Censored]
            {
                let s: Vec<_> =
                    [&full, &train_ds, &valid_ds].iter().map(|d| resolution_rate(d, kappa, origin)).collect();
                if kappa == ResolutionType::Default {
                    for (name, series) in ["full", "train", "valid"].iter().zip(&s) {
                        series.write_csv(output(out_dir, Path::new(&format!("resolution_rate_{name}.csv")))?)?;
                    }
                }
                report.push(serde_json::json!({
                    "resolution": kappa,
                    "full_vs_train": avg_discrepancy(&s[0], &s[1]).ok(),
                    "full_vs_valid": avg_discrepancy(&s[0], &s[2]).ok(),
                    "train_vs_valid": avg_discrepancy(&s[1], &s[2]).ok(),
                }));
            }
            println!("train {} loans, validation {} loans", train.n_loans(), valid.n_loans());
            let mut w = output(out_dir, Path::new("sampling.json"))?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
        }
        Command::Fit { input, model, out } => {
            let ds = load_spells(&input, model.technique)?;
            let fitted = fit(&ds, &model.options())?;
            let report = FitReport::from(&fitted);
            for c in &report.coefficients {
                println!("{:<24} {:>12.6} {:>10.6} {:>8.3} {:>10.4}", c.name, c.beta, c.se, c.z, c.p_value);
            }
            println!("log PL {:.6}  AIC {:.6}  converged {}", report.log_pl, report.aic, report.converged);
            let out = out.unwrap_or_else(|| PathBuf::from(format!("fit_{}.json", model.technique.name())));
            let mut w = output(out_dir, &out)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
        }
        Command::Screen { input, model, out } => {
            let ds = load_spells(&input, model.technique)?;
            let ds = match &model.covariates {
                Some(names) => ds
                    .select_covariates(names)
                    .ok_or_else(|| Failure::validation(format!("unknown covariate in {names:?}")))?,
                None => ds,
            };
            let options = FitOptions { covariates: None, ..model.options() };
            let mut results = screen_all(&ds, &options);
            results.sort_by(|a, b| match (&a.1, &b.1) {
                (Ok(x), Ok(y)) => y.harrell_c.total_cmp(&x.harrell_c),
                (Ok(_), Err(_)) => std::cmp::Ordering::Less,
                (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            });
            let mut w = csv::Writer::from_writer(output(out_dir, &out)?);
            w.write_record(["covariate", "beta", "se", "z", "p_value", "harrell_c", "aic", "error"])?;
            for (name, r) in results {
                match r {
                    Ok(r) => {
                        println!("{name:<24} c = {:.6}", r.harrell_c);
                        w.write_record([
                            name,
                            r.coefficient.beta.to_string(),
                            r.coefficient.se.to_string(),
                            r.coefficient.z.to_string(),
                            r.coefficient.p_value.to_string(),
                            r.harrell_c.to_string(),
                            r.aic.to_string(),
                            String::new(),
                        ])?;
                    }
                    Err(e) => {
                        println!("{name:<24} {e}");
                        let blanks = std::iter::repeat_n(String::new(), 6);
                        w.write_record(std::iter::once(name).chain(blanks).chain(std::iter::once(e.to_string())))?;
                    }
                }
            }
            w.flush()?;
        }
        Command::Diagnose {
            input,
            model,
            fit,
            horizons,
            lambda,
            troc,
            spell_length_weights,
            all_thresholds,
            two_sample,
        } => {
            let ds = load_spells(&input, model.technique)?;
            let fitted = load_or_fit(&ds, &model, fit.as_deref())?;
            let grid = if all_thresholds { ThresholdGrid::AllUnique } else { ThresholdGrid::Quantiles { step: 0.01 } };
            let cluster_weighting =
                if spell_length_weights { ClusterWeighting::SpellLength } else { ClusterWeighting::Qualifying };
            let config = TrocConfig { lambda, horizons: horizons.clone(), grid, cluster_weighting };
            let c = harrell_c(&fitted, &ds)?;
            let residuals = cox_snell_residuals(&fitted, &ds, CensoredAdjustment::Median)?;
            let mode = if two_sample { KsMode::TwoSample { seed: cli.seed.unwrap_or(0) } } else { KsMode::OneSample };
            let ks = ks_statistic(&residuals.residuals, mode)?;
            let spell_obs = spell_markers(&fitted, &ds)?;
            let period_obs = period_markers(&fitted, &ds)?;
            let tag = model.technique.name();
            let mut rows = Vec::new();
            for &h in &horizons {
                let curve = match troc {
                    TrocVariant::Classical => troc_classical(&spell_obs, &config, h),
                    TrocVariant::Clustered => troc_clustered(&period_obs, &config, h),
                };
                let tauc = match curve {
                    Ok(curve) => {
                        curve.write_csv(output(out_dir, Path::new(&format!("troc_{tag}_h{h}.csv")))?)?;
                        Some(curve.tauc)
                    }
                    Err(e @ (DiagnosticError::NoEventsByHorizon(_) | DiagnosticError::NoSurvivorsAtHorizon(_))) => {
                        eprintln!("horizon {h}: {e}");
                        None
                    }
                    Err(e) => return Err(e.into()),
                };
                rows.push(serde_json::json!({
                    "horizon": h,
                    "tauc": tauc,
                    "harrell_c": c,
                    "aic": spellhaz::aic(&fitted),
                    "ks_d": ks.d,
                    "one_minus_d": ks.one_minus_d,
                }));
            }
            let text = serde_json::to_string_pretty(&rows)?;
            println!("{text}");
            let mut w = output(out_dir, Path::new(&format!("summary_{tag}.json")))?;
            writeln!(w, "{text}")?;
        }
        Command::TermStructure { input, model, fit, horizon, mae_start, all_spells } => {
            let ds = load_spells(&input, model.technique)?;
            let fitted = load_or_fit(&ds, &model, fit.as_deref())?;
            // surface an unusable fit before writing anything
            if let Some(spell) = ds.spells().next() {
                predict_survival(&fitted, &ds, spell)?;
            }
            let averaging = if all_spells { PortfolioAveraging::AllSpells } else { PortfolioAveraging::CoveringSpells };
            let actual = actual_term_structure(&ds, horizon);
            let predicted = predicted_term_structure(&fitted, &ds, horizon, averaging)?;
            let tag = model.technique.name();
            actual.write_csv(output(out_dir, Path::new(&format!("term_{tag}_actual.csv")))?)?;
            predicted.write_csv(output(out_dir, Path::new(&format!("term_{tag}_predicted.csv")))?)?;
            write_overlay(&actual, &predicted, output(out_dir, Path::new(&format!("term_{tag}_overlay.csv")))?)?;
            let mae = term_structure_mae(&actual, &predicted, mae_start, horizon).map_err(Failure::validation)?;
            println!("MAE over {mae_start}..={horizon}: {mae:.6e}");
        }
        Command::Pipeline { config } => {
            let (mut cfg, bytes) = load_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
                if let spellhaz::pipeline::InputConfig::Synth { spec } = &mut cfg.input {
                    spec.seed = seed;
                }
            }
            let base = config.parent().unwrap_or(Path::new("."));
            let report = run_pipeline(&cfg, &bytes, base, out_dir)?;
            for (technique, rows) in &report.summaries {
                for r in rows {
                    let tauc = r.tauc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
                    println!(
                        "{:<4} h={:<3} tAUC {tauc}  c {:.4}  1-D {:.4}",
                        technique.name(),
                        r.horizon,
                        r.harrell_c,
                        r.one_minus_d
                    );
                }
            }
            println!("{} outputs in {} (config {})", report.outputs.len(), out_dir.display(), report.config_sha256);
        }
    }
    Ok(())
}
