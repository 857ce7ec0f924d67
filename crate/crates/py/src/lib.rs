//! Python bindings for the `spellhaz` survival engine.
//!
//! ```python
//! import spellhaz_py as sh
//! panel = sh.Panel.from_csv("panel.csv")
//! spells = panel.build_spells("pwp")
//! model = sh.fit(spells)
//! print(model.coefficients(), model.harrell_c(spells))
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use spellhaz::cox::{self, CoxFit, FitError, FitOptions, Ties};
use spellhaz::diagnostics::{self, CensoredAdjustment, ClusterWeighting, DiagnosticError, KsMode, TrocConfig};
use spellhaz::nonparametric::{self, PortfolioAveraging, TermStructure};
use spellhaz::panel::{self as panel_mod, SchemaConfig};
use spellhaz::pipeline::{self, FitReport};
use spellhaz::sampling;
use spellhaz::spells::{self, Technique};
use spellhaz::synth::{self, GeneratorSpec};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn fit_err(e: FitError) -> PyErr {
    match e {
        FitError::UnknownCovariate(_) => value_err(e),
        _ => runtime_err(e),
    }
}

fn diag_err(e: DiagnosticError) -> PyErr {
    match e {
        DiagnosticError::Fit(e) => fit_err(e),
        DiagnosticError::Lambda(_) => value_err(e),
        _ => runtime_err(e),
    }
}

/// Serializes through JSON into plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn writer(path: &Path) -> PyResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(runtime_err)?))
}

fn technique(name: &str) -> PyResult<Technique> {
    name.parse().map_err(value_err)
}

/// A loan-month panel.
#[pyclass(name = "Panel", module = "spellhaz_py")]
struct PyPanel {
    inner: panel_mod::Panel,
}

#[pymethods]
impl PyPanel {
    /// Reads a panel CSV. Without `covariates`, every column after
    /// `loan_id,period,state` is a covariate.
    #[staticmethod]
    #[pyo3(signature = (path, covariates=None, calendar_origin=None))]
    fn from_csv(path: PathBuf, covariates: Option<Vec<String>>, calendar_origin: Option<i64>) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(value_err)?;
        let covariates = match covariates {
            Some(c) => c,
            None => {
                let mut reader = csv_header(&bytes)?;
                reader.drain(..3.min(reader.len()));
                reader
            }
        };
        let config = SchemaConfig { covariates, calendar_origin };
        let inner = panel_mod::ingest_panel(bytes.as_slice(), &config).map_err(value_err)?;
        Ok(PyPanel { inner })
    }

    /// Simulates a panel from a generator spec given as a JSON string.
    #[staticmethod]
    fn synth(spec_json: &str) -> PyResult<Self> {
        let spec: GeneratorSpec = serde_json::from_str(spec_json).map_err(value_err)?;
        Ok(PyPanel { inner: synth::generate(&spec).map_err(value_err)? })
    }

    #[getter]
    fn n_loans(&self) -> usize {
        self.inner.n_loans()
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.rows.len()
    }

    #[getter]
    fn schema(&self) -> Vec<String> {
        self.inner.schema.clone()
    }

    /// Invariant violations as `(loan_id, description)` pairs.
    fn validate(&self) -> Vec<(String, String)> {
        panel_mod::validate_panel(&self.inner).into_iter().map(|v| (v.loan_id, v.description)).collect()
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(writer(&path)?).map_err(runtime_err)
    }

    fn build_spells(&self, technique_name: &str) -> PyResult<PySpellDataset> {
        let inner = spells::build_spells(&self.inner, technique(technique_name)?).map_err(value_err)?;
        Ok(PySpellDataset { inner })
    }

    /// Splits by loan into `(train, validation)`, stratified by final
    /// status or by a covariate column.
    #[pyo3(signature = (train_fraction=0.7, seed=0, strata="resolution"))]
    fn split(&self, train_fraction: f64, seed: u64, strata: &str) -> PyResult<(PyPanel, PyPanel)> {
        let labels = match strata {
            "resolution" => sampling::status_strata(&self.inner),
            column => sampling::column_strata(&self.inner, column).map_err(value_err)?,
        };
        let (t, v) = sampling::split_sample(&self.inner, train_fraction, &labels, seed).map_err(value_err)?;
        Ok((PyPanel { inner: t }, PyPanel { inner: v }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Panel(n_loans={}, n_rows={}, schema={:?})",
            self.inner.n_loans(),
            self.inner.rows.len(),
            self.inner.schema
        )
    }
}

fn csv_header(bytes: &[u8]) -> PyResult<Vec<String>> {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let line = std::str::from_utf8(first).map_err(value_err)?.trim_end_matches('\r');
    Ok(line.split(',').map(|s| s.trim().to_string()).collect())
}

/// Counting-process spell records under one technique.
#[pyclass(name = "SpellDataset", module = "spellhaz_py")]
struct PySpellDataset {
    inner: spells::SpellDataset,
}

#[pymethods]
impl PySpellDataset {
    #[getter]
    fn technique(&self) -> &'static str {
        self.inner.technique.name()
    }

    #[getter]
    fn n_spells(&self) -> usize {
        self.inner.n_spells()
    }

    #[getter]
    fn n_events(&self) -> usize {
        self.inner.n_events()
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn schema(&self) -> Vec<String> {
        self.inner.schema.clone()
    }

    /// Records as a dict of equal-length columns.
    fn columns<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let r = &self.inner.records;
        d.set_item("loan_id", r.iter().map(|x| x.loan_id.clone()).collect::<Vec<_>>())?;
        d.set_item("period", r.iter().map(|x| x.period).collect::<Vec<_>>())?;
        d.set_item("spell_num", r.iter().map(|x| x.spell_num).collect::<Vec<_>>())?;
        d.set_item("spell_num_binned", r.iter().map(|x| x.spell_num_binned).collect::<Vec<_>>())?;
        d.set_item("entry", r.iter().map(|x| x.entry).collect::<Vec<_>>())?;
        d.set_item("stop", r.iter().map(|x| x.stop).collect::<Vec<_>>())?;
        d.set_item("status", r.iter().map(|x| x.status).collect::<Vec<_>>())?;
        d.set_item("resolution", r.iter().map(|x| x.resolution.code()).collect::<Vec<_>>())?;
        d.set_item("spell_age", r.iter().map(|x| x.spell_age).collect::<Vec<_>>())?;
        for (k, name) in self.inner.schema.iter().enumerate() {
            d.set_item(name, r.iter().map(|x| x.covariates[k]).collect::<Vec<_>>())?;
        }
        Ok(d)
    }

    /// Max-spell histogram and resolution counts.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &spells::spell_summary(&self.inner))
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(writer(&path)?).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SpellDataset(technique={}, n_spells={}, n_events={})",
            self.inner.technique.name(),
            self.inner.n_spells(),
            self.inner.n_events()
        )
    }
}

/// A fitted Cox model.
#[pyclass(name = "CoxModel", module = "spellhaz_py")]
struct PyCoxModel {
    inner: CoxFit,
}

#[pymethods]
impl PyCoxModel {
    /// Rebuilds a model from a fit JSON written by the pipeline or CLI.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let report: FitReport = serde_json::from_str(text).map_err(value_err)?;
        Ok(PyCoxModel { inner: report.into_fit() })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&FitReport::from(&self.inner)).map_err(runtime_err)
    }

    #[getter]
    fn technique(&self) -> &'static str {
        self.inner.technique.name()
    }

    #[getter]
    fn schema(&self) -> Vec<String> {
        self.inner.schema.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn se(&self) -> Vec<f64> {
        self.inner.std_errors()
    }

    #[getter]
    fn vcov(&self) -> Vec<Vec<f64>> {
        self.inner.vcov.clone()
    }

    #[getter]
    fn log_pl(&self) -> f64 {
        self.inner.log_pl
    }

    #[getter]
    fn aic(&self) -> f64 {
        cox::aic(&self.inner)
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn coefficients<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.coefficients())
    }

    /// Breslow baseline per stratum.
    fn baseline<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.baseline)
    }

    fn harrell_c(&self, ds: &PySpellDataset) -> PyResult<f64> {
        diagnostics::harrell_c(&self.inner, &ds.inner).map_err(diag_err)
    }

    /// Cox-Snell residuals and event flags per spell.
    #[pyo3(signature = (ds, median_adjust=true))]
    fn cox_snell(&self, ds: &PySpellDataset, median_adjust: bool) -> PyResult<(Vec<f64>, Vec<bool>)> {
        let adjust = if median_adjust { CensoredAdjustment::Median } else { CensoredAdjustment::None };
        let r = diagnostics::cox_snell_residuals(&self.inner, &ds.inner, adjust).map_err(diag_err)?;
        Ok((r.residuals, r.events))
    }

    /// Survival curve `(times, survival)` of one spell.
    fn predict_survival(&self, ds: &PySpellDataset, loan_id: &str, spell_num: u32) -> PyResult<(Vec<i64>, Vec<f64>)> {
        let spell = ds
            .inner
            .spells()
            .find(|s| s[0].loan_id == loan_id && s[0].spell_num == spell_num)
            .ok_or_else(|| value_err(format!("no spell ({loan_id}, {spell_num})")))?;
        let curve = cox::predict_survival(&self.inner, &ds.inner, spell).map_err(fit_err)?;
        Ok((curve.times, curve.surv))
    }

    fn __repr__(&self) -> String {
        format!("CoxModel(technique={}, schema={:?}, beta={:?})", self.technique(), self.inner.schema, self.inner.beta)
    }
}

/// Fits a Cox model to a spell dataset.
#[pyfunction]
#[pyo3(signature = (ds, ties="efron", covariates=None, max_iter=25, tol=1e-9))]
fn fit(
    ds: &PySpellDataset,
    ties: &str,
    covariates: Option<Vec<String>>,
    max_iter: usize,
    tol: f64,
) -> PyResult<PyCoxModel> {
    let ties: Ties = ties.parse().map_err(value_err)?;
    let options = FitOptions { ties, max_iter, tol, covariates };
    Ok(PyCoxModel { inner: cox::fit(&ds.inner, &options).map_err(fit_err)? })
}

/// One-covariate fits: `[(name, coefficient dict, c)]`, errors as `None`.
#[pyfunction]
fn screen<'py>(
    py: Python<'py>,
    ds: &PySpellDataset,
) -> PyResult<Vec<(String, Option<Bound<'py, PyAny>>, Option<f64>)>> {
    diagnostics::screen_all(&ds.inner, &FitOptions::default())
        .into_iter()
        .map(|(name, r)| match r {
            Ok(r) => Ok((name, Some(to_py(py, &r.coefficient)?), Some(r.harrell_c))),
            Err(_) => Ok((name, None, None)),
        })
        .collect()
}

/// KS distance of residuals from the unit exponential: `(D, 1 - D)`.
#[pyfunction]
#[pyo3(signature = (residuals, two_sample=false, seed=0))]
fn ks_statistic(residuals: Vec<f64>, two_sample: bool, seed: u64) -> PyResult<(f64, f64)> {
    let mode = if two_sample { KsMode::TwoSample { seed } } else { KsMode::OneSample };
    let r = diagnostics::ks_statistic(&residuals, mode).map_err(diag_err)?;
    Ok((r.d, r.one_minus_d))
}

/// tROC curve of a model's linear predictor at one horizon, as a dict with
/// `thresholds`, `fpr`, `tpr`, `fpr_raw`, `tpr_raw` and `tauc`.
#[pyfunction]
#[pyo3(signature = (model, ds, horizon, variant="classical", lambda_n=0.05, spell_length_weights=false))]
fn troc<'py>(
    py: Python<'py>,
    model: &PyCoxModel,
    ds: &PySpellDataset,
    horizon: i64,
    variant: &str,
    lambda_n: f64,
    spell_length_weights: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let config = TrocConfig {
        lambda: lambda_n,
        horizons: vec![horizon],
        cluster_weighting: if spell_length_weights {
            ClusterWeighting::SpellLength
        } else {
            ClusterWeighting::Qualifying
        },
        ..TrocConfig::default()
    };
    let curve = match variant.parse().map_err(value_err)? {
        diagnostics::TrocVariant::Classical => {
            let obs = diagnostics::spell_markers(&model.inner, &ds.inner).map_err(diag_err)?;
            diagnostics::troc_classical(&obs, &config, horizon)
        }
        diagnostics::TrocVariant::Clustered => {
            let obs = diagnostics::period_markers(&model.inner, &ds.inner).map_err(diag_err)?;
            diagnostics::troc_clustered(&obs, &config, horizon)
        }
    }
    .map_err(diag_err)?;
    let d = PyDict::new(py);
    d.set_item("thresholds", curve.thresholds.clone())?;
    d.set_item("fpr", curve.points.iter().map(|p| p.0).collect::<Vec<_>>())?;
    d.set_item("tpr", curve.points.iter().map(|p| p.1).collect::<Vec<_>>())?;
    d.set_item("fpr_raw", curve.raw.iter().map(|p| p.0).collect::<Vec<_>>())?;
    d.set_item("tpr_raw", curve.raw.iter().map(|p| p.1).collect::<Vec<_>>())?;
    d.set_item("tauc", curve.tauc)?;
    Ok(d)
}

fn term_pair(ts: TermStructure) -> (Vec<i64>, Vec<f64>) {
    (ts.times, ts.probs)
}

/// Kaplan-Meier event probabilities `(t, f)` on `1..=horizon`.
#[pyfunction]
fn actual_term_structure(ds: &PySpellDataset, horizon: i64) -> (Vec<i64>, Vec<f64>) {
    term_pair(nonparametric::actual_term_structure(&ds.inner, horizon))
}

/// Portfolio-average model event probabilities `(t, f)` on `1..=horizon`.
#[pyfunction]
#[pyo3(signature = (model, ds, horizon, all_spells=false))]
fn predicted_term_structure(
    model: &PyCoxModel,
    ds: &PySpellDataset,
    horizon: i64,
    all_spells: bool,
) -> PyResult<(Vec<i64>, Vec<f64>)> {
    let averaging = if all_spells { PortfolioAveraging::AllSpells } else { PortfolioAveraging::CoveringSpells };
    let ts = nonparametric::predicted_term_structure(&model.inner, &ds.inner, horizon, averaging).map_err(fit_err)?;
    Ok(term_pair(ts))
}

/// Runs the full pipeline from a config file; returns the output paths.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, seed=None))]
fn run_pipeline(py: Python<'_>, config_path: PathBuf, out_dir: PathBuf, seed: Option<u64>) -> PyResult<Vec<PathBuf>> {
    let (mut config, bytes) = pipeline::load_config(&config_path).map_err(value_err)?;
    if let Some(seed) = seed {
        config.seed = seed;
        if let pipeline::InputConfig::Synth { spec } = &mut config.input {
            spec.seed = seed;
        }
    }
    let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let report = py.detach(|| pipeline::run_pipeline(&config, &bytes, &base, &out_dir)).map_err(|e| {
        if e.is_validation() {
            value_err(e)
        } else {
            runtime_err(e)
        }
    })?;
    Ok(report.outputs)
}

#[pymodule]
fn spellhaz_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PySpellDataset>()?;
    m.add_class::<PyCoxModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(screen, m)?)?;
    m.add_function(wrap_pyfunction!(ks_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(troc, m)?)?;
    m.add_function(wrap_pyfunction!(actual_term_structure, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_term_structure, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
