//! Loan-period panels: the raw longitudinal input to every other stage.
//!
//! A panel is a long-format table with one row per loan and month. Each row
//! carries a state label and a fixed set of real-valued covariates. Spell
//! boundaries and resolutions are *derived* from the state sequence by
//! [`crate::spells`]; the panel itself only records what was observed.
//!
//! State encoding: a row labelled `PERF` is a month in which the loan was
//! performing and contributes one counting-process interval. A `DEF`, `SET`
//! or `WO` row marks the month after the last performing month of a spell
//! and resolves it. Months spent in default may be recorded as further `DEF`
//! rows or simply left out, so period gaps are legal right after a `DEF` row
//! and nowhere else.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque loan identifier. Ordering is lexicographic.
pub type LoanId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoanState {
    Performing,
    Default,
    Settled,
    WriteOff,
}

impl LoanState {
    pub fn label(self) -> &'static str {
        match self {
            LoanState::Performing => "PERF",
            LoanState::Default => "DEF",
            LoanState::Settled => "SET",
            LoanState::WriteOff => "WO",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label.trim() {
            "PERF" => Some(LoanState::Performing),
            "DEF" => Some(LoanState::Default),
            "SET" => Some(LoanState::Settled),
            "WO" => Some(LoanState::WriteOff),
            _ => None,
        }
    }

    /// Settlement and write-off end the loan; nothing may follow them.
    pub fn is_terminal(self) -> bool {
        matches!(self, LoanState::Settled | LoanState::WriteOff)
    }
}

impl fmt::Display for LoanState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub loan_id: LoanId,
    /// Month index, starting at 1 for the first month of loan life.
    pub period: i64,
    pub covariates: Vec<f64>,
    pub state: LoanState,
}

/// Column configuration for CSV ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub covariates: Vec<String>,
    /// Calendar month index corresponding to period 0. Periods are then
    /// read as reporting months `calendar_origin + period`.
    #[serde(default)]
    pub calendar_origin: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub schema: Vec<String>,
    pub rows: Vec<PanelRow>,
    pub calendar_origin: Option<i64>,
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header mismatch: {0}")]
    Header(String),
    #[error("duplicate covariate name `{0}` in schema")]
    DuplicateSchemaName(String),
    #[error("row {row}: duplicate (loan_id, period) = ({loan_id}, {period})")]
    DuplicateRow { row: usize, loan_id: LoanId, period: i64 },
    #[error("row {row}: column `{column}` is not a finite number: `{value}`")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: unknown state label `{value}` (expected PERF, DEF, SET or WO)")]
    UnknownState { row: usize, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RowWidth { row: usize, expected: usize, found: usize },
    #[error("panel violates invariants: {0}")]
    Invalid(String),
}

impl Panel {
    /// Builds a panel, sorting rows by `(loan_id, period)` and rejecting
    /// duplicate keys or rows whose covariate width differs from the schema.
    pub fn new(schema: Vec<String>, mut rows: Vec<PanelRow>, calendar_origin: Option<i64>) -> Result<Self, PanelError> {
        check_schema_names(&schema)?;
        for (i, row) in rows.iter().enumerate() {
            if row.covariates.len() != schema.len() {
                return Err(PanelError::RowWidth { row: i + 1, expected: schema.len(), found: row.covariates.len() });
            }
        }
        rows.sort_by(|a, b| (&a.loan_id, a.period).cmp(&(&b.loan_id, b.period)));
        for w in rows.windows(2) {
            if w[0].loan_id == w[1].loan_id && w[0].period == w[1].period {
                return Err(PanelError::DuplicateRow { row: 0, loan_id: w[1].loan_id.clone(), period: w[1].period });
            }
        }
        Ok(Panel { schema, rows, calendar_origin })
    }

    pub fn n_loans(&self) -> usize {
        self.loans().count()
    }

    /// Contiguous row slices, one per loan, in loan order.
    pub fn loans(&self) -> impl Iterator<Item = &[PanelRow]> + '_ {
        self.rows.chunk_by(|a, b| a.loan_id == b.loan_id)
    }

    pub fn loan_ids(&self) -> Vec<LoanId> {
        self.loans().map(|rows| rows[0].loan_id.clone()).collect()
    }

    /// Keeps only the rows of loans for which `keep` returns true.
    pub fn filter_loans<F: Fn(&str) -> bool>(&self, keep: F) -> Panel {
        Panel {
            schema: self.schema.clone(),
            rows: self.rows.iter().filter(|r| keep(&r.loan_id)).cloned().collect(),
            calendar_origin: self.calendar_origin,
        }
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    /// Writes the panel in the ingestion CSV layout. Covariates use Rust's
    /// shortest round-trip float formatting, so re-ingesting is lossless.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["loan_id".to_string(), "period".into(), "state".into()];
        header.extend(self.schema.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = Vec::with_capacity(3 + row.covariates.len());
            rec.push(row.loan_id.clone());
            rec.push(row.period.to_string());
            rec.push(row.state.label().to_string());
            rec.extend(row.covariates.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_schema_names(schema: &[String]) -> Result<(), PanelError> {
    let mut seen = HashSet::new();
    for name in schema {
        if !seen.insert(name.as_str()) {
            return Err(PanelError::DuplicateSchemaName(name.clone()));
        }
    }
    Ok(())
}

/// Reads a panel from comma-delimited text.
///
/// The header must start with `loan_id,period,state` followed by exactly the
/// covariate columns named in `config` (in any order). Row numbers in errors
/// are 1-based file line numbers, the header being line 1.
pub fn ingest_panel<R: Read>(source: R, config: &SchemaConfig) -> Result<Panel, PanelError> {
    check_schema_names(&config.covariates)?;
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(true).from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "loan_id" || header[1] != "period" || header[2] != "state" {
        return Err(PanelError::Header(format!(
            "first columns must be loan_id,period,state; found {}",
            header.iter().take(3).cloned().collect::<Vec<_>>().join(",")
        )));
    }
    let file_cols = &header[3..];
    // position of each schema covariate within the file's covariate columns
    let mut col_of = Vec::with_capacity(config.covariates.len());
    for name in &config.covariates {
        match file_cols.iter().position(|c| c == name) {
            Some(i) => col_of.push(i + 3),
            None => return Err(PanelError::Header(format!("missing covariate column `{name}`"))),
        }
    }
    if file_cols.len() != config.covariates.len() {
        let extra: Vec<_> = file_cols.iter().filter(|c| !config.covariates.contains(c)).cloned().collect();
        return Err(PanelError::Header(format!("unexpected columns: {}", extra.join(","))));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(PanelError::RowWidth { row: line, expected: header.len(), found: record.len() });
        }
        let loan_id = record[0].to_string();
        let period: i64 = record[1].parse().map_err(|_| PanelError::NonNumeric {
            row: line,
            column: "period".into(),
            value: record[1].to_string(),
        })?;
        let state = LoanState::from_label(&record[2])
            .ok_or_else(|| PanelError::UnknownState { row: line, value: record[2].to_string() })?;
        let mut covariates = Vec::with_capacity(col_of.len());
        for (&c, name) in col_of.iter().zip(&config.covariates) {
            let cell = &record[c];
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => covariates.push(v),
                _ => return Err(PanelError::NonNumeric { row: line, column: name.clone(), value: cell.to_string() }),
            }
        }
        if !seen.insert((loan_id.clone(), period)) {
            return Err(PanelError::DuplicateRow { row: line, loan_id, period });
        }
        rows.push(PanelRow { loan_id, period, covariates, state });
    }
    Panel::new(config.covariates.clone(), rows, config.calendar_origin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    SchemaWidth,
    DuplicateSchemaName,
    DuplicateKey,
    Ordering,
    NonPositivePeriod,
    NonFinite,
    GapWithinSpell,
    AfterTerminal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub loan_id: LoanId,
    pub kind: ViolationKind,
    pub description: String,
}

/// Checks every panel invariant and returns the violations found. An empty
/// list means the panel is well-formed.
pub fn validate_panel(panel: &Panel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |loan_id: &str, kind, description: String| {
        out.push(Violation { loan_id: loan_id.to_string(), kind, description })
    };

    let mut seen = HashSet::new();
    for name in &panel.schema {
        if !seen.insert(name) {
            push("", ViolationKind::DuplicateSchemaName, format!("schema name `{name}` repeated"));
        }
    }
    for row in &panel.rows {
        if row.covariates.len() != panel.schema.len() {
            push(
                &row.loan_id,
                ViolationKind::SchemaWidth,
                format!(
                    "period {} has {} covariates, schema has {}",
                    row.period,
                    row.covariates.len(),
                    panel.schema.len()
                ),
            );
        }
        if row.period < 1 {
            push(&row.loan_id, ViolationKind::NonPositivePeriod, format!("period {} < 1", row.period));
        }
        if row.covariates.iter().any(|v| !v.is_finite()) {
            push(&row.loan_id, ViolationKind::NonFinite, format!("non-finite covariate at period {}", row.period));
        }
    }

    let mut finished = HashSet::new();
    for w in panel.rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.loan_id != b.loan_id {
            if a.loan_id > b.loan_id {
                push(&b.loan_id, ViolationKind::Ordering, format!("loan follows `{}`", a.loan_id));
            }
            if !finished.insert(a.loan_id.clone()) {
                push(&a.loan_id, ViolationKind::Ordering, "rows of this loan are not contiguous".into());
            }
            continue;
        }
        if b.period == a.period {
            push(&a.loan_id, ViolationKind::DuplicateKey, format!("period {} repeated", a.period));
        } else if b.period < a.period {
            push(&a.loan_id, ViolationKind::Ordering, format!("period {} follows {}", b.period, a.period));
        } else {
            if a.state.is_terminal() {
                push(
                    &a.loan_id,
                    ViolationKind::AfterTerminal,
                    format!("period {} follows {} at period {}", b.period, a.state, a.period),
                );
            } else if b.period > a.period + 1 && a.state == LoanState::Performing {
                push(
                    &a.loan_id,
                    ViolationKind::GapWithinSpell,
                    format!("performing at period {} but next row is period {}", a.period, b.period),
                );
            }
        }
    }
    out
}
