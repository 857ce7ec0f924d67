//! Counting-process spell datasets under the TFD, AG and PWP layouts.
//!
//! Every performing panel row becomes one monthly interval `(t-1, t]`.
//! The layouts differ only in which spells are kept and which clock the
//! interval endpoints are measured on:
//!
//! | layout | spells kept | clock                                   |
//! |--------|-------------|-----------------------------------------|
//! | TFD    | first only  | loan age (left truncation preserved)    |
//! | AG     | all         | loan age, never reset                   |
//! | PWP    | all         | spell age, reset to 0 at each new spell |

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{validate_panel, LoanId, LoanState, Panel, PanelRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Tfd,
    Ag,
    Pwp,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::Tfd, Technique::Ag, Technique::Pwp];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Tfd => "tfd",
            Technique::Ag => "ag",
            Technique::Pwp => "pwp",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown technique `{0}`; supported: tfd, ag, pwp")]
pub struct UnknownTechnique(pub String);

impl FromStr for Technique {
    type Err = UnknownTechnique;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tfd" => Ok(Technique::Tfd),
            "ag" => Ok(Technique::Ag),
            "pwp" => Ok(Technique::Pwp),
            other => Err(UnknownTechnique(other.to_string())),
        }
    }
}

/// How a performing spell ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResolutionType {
    Default = 1,
    Settled = 2,
    WriteOff = 3,
    Censored = 4,
}

impl ResolutionType {
    pub const ALL: [ResolutionType; 4] =
        [ResolutionType::Default, ResolutionType::Settled, ResolutionType::WriteOff, ResolutionType::Censored];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn is_censored(self) -> bool {
        self == ResolutionType::Censored
    }
}

impl fmt::Display for ResolutionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResolutionType::Default => "Default",
            ResolutionType::Settled => "Settled",
            ResolutionType::WriteOff => "WriteOff",
            ResolutionType::Censored => "Censored",
        };
        f.write_str(s)
    }
}

/// Highest spell number given its own PWP stratum; later spells share it.
pub const MAX_SPELL_BIN: u32 = 4;

/// One monthly counting-process interval of a spell.
///
/// `entry`/`stop` bound this interval on the layout's clock, whereas
/// `spell_entry`/`spell_stop` repeat the bounds of the whole spell on every
/// row, as in the tabular layouts used for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpellRecord {
    pub loan_id: LoanId,
    /// Panel period the interval was built from.
    pub period: i64,
    pub spell_num: u32,
    pub spell_num_binned: u32,
    /// Month counter within the spell. The first spell counts loan months,
    /// later spells restart at 1.
    pub spell_period: i64,
    pub entry: i64,
    pub stop: i64,
    pub spell_entry: i64,
    pub spell_stop: i64,
    /// True only on the final interval of a spell resolved by default.
    pub status: bool,
    pub resolution: ResolutionType,
    pub spell_age: i64,
    pub covariates: Vec<f64>,
}

impl SpellRecord {
    pub fn stratum(&self, technique: Technique) -> u32 {
        match technique {
            Technique::Pwp => self.spell_num_binned,
            Technique::Tfd | Technique::Ag => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpellDataset {
    pub technique: Technique,
    pub schema: Vec<String>,
    pub records: Vec<SpellRecord>,
}

#[derive(Debug, Error)]
pub enum SpellError {
    #[error("panel is invalid: {count} violation(s), first for loan `{loan_id}`: {description}")]
    InvalidPanel { count: usize, loan_id: LoanId, description: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One performing spell extracted from a loan's rows, before layout.
struct RawSpell<'a> {
    number: u32,
    rows: &'a [PanelRow],
    resolution: ResolutionType,
}

fn extract_spells(loan: &[PanelRow]) -> Vec<RawSpell<'_>> {
    let mut spells = Vec::new();
    let mut i = 0;
    let mut number = 0;
    while i < loan.len() {
        if loan[i].state != LoanState::Performing {
            i += 1;
            continue;
        }
        let start = i;
        while i < loan.len() && loan[i].state == LoanState::Performing {
            i += 1;
        }
        let resolution = match loan.get(i).map(|r| r.state) {
            None => ResolutionType::Censored,
            Some(LoanState::Default) => ResolutionType::Default,
            Some(LoanState::Settled) => ResolutionType::Settled,
            Some(LoanState::WriteOff) => ResolutionType::WriteOff,
            Some(LoanState::Performing) => unreachable!(),
        };
        number += 1;
        spells.push(RawSpell { number, rows: &loan[start..i], resolution });
    }
    spells
}

/// Lays out a panel's performing spells for one technique.
pub fn build_spells(panel: &Panel, technique: Technique) -> Result<SpellDataset, SpellError> {
    let violations = validate_panel(panel);
    if let Some(first) = violations.first() {
        return Err(SpellError::InvalidPanel {
            count: violations.len(),
            loan_id: first.loan_id.clone(),
            description: first.description.clone(),
        });
    }
    let mut records = Vec::new();
    for loan in panel.loans() {
        for spell in extract_spells(loan) {
            if technique == Technique::Tfd && spell.number > 1 {
                break;
            }
            lay_out(&spell, technique, &mut records);
        }
    }
    Ok(SpellDataset { technique, schema: panel.schema.clone(), records })
}

fn lay_out(spell: &RawSpell<'_>, technique: Technique, out: &mut Vec<SpellRecord>) {
    let first = spell.rows[0].period;
    let last = spell.rows[spell.rows.len() - 1].period;
    let spell_age = last - first + 1;
    // shift maps a loan period to the interval stop on the layout's clock
    let (shift, spell_entry, spell_stop) = match technique {
        Technique::Tfd | Technique::Ag => (0, first - 1, last),
        Technique::Pwp => (first - 1, 0, spell_age),
    };
    let n = spell.rows.len();
    for (k, row) in spell.rows.iter().enumerate() {
        let stop = row.period - shift;
        let spell_period = if spell.number == 1 { row.period } else { row.period - first + 1 };
        out.push(SpellRecord {
            loan_id: row.loan_id.clone(),
            period: row.period,
            spell_num: spell.number,
            spell_num_binned: spell.number.min(MAX_SPELL_BIN),
            spell_period,
            entry: stop - 1,
            stop,
            spell_entry,
            spell_stop,
            status: k + 1 == n && spell.resolution == ResolutionType::Default,
            resolution: spell.resolution,
            spell_age,
            covariates: row.covariates.clone(),
        });
    }
}

impl SpellDataset {
    /// Contiguous record slices, one per spell `(loan_id, spell_num)`.
    pub fn spells(&self) -> impl Iterator<Item = &[SpellRecord]> + '_ {
        self.records.chunk_by(|a, b| a.loan_id == b.loan_id && a.spell_num == b.spell_num)
    }

    pub fn n_spells(&self) -> usize {
        self.spells().count()
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.status).count()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    pub fn stratum(&self, record: &SpellRecord) -> u32 {
        record.stratum(self.technique)
    }

    /// Keeps only the named covariate columns, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Option<SpellDataset> {
        let idx: Option<Vec<usize>> = names.iter().map(|n| self.covariate_index(n)).collect();
        let idx = idx?;
        let records = self
            .records
            .iter()
            .map(|r| SpellRecord { covariates: idx.iter().map(|&i| r.covariates[i]).collect(), ..r.clone() })
            .collect();
        Some(SpellDataset { technique: self.technique, schema: names.to_vec(), records })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SpellError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = [
            "loan_id",
            "period",
            "spell_num",
            "spell_num_binned",
            "spell_period",
            "entry",
            "stop",
            "spell_entry",
            "spell_stop",
            "status",
            "resolution",
            "spell_age",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.schema.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut rec = vec![
                r.loan_id.clone(),
                r.period.to_string(),
                r.spell_num.to_string(),
                r.spell_num_binned.to_string(),
                r.spell_period.to_string(),
                r.entry.to_string(),
                r.stop.to_string(),
                r.spell_entry.to_string(),
                r.spell_stop.to_string(),
                u8::from(r.status).to_string(),
                r.resolution.code().to_string(),
                r.spell_age.to_string(),
            ];
            rec.extend(r.covariates.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SpellSummary {
    /// Number of loans by their highest spell number.
    pub max_spell_histogram: BTreeMap<u32, usize>,
    /// Number of spells by resolution type.
    pub resolution_counts: BTreeMap<ResolutionType, usize>,
}

pub fn spell_summary(ds: &SpellDataset) -> SpellSummary {
    let mut max_spell: BTreeMap<&str, u32> = BTreeMap::new();
    let mut summary = SpellSummary::default();
    for spell in ds.spells() {
        let r = &spell[0];
        let m = max_spell.entry(r.loan_id.as_str()).or_insert(0);
        *m = (*m).max(r.spell_num);
        *summary.resolution_counts.entry(r.resolution).or_insert(0) += 1;
    }
    for m in max_spell.into_values() {
        *summary.max_spell_histogram.entry(m).or_insert(0) += 1;
    }
    summary
}
