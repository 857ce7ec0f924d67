//! Recurrent-event survival analysis for loan panels.
//!
//! The crate turns a loan-month [`panel::Panel`] into counting-process spell
//! datasets under three layouts ([`spells::Technique`]), fits Cox
//! proportional-hazards models to them ([`cox`]), derives actual and
//! predicted term-structures of default probability ([`nonparametric`]) and
//! evaluates the fits ([`diagnostics`]). [`synth`] generates panels with a
//! known hazard structure and [`pipeline`] chains everything end to end.

pub mod cox;
pub mod diagnostics;
pub mod nonparametric;
pub mod panel;
pub mod pipeline;
pub mod sampling;
pub mod spells;
pub mod synth;

pub use cox::{aic, fit, CoxFit, FitError, FitOptions, Ties};
pub use panel::{ingest_panel, validate_panel, LoanState, Panel, PanelRow, SchemaConfig};
pub use spells::{build_spells, ResolutionType, SpellDataset, SpellRecord, Technique};
