//! Text and CSV rendering of attack outcomes.

use std::fmt::Write as _;

use crate::attacks::{AttackId, AttackOutcome, Effect};

use super::matrix::{expected, footnote, yes_no, FootnoteCheck};
use super::{SecurityConfig, ThreatModel};

pub const CSV_HEADER: &str = "attack,model,config,succeeded,effect,cost";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeasibilityReport {
    pub rows: Vec<AttackOutcome>,
    pub footnotes: Vec<FootnoteCheck>,
}

/// A row or footnote that disagrees with the published table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch(pub String);

impl FeasibilityReport {
    pub fn mismatches(&self) -> Vec<Mismatch> {
        let mut out: Vec<Mismatch> = self
            .rows
            .iter()
            .filter(|r| r.succeeded != expected(r.attack_id, r.threat_model, r.security_config))
            .map(|r| {
                Mismatch(format!(
                    "{} {} {}: got {}, expected {}",
                    r.attack_id,
                    r.threat_model.label(),
                    r.security_config.label(),
                    yes_no(r.succeeded),
                    yes_no(!r.succeeded)
                ))
            })
            .collect();
        out.extend(
            self.footnotes
                .iter()
                .filter(|f| !f.holds)
                .map(|f| Mismatch(format!("footnote {}: {}", f.footnote.marker(), f.detail))),
        );
        out
    }

    /// True when every attack appears under all six model/config columns.
    pub fn is_complete_matrix(&self) -> bool {
        self.rows.len() == AttackId::ALL.len() * 6
            && AttackId::ALL.iter().all(|&a| {
                ThreatModel::ALL
                    .iter()
                    .all(|&m| SecurityConfig::ALL.iter().all(|&s| self.cell(a, m, s).is_some()))
            })
    }

    pub fn cell(&self, a: AttackId, m: ThreatModel, s: SecurityConfig) -> Option<&AttackOutcome> {
        self.rows
            .iter()
            .find(|r| r.attack_id == a && r.threat_model == m && r.security_config == s)
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.to_text(),
            Format::Csv => self.to_csv(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.attack_id,
                r.threat_model.label(),
                r.security_config.label(),
                r.succeeded,
                effect_label(r.effect),
                r.cost
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:<5} {:<7} {:<9} {:<18} {:>10}",
            "attack", "model", "config", "succeeded", "effect", "cost"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:<5} {:<7} {:<9} {:<18} {:>10}",
                r.attack_id.name(),
                r.threat_model.label(),
                r.security_config.label(),
                yes_no(r.succeeded),
                effect_label(r.effect),
                r.cost
            );
        }
        if self.is_complete_matrix() {
            s.push('\n');
            s.push_str(&self.grid());
        }
        if !self.footnotes.is_empty() {
            s.push('\n');
            for f in &self.footnotes {
                let _ = writeln!(
                    s,
                    "[{}] {} ({})",
                    f.footnote.marker(),
                    f.detail,
                    if f.holds { "as published" } else { "DIFFERS" }
                );
            }
        }
        s
    }

    /// Yes/No grid in the layout of the published table.
    fn grid(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<20}", "");
        for m in ThreatModel::ALL {
            let _ = write!(s, "| {:<24}", m.label());
        }
        s.push('\n');
        let _ = write!(s, "{:<20}", "");
        for _ in ThreatModel::ALL {
            s.push_str("| ");
            for c in SecurityConfig::ALL {
                let _ = write!(s, "{:<7} ", c.label());
            }
        }
        s.push('\n');
        for a in AttackId::ALL {
            let name = match footnote(a) {
                Some(f) => format!("{}[{}]", a.name(), f.marker()),
                None => a.name().to_string(),
            };
            let _ = write!(s, "{name:<20}");
            for m in ThreatModel::ALL {
                s.push_str("| ");
                for c in SecurityConfig::ALL {
                    let v = self.cell(a, m, c).map_or("-", |r| yes_no(r.succeeded));
                    let _ = write!(s, "{v:<7} ");
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn effect_label(e: Option<Effect>) -> &'static str {
    match e {
        None => "",
        Some(Effect::ForgedExecution) => "ForgedExecution",
        Some(Effect::EarlyTermination) => "EarlyTermination",
        Some(Effect::FalsifiedData) => "FalsifiedData",
        Some(Effect::ConnectionFailure) => "ConnectionFailure",
        Some(Effect::Slowdown) => "Slowdown",
        Some(Effect::Disconnection) => "Disconnection",
    }
}
