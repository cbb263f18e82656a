//! The attack feasibility matrix: 7 attacks × 2 threat models × 3 security
//! configurations, with the published expectations and their footnotes.

use crate::attacks::cnp::cnp_packet;
use crate::attacks::{run_attack, AttackId, AttackOutcome};
use crate::fabric::FabricError;
use crate::nvmeof::ClientProfile;
use crate::wire::Opcode;

use super::report::FeasibilityReport;
use super::{SecurityConfig, Testbed, TestbedConfig, ThreatModel};

/// Qualifications attached to individual rows of the published table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Footnote {
    /// Memory corruption needs more work against kernel-style clients that
    /// fast-register and invalidate per request.
    KernelComplexity,
    /// Exhaustion is stopped by a per-user queue-pair quota.
    QuotaMitigable,
    /// Congestion notifications can only be forged with raw-packet privileges.
    AdminOnly,
}

impl Footnote {
    pub fn marker(self) -> &'static str {
        match self {
            Footnote::KernelComplexity => "1",
            Footnote::QuotaMitigable => "2",
            Footnote::AdminOnly => "3",
        }
    }
}

/// Published outcome of one cell.
pub fn expected(attack: AttackId, model: ThreatModel, security: SecurityConfig) -> bool {
    use SecurityConfig::IPsec;
    use ThreatModel::{Tlu, Tra};
    match (attack, model, security) {
        // Connection management is outside IPsec and unauthenticated.
        (AttackId::Disconnect, _, _) => true,
        (_, Tra, IPsec) => false,
        (AttackId::Exhaust, Tra, _) => false,
        (AttackId::Cnp, Tlu, _) => false,
        _ => true,
    }
}

pub fn footnote(attack: AttackId) -> Option<Footnote> {
    match attack {
        AttackId::CorruptMemory => Some(Footnote::KernelComplexity),
        AttackId::Exhaust => Some(Footnote::QuotaMitigable),
        AttackId::Cnp => Some(Footnote::AdminOnly),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootnoteCheck {
    pub footnote: Footnote,
    pub detail: String,
    pub holds: bool,
}

/// Runs one attack on a fresh testbed built from `base` with `security`.
pub fn run_cell(base: &TestbedConfig, attack: AttackId, model: ThreatModel, security: SecurityConfig) -> AttackOutcome {
    let mut cfg = base.clone();
    cfg.security = security;
    let mut tb = Testbed::new(cfg);
    run_attack(&mut tb, attack, model, true)
}

/// Runs `attacks` across both threat models and all security configurations.
pub fn run_grid(base: &TestbedConfig, attacks: &[AttackId]) -> Vec<AttackOutcome> {
    let mut rows = Vec::new();
    for &a in attacks {
        for m in ThreatModel::ALL {
            for s in SecurityConfig::ALL {
                rows.push(run_cell(base, a, m, s));
            }
        }
    }
    rows
}

/// The full matrix plus the footnote conditions.
pub fn run_matrix(base: &TestbedConfig) -> FeasibilityReport {
    FeasibilityReport {
        rows: run_grid(base, &AttackId::ALL),
        footnotes: check_footnotes(base),
    }
}

pub fn check_footnotes(base: &TestbedConfig) -> Vec<FootnoteCheck> {
    let mut out = Vec::new();
    let mut plain = base.clone();
    plain.security = SecurityConfig::None;

    for model in ThreatModel::ALL {
        let mut kernel = plain.clone();
        kernel.profile = ClientProfile::KernelStyle;
        kernel.eavesdrop = false;
        let blind = run_cell(&kernel, AttackId::CorruptMemory, model, SecurityConfig::None);
        kernel.eavesdrop = true;
        let seen = run_cell(&kernel, AttackId::CorruptMemory, model, SecurityConfig::None);
        out.push(FootnoteCheck {
            footnote: Footnote::KernelComplexity,
            detail: format!(
                "{} kernel-style client: blind={} eavesdropping={}",
                model.label(),
                yes_no(blind.succeeded),
                yes_no(seen.succeeded)
            ),
            holds: !blind.succeeded && seen.succeeded,
        });
    }

    let mut quota = plain.clone();
    quota.mitigations.per_user_quota = Some(16);
    let capped = run_cell(&quota, AttackId::Exhaust, ThreatModel::Tlu, SecurityConfig::None);
    out.push(FootnoteCheck {
        footnote: Footnote::QuotaMitigable,
        detail: format!("TLU with per-user quota 16: {}", yes_no(capped.succeeded)),
        holds: !capped.succeeded,
    });

    let mut tb = Testbed::new(plain);
    let actor = tb.attacker(ThreatModel::Tlu, tb.client_node);
    let kind = tb.world.fabric.kind();
    let qpn = tb.target_qpn_for(super::testbed::CLIENT_ADDR).unwrap_or_default();
    let denied = match cnp_packet(kind, qpn, None) {
        Ok(pkt) => matches!(
            tb.world.raw_send(&actor, pkt),
            Err(FabricError::RawOpcodeDenied(Opcode::Cnp))
        ),
        Err(_) => false,
    };
    out.push(FootnoteCheck {
        footnote: Footnote::AdminOnly,
        detail: format!("unprivileged raw CNP denied: {}", yes_no(denied)),
        holds: denied,
    });
    out
}

pub(crate) fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}
