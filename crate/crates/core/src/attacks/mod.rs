//! Attack programs. Each drives actors through the public simulator surface
//! (verbs, CM datagrams, raw frames for administrators) and reports a
//! structured outcome.
//!
//! Every program takes an `attack` flag. With the flag cleared it runs the
//! same victim workload without injecting anything, which yields the
//! baseline for non-interference checks.

pub mod cm;
pub mod cnp;
pub mod exhaust;
pub mod inject;
pub mod nvme;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::harness::{SecurityConfig, Testbed, ThreatModel};

pub use cm::{probe_cm_keys, spoof_disconnect, KeyProbe};
pub use cnp::spoof_cnp;
pub use exhaust::exhaust_connections;
pub use inject::{enumerate_psn_inject, guess_qpn, AttackerKnowledge, Injection, InjectPayload, SweepOptions};
pub use nvme::{inject_invalid, rdma_write_corrupt, spoof_nvmeof_request, spoof_nvmeof_response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackId {
    SpoofRequest,
    SpoofResponse,
    CorruptMemory,
    Exhaust,
    Cnp,
    Disconnect,
    InvalidPacket,
}

impl AttackId {
    pub const ALL: [AttackId; 7] = [
        AttackId::SpoofRequest,
        AttackId::SpoofResponse,
        AttackId::CorruptMemory,
        AttackId::Exhaust,
        AttackId::Cnp,
        AttackId::Disconnect,
        AttackId::InvalidPacket,
    ];

    /// Stable identifier used in configuration files and reports.
    pub fn name(self) -> &'static str {
        match self {
            AttackId::SpoofRequest => "spoof-request",
            AttackId::SpoofResponse => "spoof-response",
            AttackId::CorruptMemory => "corrupt-memory",
            AttackId::Exhaust => "exhaust",
            AttackId::Cnp => "spoof-cnp",
            AttackId::Disconnect => "spoof-disconnect",
            AttackId::InvalidPacket => "invalid-packet",
        }
    }

    pub fn from_name(s: &str) -> Option<AttackId> {
        AttackId::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Effect {
    ForgedExecution,
    EarlyTermination,
    FalsifiedData,
    ConnectionFailure,
    Slowdown,
    Disconnection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack_id: AttackId,
    pub threat_model: ThreatModel,
    pub security_config: SecurityConfig,
    pub succeeded: bool,
    /// Set exactly when the attack succeeded.
    pub effect: Option<Effect>,
    /// Packets, probes or allocations the attacker spent. Always at least 1.
    pub cost: u64,
}

impl AttackOutcome {
    pub(crate) fn new(id: AttackId, tb: &Testbed, model: ThreatModel, effect: Option<Effect>, cost: u64) -> Self {
        AttackOutcome {
            attack_id: id,
            threat_model: model,
            security_config: tb.cfg.security,
            succeeded: effect.is_some(),
            effect,
            cost: cost.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttackError {
    #[error("blocked: {0}")]
    Blocked(String),
    #[error("sweep covered the whole sequence space without acceptance")]
    SweepExhausted,
    #[error("key difference spans more than one bit; retry with fresh connections")]
    MultiBitRetry,
}

/// Runs one attack of the feasibility matrix against a fresh testbed.
pub fn run_attack(tb: &mut Testbed, id: AttackId, model: ThreatModel, attack: bool) -> AttackOutcome {
    let knowledge = AttackerKnowledge::for_testbed(tb);
    match id {
        AttackId::SpoofRequest => spoof_nvmeof_request(tb, model, &knowledge, attack),
        AttackId::SpoofResponse => spoof_nvmeof_response(tb, model, &knowledge, attack),
        AttackId::CorruptMemory => rdma_write_corrupt(tb, model, &knowledge, attack),
        AttackId::Exhaust => exhaust_connections(tb, model, attack),
        AttackId::Cnp => spoof_cnp(tb, model, &knowledge, attack),
        AttackId::Disconnect => spoof_disconnect(tb, model, attack),
        AttackId::InvalidPacket => inject_invalid(tb, model, &knowledge, attack),
    }
}
