//! Throttling a connection with forged congestion notifications.

use crate::harness::testbed::{CLIENT_ADDR, CONTROL_ADDR, TARGET_ADDR};
use crate::harness::{Testbed, ThreatModel};
use crate::rnic::Qpn;
use crate::wire::{Opcode, Packet, RouteHeader, SrcQpnExtHeader, TransportHeader};

use super::{guess_qpn, AttackId, AttackOutcome, AttackerKnowledge, Effect};

/// Forged notifications per candidate QPN in the default attack.
pub const DEFAULT_CNPS: u32 = 10;
/// Slowdown counted as success: the victim's rate below this fraction.
pub const SLOWDOWN_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CnpOptions {
    pub count: u32,
    /// Claimed source QPN in an extension header, for an attacker that knows
    /// the source-QPN check is deployed.
    pub forge_src_qpn: Option<Qpn>,
}

pub fn spoof_cnp(tb: &mut Testbed, model: ThreatModel, knowledge: &AttackerKnowledge, attack: bool) -> AttackOutcome {
    let opts = CnpOptions {
        count: DEFAULT_CNPS,
        forge_src_qpn: None,
    };
    spoof_cnp_with(tb, model, knowledge, &opts, attack)
}

/// Sends `count` CNPs claiming to come from the client towards every
/// candidate QPN on the target. The target QP serving the client is the one
/// issuing RDMA writes for reads.
pub fn spoof_cnp_with(
    tb: &mut Testbed,
    model: ThreatModel,
    knowledge: &AttackerKnowledge,
    opts: &CnpOptions,
    attack: bool,
) -> AttackOutcome {
    let mut cost = 1;
    if attack {
        let actor = tb.attacker(model, tb.client_node);
        let target_node = tb.target_node;
        let cands = guess_qpn(&mut tb.world, &actor, target_node, knowledge);
        let kind = tb.world.fabric.kind();
        cost = 0;
        'sweep: for qpn in cands {
            for _ in 0..opts.count {
                let Ok(pkt) = cnp_packet(kind, qpn, opts.forge_src_qpn) else {
                    break 'sweep;
                };
                cost += 1;
                if tb.world.raw_send(&actor, pkt).is_err() {
                    break 'sweep;
                }
            }
        }
        tb.settle();
    }
    let hit = victim_rate(tb) < SLOWDOWN_THRESHOLD && control_rate(tb) == 1.0;
    AttackOutcome::new(AttackId::Cnp, tb, model, hit.then_some(Effect::Slowdown), cost)
}

/// A bare congestion notification from the client towards `qpn` on the target.
pub fn cnp_packet(kind: crate::wire::FabricKind, qpn: Qpn, src_qpn: Option<Qpn>) -> crate::wire::Result<Packet> {
    let ext = src_qpn.map(SrcQpnExtHeader::new).transpose()?;
    Packet::new(
        RouteHeader::new(CLIENT_ADDR, TARGET_ADDR, kind)?,
        TransportHeader::new(Opcode::Cnp, qpn, 0)?,
        None,
        ext,
        Vec::new(),
    )
}

fn rate_of(tb: &Testbed, peer: crate::wire::PortAddr) -> f64 {
    tb.target_qpn_for(peer)
        .and_then(|q| tb.world.node(tb.target_node).rnic.qp(q))
        .map_or(1.0, |qp| qp.rate_factor())
}

/// Rate factor of the target QP serving the client.
pub fn victim_rate(tb: &Testbed) -> f64 {
    rate_of(tb, CLIENT_ADDR)
}

/// Rate factor of the target QP serving the control client.
pub fn control_rate(tb: &Testbed) -> f64 {
    rate_of(tb, CONTROL_ADDR)
}
