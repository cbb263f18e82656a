//! Attacks on the NVMe-oF layer: forged commands and responses, falsified
//! data in the client's receive buffer, and connection teardown through an
//! invalid request.

use crate::fabric::Actor;
use crate::harness::testbed::{CLIENT_ADDR, KNOWN_LBA, TARGET_ADDR};
use crate::harness::{Testbed, ThreatModel};
use crate::nvmeof::capsule::{CapsuleKind, NvmeCapsule, Status};
use crate::nvmeof::{ClientProfile, ClientState, Command, USER_POOL_BASE};
use crate::rnic::Qpn;
use crate::sim::AppEvent;
use crate::wire::{Opcode, Packet, PortAddr};
use crate::NodeId;

use super::inject::{inject_any, InjectPayload, SweepOptions};
use super::{guess_qpn, AttackId, AttackOutcome, AttackerKnowledge, Effect};

pub const FORGED_LBA: u64 = 7;
pub const FORGED_CID: u16 = 0x7777;

pub fn forged_data() -> Vec<u8> {
    b"overwritten by an unauthenticated peer ".repeat(4)
}

fn fake_read_data(len: usize) -> Vec<u8> {
    (0..len).map(|i| 0xa5 ^ (i as u8)).collect()
}

/// Pattern for the spoof-response workload.
fn pattern(seed: u8, len: usize) -> Vec<u8> {
    (0..len).map(|i| seed.wrapping_add((i / 7) as u8)).collect()
}

/// Host the attacker sits on (TLU) or impersonates (TRA) to reach `peer`.
fn position(tb: &mut Testbed, model: ThreatModel, near: NodeId, near_addr: PortAddr) -> (Actor, PortAddr) {
    (tb.attacker(model, near), near_addr)
}

/// Clear-text packets on the wire between two addresses, oldest first.
fn observed(tb: &Testbed, src: PortAddr, dst: PortAddr) -> Vec<Packet> {
    tb.world
        .fabric
        .captured()
        .iter()
        .filter(|c| !c.encrypted && c.packet.route.src_addr == src && c.packet.route.dst_addr == dst)
        .map(|c| c.packet.clone())
        .collect()
}

/// Next request PSN and destination QPN of the sender `src` towards `dst`,
/// inferred from the last observed request.
fn next_request_psn(tb: &Testbed, src: PortAddr, dst: PortAddr) -> Option<(Qpn, u32)> {
    let mask = tb.world.config().widths.psn_space() - 1;
    observed(tb, src, dst)
        .iter()
        .rev()
        .find(|p| matches!(p.transport.opcode(), Opcode::Send | Opcode::Write | Opcode::Read))
        .map(|p| (p.transport.dest_qpn(), (p.transport.psn() + 1) & mask))
}

/// Command capsules the client sent, decoded from the capture.
fn observed_commands(tb: &Testbed) -> Vec<NvmeCapsule> {
    observed(tb, CLIENT_ADDR, TARGET_ADDR)
        .iter()
        .filter(|p| p.transport.opcode() == Opcode::Send)
        .filter_map(|p| NvmeCapsule::decode(&p.payload).ok())
        .collect()
}

/// Rewrites a remote block through a command capsule injected into the
/// target's queue pair for the client connection.
pub fn spoof_nvmeof_request(
    tb: &mut Testbed,
    model: ThreatModel,
    knowledge: &AttackerKnowledge,
    attack: bool,
) -> AttackOutcome {
    let data = forged_data();
    let mut cost = 1;
    if attack {
        let (actor, src) = position(tb, model, tb.client_node, CLIENT_ADDR);
        let target_node = tb.target_node;
        let cands = guess_qpn(&mut tb.world, &actor, target_node, knowledge);
        let capsule = NvmeCapsule::write_in_capsule(FORGED_CID, FORGED_LBA, data.clone());
        let payload = InjectPayload::Send(capsule.encode());
        let (_, c) = inject_any(&mut tb.world, &actor, src, TARGET_ADDR, &cands, &payload, &SweepOptions::default());
        cost = c;
        tb.settle();
    }
    let client = tb.client;
    tb.run(
        client,
        vec![Command::Read {
            lba: FORGED_LBA,
            len: data.len() as u32,
        }],
    );
    let hit = tb.store().read(FORGED_LBA, data.len()) == data;
    AttackOutcome::new(AttackId::SpoofRequest, tb, model, hit.then_some(Effect::ForgedExecution), cost)
}

/// Completes the client's next write before the target has fetched its data.
/// The client then reuses the buffer and the target stores what it finds.
pub fn spoof_nvmeof_response(
    tb: &mut Testbed,
    model: ThreatModel,
    knowledge: &AttackerKnowledge,
    attack: bool,
) -> AttackOutcome {
    let d1 = pattern(0x10, 8192);
    let d2 = pattern(0x80, 8192);
    let client = tb.client;
    let kernel_eavesdrop = tb.cfg.profile == ClientProfile::KernelStyle && tb.cfg.eavesdrop;
    let mut cost = 1;

    if kernel_eavesdrop {
        // The kernel client matches responses by command id, so the forged
        // response must name the command in flight and arrive before the
        // target pulls the data.
        tb.world.submit(client, Command::Write { lba: 2, data: d1.clone() });
        let latency = tb.world.fabric.config().default_latency;
        let t = tb.world.now() + latency + 1;
        tb.world.run_until(t);
        if attack {
            let (actor, src) = position(tb, model, tb.target_node, TARGET_ADDR);
            let cid = observed_commands(tb).last().map(|c| c.command_id);
            if let (Some(cid), Some((qpn, psn))) = (cid, next_request_psn(tb, TARGET_ADDR, CLIENT_ADDR)) {
                let resp = NvmeCapsule::response(cid, Status::Success);
                let opts = SweepOptions {
                    start_psn: psn,
                    max_packets: Some(1),
                    endpoints: 1,
                    ..SweepOptions::default()
                };
                let (_, c) = inject_any(
                    &mut tb.world,
                    &actor,
                    src,
                    CLIENT_ADDR,
                    &[qpn],
                    &InjectPayload::Send(resp.encode()),
                    &opts,
                );
                cost = c;
            }
        }
        tb.settle();
    } else {
        if attack {
            let (actor, src) = position(tb, model, tb.target_node, TARGET_ADDR);
            let client_node = tb.client_node;
            let cands = guess_qpn(&mut tb.world, &actor, client_node, knowledge);
            let resp = NvmeCapsule::response(1, Status::Success);
            let payload = InjectPayload::Send(resp.encode());
            let (_, c) = inject_any(&mut tb.world, &actor, src, CLIENT_ADDR, &cands, &payload, &SweepOptions::default());
            cost = c;
            tb.settle();
        }
        tb.run(
            client,
            vec![
                Command::Write { lba: 2, data: d1.clone() },
                Command::Write { lba: 12, data: d2 },
            ],
        );
    }
    let hit = tb.store().read(2, d1.len()) != d1;
    AttackOutcome::new(AttackId::SpoofResponse, tb, model, hit.then_some(Effect::EarlyTermination), cost)
}

/// Overwrites the client's receive buffer with a forged RDMA write so that a
/// read returns attacker data while the disk stays intact.
pub fn rdma_write_corrupt(
    tb: &mut Testbed,
    model: ThreatModel,
    knowledge: &AttackerKnowledge,
    attack: bool,
) -> AttackOutcome {
    const LEN: usize = 4096;
    let fake = fake_read_data(LEN);
    let client = tb.client;
    let before = tb.store().read(KNOWN_LBA, LEN);
    let mut cost = 1;
    let read = Command::Read {
        lba: KNOWN_LBA,
        len: LEN as u32,
    };

    match (tb.cfg.profile, tb.cfg.eavesdrop) {
        (ClientProfile::KernelStyle, true) => {
            // Fast registrations hand out the last key plus one, and with one
            // command in flight the buffer address repeats.
            let prior = observed_commands(tb)
                .into_iter()
                .filter(|c| c.kind == CapsuleKind::Read)
                .filter_map(|c| c.sgl)
                .next_back();
            let prior_key = observed_commands(tb)
                .into_iter()
                .filter_map(|c| c.sgl.map(|s| s.rkey))
                .max();
            tb.world.submit(client, read);
            let latency = tb.world.fabric.config().default_latency;
            let t = tb.world.now() + latency + 1;
            tb.world.run_until(t);
            if attack {
                let (actor, src) = position(tb, model, tb.target_node, TARGET_ADDR);
                if let (Some(sgl), Some(key), Some((qpn, psn))) =
                    (prior, prior_key, next_request_psn(tb, TARGET_ADDR, CLIENT_ADDR))
                {
                    let payload = InjectPayload::Write {
                        rkey: key.wrapping_add(1),
                        vaddr: sgl.vaddr,
                        data: fake.clone(),
                    };
                    let opts = SweepOptions {
                        start_psn: psn,
                        max_packets: Some(1),
                        endpoints: 1,
                        ..SweepOptions::default()
                    };
                    let (_, c) = inject_any(&mut tb.world, &actor, src, CLIENT_ADDR, &[qpn], &payload, &opts);
                    cost = c;
                }
            }
            tb.settle();
        }
        _ => {
            if attack {
                // Without observation the attacker can only aim at the
                // well-known pool: first static key of the device, fixed base.
                let (actor, src) = position(tb, model, tb.target_node, TARGET_ADDR);
                let client_node = tb.client_node;
                let cands = guess_qpn(&mut tb.world, &actor, client_node, knowledge);
                let payload = InjectPayload::Write {
                    rkey: tb.world.config().rnic.static_rkey,
                    vaddr: USER_POOL_BASE,
                    data: fake.clone(),
                };
                let (_, c) = inject_any(&mut tb.world, &actor, src, CLIENT_ADDR, &cands, &payload, &SweepOptions::default());
                cost = c;
                tb.settle();
            }
            tb.run(client, vec![read]);
        }
    }
    let got = tb.world.client(client).completions().last().and_then(|c| c.data.clone());
    let hit = got.as_deref() == Some(fake.as_slice()) && tb.store().read(KNOWN_LBA, LEN) == before;
    AttackOutcome::new(AttackId::CorruptMemory, tb, model, hit.then_some(Effect::FalsifiedData), cost)
}

/// Tears the client connection down with one request whose memory address is
/// invalid: the target NAKs and both queue pairs enter the error state.
pub fn inject_invalid(
    tb: &mut Testbed,
    model: ThreatModel,
    knowledge: &AttackerKnowledge,
    attack: bool,
) -> AttackOutcome {
    let mut cost = 1;
    if attack {
        let (actor, src) = position(tb, model, tb.client_node, CLIENT_ADDR);
        let target_node = tb.target_node;
        let cands = guess_qpn(&mut tb.world, &actor, target_node, knowledge);
        let payload = InjectPayload::Write {
            rkey: 0,
            vaddr: 0,
            data: vec![0; 8],
        };
        let (_, c) = inject_any(&mut tb.world, &actor, src, TARGET_ADDR, &cands, &payload, &SweepOptions::default());
        cost = c;
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
    AttackOutcome::new(AttackId::InvalidPacket, tb, model, hit.then_some(Effect::Disconnection), cost)
}

pub(crate) fn client_disconnected(tb: &Testbed) -> bool {
    tb.world.client(tb.client).state() == ClientState::Disconnected
        && tb
            .world
            .trace_of(&[tb.client])
            .iter()
            .any(|e| e.kind == AppEvent::Disconnected)
}
