//! Target side: admits connections, executes capsules one at a time per
//! queue against the block store and moves bulk data with one-sided
//! operations.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use super::capsule::{self, CapsuleKind, NvmeCapsule, Status};
use super::{auth, in_capsule_threshold, BlockStore, BLOCK_SIZE, MAX_IO, USER_POOL_BASE};
use crate::cm::{CmEvent, CmEventKind, ConnId};
use crate::fabric::Actor;
use crate::rnic::memory::{Access, MrKind};
use crate::rnic::{Dest, QpEvent, QpEventKind, QpKind, Qpn};
use crate::sim::{AppEvent, CommandStatus, Host, OpKind};
use crate::wire::PortAddr;

pub const PROCESS_DELAY: u64 = 20;
/// Capacity of the backing device in blocks.
pub const CAPACITY_BLOCKS: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRegistration {
    /// Staging buffers are registered for local access only.
    LocalOnly,
    /// Staging buffers are registered for remote read and write, as a
    /// user-space target does for its whole memory pool.
    RemoteAccessible,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetConfig {
    /// Allowed client addresses; empty admits everyone.
    pub ip_filter: Vec<PortAddr>,
    pub inband_secret: Option<Vec<u8>>,
    pub psk: Option<Vec<u8>>,
    pub registration: TargetRegistration,
    pub mac: bool,
    pub process_delay: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            ip_filter: Vec::new(),
            inband_secret: None,
            psk: None,
            registration: TargetRegistration::RemoteAccessible,
            mac: false,
            process_delay: PROCESS_DELAY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnPhase {
    Pending,
    Established,
}

#[derive(Debug, Clone)]
struct Job {
    capsule: NvmeCapsule,
    chunks_left: usize,
}

#[derive(Debug, Clone)]
pub struct TargetConn {
    pub qpn: Qpn,
    pub peer: PortAddr,
    pub phase: ConnPhase,
    nonces: (Vec<u8>, Vec<u8>),
    key: Option<Vec<u8>>,
    staging: u64,
    staging_rkey: u32,
    queue: VecDeque<NvmeCapsule>,
    scheduled: bool,
    job: Option<Job>,
}

pub struct NvmeTarget {
    actor: Actor,
    cfg: TargetConfig,
    pub store: BlockStore,
    conns: BTreeMap<ConnId, TargetConn>,
    next_staging: u64,
}

impl NvmeTarget {
    pub fn new(actor: Actor, cfg: TargetConfig) -> Self {
        NvmeTarget {
            actor,
            cfg,
            store: BlockStore::default(),
            conns: BTreeMap::new(),
            next_staging: USER_POOL_BASE,
        }
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn config(&self) -> &TargetConfig {
        &self.cfg
    }

    pub fn connections(&self) -> impl Iterator<Item = (&ConnId, &TargetConn)> {
        self.conns.iter()
    }

    /// Staging buffer of the connection from `peer`, as `(vaddr, rkey)`.
    pub fn staging_of(&self, peer: PortAddr) -> Option<(u64, u32)> {
        self.conns
            .values()
            .find(|c| c.peer == peer)
            .map(|c| (c.staging, c.staging_rkey))
    }

    fn refuse(&mut self, host: &mut Host, id: ConnId, peer: PortAddr, reason: &str) {
        host.cm.reject(id);
        host.emit(AppEvent::Refused {
            peer,
            reason: reason.to_string(),
        });
    }

    pub fn on_cm_event(&mut self, host: &mut Host, ev: CmEvent) {
        match ev.kind {
            CmEventKind::ConnectRequest {
                peer,
                remote_qpn,
                remote_start_psn,
                private_payload,
            } => self.on_request(host, ev.conn, peer, remote_qpn, remote_start_psn, private_payload),
            CmEventKind::Established { private_payload } => {
                let Some(c) = self.conns.get_mut(&ev.conn) else {
                    return;
                };
                if let Some(secret) = &self.cfg.inband_secret {
                    let (nc, nt) = &c.nonces;
                    if auth::client_proof(secret, nc, nt) != private_payload {
                        let peer = c.peer;
                        host.cm.disconnect(ev.conn);
                        self.drop_conn(host, ev.conn);
                        host.emit(AppEvent::Refused {
                            peer,
                            reason: "authentication failed".to_string(),
                        });
                        return;
                    }
                    c.key = Some(auth::session_key(secret, nc, nt));
                } else {
                    c.key = self.cfg.psk.clone();
                }
                c.phase = ConnPhase::Established;
                let peer = c.peer;
                host.emit(AppEvent::Admitted { peer });
            }
            CmEventKind::Disconnected if self.drop_conn(host, ev.conn) => host.emit(AppEvent::Disconnected),
            _ => {}
        }
    }

    fn on_request(
        &mut self,
        host: &mut Host,
        id: ConnId,
        peer: PortAddr,
        remote_qpn: Qpn,
        remote_start_psn: u32,
        payload: Vec<u8>,
    ) {
        // Address filtering acts like a host firewall: no application event.
        if !self.cfg.ip_filter.is_empty() && !self.cfg.ip_filter.contains(&peer) {
            host.cm.reject(id);
            return;
        }
        let mut nonces = (Vec::new(), Vec::new());
        let mut reply = Vec::new();
        if let Some(secret) = &self.cfg.inband_secret {
            if payload.len() != auth::NONCE_LEN {
                self.refuse(host, id, peer, "authentication required");
                return;
            }
            let nt = host.rng.gen::<[u8; auth::NONCE_LEN]>().to_vec();
            reply = auth::target_reply(secret, &payload, &nt);
            nonces = (payload, nt);
        }
        let qpn = match host.rnic.alloc_qp(&self.actor, QpKind::Rc) {
            Ok(q) => q,
            Err(e) => {
                self.refuse(host, id, peer, &e.to_string());
                return;
            }
        };
        let mask = host.rnic.config().widths.psn_space() - 1;
        let start_psn = host.rng.gen::<u32>() & mask;
        let dest = Dest {
            addr: peer,
            qpn: remote_qpn,
        };
        if let Err(e) = host.rnic.connect_qp(qpn, dest, start_psn, remote_start_psn) {
            host.rnic.destroy_qp(qpn);
            self.refuse(host, id, peer, &e.to_string());
            return;
        }
        let staging = self.next_staging;
        self.next_staging += MAX_IO as u64;
        host.rnic.memory.alloc(staging, MAX_IO);
        let access = match self.cfg.registration {
            TargetRegistration::LocalOnly => Access::LOCAL_ONLY,
            TargetRegistration::RemoteAccessible => Access::REMOTE_RW,
        };
        let staging_rkey = match host
            .rnic
            .register_mr(&self.actor, staging, MAX_IO as u64, access, MrKind::Static)
        {
            Ok(mr) => mr.rkey,
            Err(e) => {
                host.rnic.destroy_qp(qpn);
                self.refuse(host, id, peer, &e.to_string());
                return;
            }
        };
        self.conns.insert(
            id,
            TargetConn {
                qpn,
                peer,
                phase: ConnPhase::Pending,
                nonces,
                key: None,
                staging,
                staging_rkey,
                queue: VecDeque::new(),
                scheduled: false,
                job: None,
            },
        );
        host.cm.accept(id, qpn, start_psn, reply);
    }

    fn drop_conn(&mut self, host: &mut Host, id: ConnId) -> bool {
        match self.conns.remove(&id) {
            Some(c) => {
                host.rnic.destroy_qp(c.qpn);
                let _ = host.rnic.invalidate_mr(c.staging_rkey);
                true
            }
            None => false,
        }
    }

    fn conn_of_qp(&self, qpn: Qpn) -> Option<ConnId> {
        self.conns
            .iter()
            .find(|(_, c)| c.qpn == qpn)
            .map(|(id, _)| *id)
    }

    pub fn on_qp_event(&mut self, host: &mut Host, ev: QpEvent) {
        let Some(id) = self.conn_of_qp(ev.qpn) else {
            return;
        };
        match ev.kind {
            QpEventKind::Recv { payload, .. } => {
                let c = self.conns.get_mut(&id).expect("found");
                if c.phase != ConnPhase::Established {
                    return;
                }
                let Ok(capsule) = NvmeCapsule::decode(&payload) else {
                    return;
                };
                if capsule.kind == CapsuleKind::Response {
                    return;
                }
                c.queue.push_back(capsule);
                self.schedule(host, id);
            }
            QpEventKind::ReadDone { .. } => self.on_read_done(host, id),
            QpEventKind::Error(_) => host.cm.disconnect(id),
            _ => {}
        }
    }

    fn schedule(&mut self, host: &mut Host, id: ConnId) {
        let c = self.conns.get_mut(&id).expect("caller checked");
        if c.scheduled || c.job.is_some() || c.queue.is_empty() {
            return;
        }
        c.scheduled = true;
        host.set_timer(host.now + self.cfg.process_delay, id.0);
    }

    pub fn on_timer(&mut self, host: &mut Host, token: u64) {
        let id = ConnId(token);
        let Some(c) = self.conns.get_mut(&id) else {
            return;
        };
        c.scheduled = false;
        if c.job.is_some() {
            return;
        }
        let Some(capsule) = c.queue.pop_front() else {
            return;
        };
        self.execute(host, id, capsule);
        self.schedule_if_idle(host, id);
    }

    fn schedule_if_idle(&mut self, host: &mut Host, id: ConnId) {
        if self.conns.contains_key(&id) {
            self.schedule(host, id);
        }
    }

    fn key_of(&self, id: ConnId) -> Vec<u8> {
        self.conns[&id].key.clone().unwrap_or_default()
    }

    fn execute(&mut self, host: &mut Host, id: ConnId, capsule: NvmeCapsule) {
        let threshold = in_capsule_threshold(host.rnic.config().wire.mtu);
        let op = if capsule.kind == CapsuleKind::Read {
            OpKind::Read
        } else {
            OpKind::Write
        };
        if capsule.validate(threshold).is_err() || capsule.length as usize > MAX_IO {
            self.respond(host, id, &capsule, op, Status::TransferError, None);
            return;
        }
        if self.cfg.mac && !capsule::verify_msg(&capsule, &self.key_of(id)) {
            self.respond(host, id, &capsule, op, Status::AuthFailure, None);
            return;
        }
        let blocks = (capsule.length as u64).div_ceil(BLOCK_SIZE as u64);
        if capsule.block_addr.saturating_add(blocks) > CAPACITY_BLOCKS {
            self.respond(host, id, &capsule, op, Status::InvalidBlock, None);
            return;
        }
        match capsule.kind {
            CapsuleKind::WriteInCapsule => {
                self.store.write(capsule.block_addr, &capsule.inline_data);
                self.respond(host, id, &capsule, op, Status::Success, None);
            }
            CapsuleKind::Write => {
                let sgl = capsule.sgl.expect("validated");
                let c = &self.conns[&id];
                let (qpn, staging) = (c.qpn, c.staging);
                let mtu = host.rnic.config().wire.mtu as u32;
                let mut chunks = 0;
                let mut off = 0u32;
                while off < sgl.len {
                    let n = mtu.min(sgl.len - off);
                    if host
                        .rnic
                        .post_rdma_read(qpn, n, sgl.rkey, sgl.vaddr + off as u64, staging + off as u64, host.now)
                        .is_err()
                    {
                        self.respond(host, id, &capsule, op, Status::TransferError, None);
                        return;
                    }
                    chunks += 1;
                    off += n;
                }
                self.conns.get_mut(&id).expect("present").job = Some(Job {
                    capsule,
                    chunks_left: chunks,
                });
            }
            CapsuleKind::Read => {
                let sgl = capsule.sgl.expect("validated");
                let data = self.store.read(capsule.block_addr, sgl.len as usize);
                let qpn = self.conns[&id].qpn;
                let mtu = host.rnic.config().wire.mtu;
                for (i, chunk) in data.chunks(mtu).enumerate() {
                    let vaddr = sgl.vaddr + (i * mtu) as u64;
                    if host
                        .rnic
                        .post_rdma_write(qpn, chunk.to_vec(), sgl.rkey, vaddr, host.now)
                        .is_err()
                    {
                        self.respond(host, id, &capsule, op, Status::TransferError, None);
                        return;
                    }
                }
                self.respond(host, id, &capsule, op, Status::Success, Some(&data));
            }
            CapsuleKind::Response => {}
        }
    }

    fn on_read_done(&mut self, host: &mut Host, id: ConnId) {
        let c = self.conns.get_mut(&id).expect("caller checked");
        let Some(job) = c.job.as_mut() else {
            return;
        };
        job.chunks_left -= 1;
        if job.chunks_left > 0 {
            return;
        }
        let job = c.job.take().expect("present");
        let staging = c.staging;
        let len = job.capsule.length as usize;
        // Copy out of the registered buffer first; the copy is what gets
        // verified and stored.
        let data = host.rnic.memory.read(staging, len).unwrap_or_default();
        let status = if self.cfg.mac && !capsule::verify_data(&job.capsule, &self.key_of(id), &data) {
            Status::AuthFailure
        } else {
            self.store.write(job.capsule.block_addr, &data);
            Status::Success
        };
        self.respond(host, id, &job.capsule, OpKind::Write, status, None);
        self.schedule_if_idle(host, id);
    }

    fn respond(
        &mut self,
        host: &mut Host,
        id: ConnId,
        cmd: &NvmeCapsule,
        op: OpKind,
        status: Status,
        data: Option<&[u8]>,
    ) {
        let mut resp = NvmeCapsule::response(cmd.command_id, status);
        if self.cfg.mac {
            capsule::seal(&mut resp, &self.key_of(id), data);
        }
        let qpn = self.conns[&id].qpn;
        let _ = host.rnic.post_send(qpn, resp.encode(), host.now);
        host.emit(AppEvent::Served {
            cid: cmd.command_id,
            op,
            lba: cmd.block_addr,
            status: match status {
                Status::Success => CommandStatus::Success,
                Status::AuthFailure => CommandStatus::AuthFailure,
                Status::InvalidBlock => CommandStatus::InvalidBlock,
                Status::TransferError => CommandStatus::TransferError,
            },
        });
    }
}
