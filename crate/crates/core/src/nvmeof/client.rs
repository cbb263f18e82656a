//! Initiator side: connects through the CM, issues block commands with a
//! bounded queue depth and completes them from response capsules.

use std::collections::VecDeque;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::capsule::{self, CapsuleKind, NvmeCapsule, Sgl, Status};
use super::{auth, in_capsule_threshold, MAX_IO, USER_POOL_BASE};
use crate::cm::{ConnId, CmEvent, CmEventKind};
use crate::fabric::Actor;
use crate::rnic::memory::{Access, MrKind};
use crate::rnic::{Dest, QpEvent, QpEventKind, QpKind, Qpn};
use crate::sim::{AppEvent, CommandStatus, Host, OpKind};
use crate::wire::PortAddr;

pub const RESPONSE_TIMEOUT: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ClientProfile {
    /// Static pre-registered buffer pool at a fixed address; a response with
    /// no matching command is kept and consumed by the next command.
    UserSpaceStyle,
    /// Per-request fast registration invalidated on completion; responses
    /// without a matching outstanding command are dropped.
    KernelStyle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientConfig {
    pub profile: ClientProfile,
    pub target: PortAddr,
    /// In-band authentication secret shared with the target.
    pub secret: Option<Vec<u8>>,
    /// Pre-shared capsule MAC key used when in-band authentication is off.
    pub psk: Option<Vec<u8>>,
    pub mac: bool,
    pub queue_depth: usize,
    pub timeout: u64,
}

impl ClientConfig {
    pub fn new(profile: ClientProfile, target: PortAddr) -> Self {
        ClientConfig {
            profile,
            target,
            secret: None,
            psk: None,
            mac: false,
            queue_depth: 1,
            timeout: RESPONSE_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Write { lba: u64, data: Vec<u8> },
    Read { lba: u64, len: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Idle,
    Connecting,
    Connected,
    Failed,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub cid: u16,
    pub op: OpKind,
    pub lba: u64,
    pub status: CommandStatus,
    pub data: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
struct Inflight {
    cid: u16,
    cmd: Command,
    slot: usize,
    rkey: Option<u32>,
    token: u64,
}

pub struct NvmeClient {
    actor: Actor,
    cfg: ClientConfig,
    state: ClientState,
    qpn: Option<Qpn>,
    conn: Option<ConnId>,
    start_psn: u32,
    nonce: Vec<u8>,
    key: Option<Vec<u8>>,
    buf_base: u64,
    pool_rkey: Option<u32>,
    next_cid: u16,
    next_token: u64,
    queue: VecDeque<Command>,
    inflight: Vec<Inflight>,
    stale: VecDeque<NvmeCapsule>,
    completions: Vec<Completion>,
}

fn short_digest(data: &[u8]) -> String {
    hex::encode(&Sha256::digest(data)[..6])
}

impl NvmeClient {
    pub fn new(actor: Actor, cfg: ClientConfig) -> Self {
        NvmeClient {
            actor,
            cfg,
            state: ClientState::Idle,
            qpn: None,
            conn: None,
            start_psn: 0,
            nonce: Vec::new(),
            key: None,
            buf_base: 0,
            pool_rkey: None,
            next_cid: 1,
            next_token: 1,
            queue: VecDeque::new(),
            inflight: Vec::new(),
            stale: VecDeque::new(),
            completions: Vec::new(),
        }
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn qpn(&self) -> Option<Qpn> {
        self.qpn
    }

    pub fn conn(&self) -> Option<ConnId> {
        self.conn
    }

    /// Base address of the client's data buffers.
    pub fn buffer_base(&self) -> u64 {
        self.buf_base
    }

    pub fn completions(&self) -> &[Completion] {
        &self.completions
    }

    pub fn outstanding(&self) -> usize {
        self.inflight.len()
    }

    fn fail_connect(&mut self, host: &mut Host, reason: &str) {
        self.state = ClientState::Failed;
        if let Some(q) = self.qpn.take() {
            host.rnic.destroy_qp(q);
        }
        host.emit(AppEvent::ConnectFailed {
            reason: reason.to_string(),
        });
    }

    pub fn connect(&mut self, host: &mut Host) {
        if !matches!(
            self.state,
            ClientState::Idle | ClientState::Failed | ClientState::Disconnected
        ) {
            return;
        }
        let qpn = match host.rnic.alloc_qp(&self.actor, QpKind::Rc) {
            Ok(q) => q,
            Err(e) => {
                self.fail_connect(host, &e.to_string());
                return;
            }
        };
        self.qpn = Some(qpn);
        let mask = host.rnic.config().widths.psn_space() - 1;
        self.start_psn = host.rng.gen::<u32>() & mask;
        self.nonce = if self.cfg.secret.is_some() {
            host.rng.gen::<[u8; auth::NONCE_LEN]>().to_vec()
        } else {
            Vec::new()
        };
        let conn = host.cm.connect(
            self.actor.id,
            qpn,
            self.start_psn,
            self.cfg.target,
            self.nonce.clone(),
            host.now,
        );
        self.conn = Some(conn);
        self.state = ClientState::Connecting;
    }

    pub fn disconnect(&mut self, host: &mut Host) {
        if let Some(c) = self.conn {
            host.cm.disconnect(c);
        }
    }

    pub fn submit(&mut self, host: &mut Host, cmd: Command) {
        self.queue.push_back(cmd);
        self.pump(host);
    }

    fn setup_buffers(&mut self, host: &mut Host) -> bool {
        let len = (MAX_IO * self.cfg.queue_depth) as u64;
        match self.cfg.profile {
            ClientProfile::UserSpaceStyle => {
                if self.pool_rkey.is_some() {
                    return true;
                }
                self.buf_base = USER_POOL_BASE;
                host.rnic.memory.alloc(self.buf_base, len as usize);
                match host.rnic.register_mr(
                    &self.actor,
                    self.buf_base,
                    len,
                    Access::REMOTE_RW,
                    MrKind::Static,
                ) {
                    Ok(mr) => {
                        self.pool_rkey = Some(mr.rkey);
                        true
                    }
                    Err(_) => false,
                }
            }
            ClientProfile::KernelStyle => {
                if self.buf_base != 0 {
                    return true;
                }
                // Page-aligned address somewhere in the kernel half.
                let page = host.rng.gen_range(0x1_0000u64..0x100_0000);
                self.buf_base = 0xffff_8000_0000_0000 | (page << 12);
                host.rnic.memory.alloc(self.buf_base, len as usize)
            }
        }
    }

    pub fn on_cm_event(&mut self, host: &mut Host, ev: CmEvent) {
        if Some(ev.conn) != self.conn {
            return;
        }
        match ev.kind {
            CmEventKind::Replied {
                remote_qpn,
                remote_start_psn,
                private_payload,
            } => {
                if self.state != ClientState::Connecting {
                    return;
                }
                let mut ready_payload = Vec::new();
                if let Some(secret) = self.cfg.secret.clone() {
                    match auth::verify_target(&secret, &self.nonce, &private_payload) {
                        Some(nt) => {
                            ready_payload = auth::client_proof(&secret, &self.nonce, &nt);
                            self.key = Some(auth::session_key(&secret, &self.nonce, &nt));
                        }
                        None => {
                            host.cm.disconnect(ev.conn);
                            self.conn = None;
                            self.fail_connect(host, "authentication failed");
                            return;
                        }
                    }
                } else {
                    self.key = self.cfg.psk.clone();
                }
                let qpn = self.qpn.expect("allocated in connect");
                let dest = Dest {
                    addr: self.cfg.target,
                    qpn: remote_qpn,
                };
                if let Err(e) = host
                    .rnic
                    .connect_qp(qpn, dest, self.start_psn, remote_start_psn)
                {
                    host.cm.disconnect(ev.conn);
                    self.conn = None;
                    self.fail_connect(host, &e.to_string());
                    return;
                }
                if !self.setup_buffers(host) {
                    host.cm.disconnect(ev.conn);
                    self.conn = None;
                    self.fail_connect(host, "buffer registration failed");
                    return;
                }
                host.cm.ready(ev.conn, ready_payload);
                self.state = ClientState::Connected;
                host.emit(AppEvent::Connected {
                    peer: self.cfg.target,
                });
                self.pump(host);
            }
            CmEventKind::Rejected => {
                self.conn = None;
                self.fail_connect(host, "rejected");
            }
            CmEventKind::Timeout => {
                self.conn = None;
                self.fail_connect(host, "timeout");
            }
            CmEventKind::Disconnected => self.teardown(host),
            CmEventKind::Established { .. } | CmEventKind::ConnectRequest { .. } => {}
        }
    }

    fn teardown(&mut self, host: &mut Host) {
        if self.state == ClientState::Disconnected {
            return;
        }
        let was_connected = self.state == ClientState::Connected;
        self.state = ClientState::Disconnected;
        self.conn = None;
        if let Some(q) = self.qpn.take() {
            host.rnic.destroy_qp(q);
        }
        for f in std::mem::take(&mut self.inflight) {
            if let Some(rkey) = f.rkey {
                let _ = host.rnic.invalidate_mr(rkey);
            }
            self.finish(host, &f, CommandStatus::Aborted, None);
        }
        if was_connected {
            host.emit(AppEvent::Disconnected);
        }
    }

    pub fn on_qp_event(&mut self, host: &mut Host, ev: QpEvent) {
        if Some(ev.qpn) != self.qpn {
            return;
        }
        match ev.kind {
            QpEventKind::Recv { payload, .. } => self.on_capsule(host, &payload),
            QpEventKind::Error(_) => {
                // Applications treat a broken queue pair as a lost connection.
                if let Some(c) = self.conn {
                    host.cm.disconnect(c);
                }
            }
            _ => {}
        }
    }

    pub fn on_timer(&mut self, host: &mut Host, token: u64) {
        let Some(f) = self.inflight.iter().find(|f| f.token == token) else {
            return;
        };
        let cid = f.cid;
        let idx = self.inflight.iter().position(|f| f.cid == cid).expect("found");
        let f = self.inflight.remove(idx);
        if let Some(rkey) = f.rkey {
            let _ = host.rnic.invalidate_mr(rkey);
        }
        self.finish(host, &f, CommandStatus::Timeout, None);
        // A command that never completes is fatal for the queue.
        if let Some(c) = self.conn {
            host.cm.disconnect(c);
        }
    }

    fn on_capsule(&mut self, host: &mut Host, bytes: &[u8]) {
        let Ok(resp) = NvmeCapsule::decode(bytes) else {
            return;
        };
        if resp.kind != CapsuleKind::Response {
            return;
        }
        if self.cfg.mac {
            let Some(key) = self.key.as_deref() else {
                return;
            };
            if !capsule::verify_msg(&resp, key) {
                return;
            }
        }
        match self.cfg.profile {
            ClientProfile::UserSpaceStyle => {
                if self.inflight.is_empty() {
                    self.stale.push_back(resp);
                } else {
                    let f = self.inflight.remove(0);
                    self.complete(host, f, &resp);
                }
            }
            ClientProfile::KernelStyle => {
                if let Some(idx) = self.inflight.iter().position(|f| f.cid == resp.command_id) {
                    let f = self.inflight.remove(idx);
                    self.complete(host, f, &resp);
                }
            }
        }
        self.pump(host);
    }

    fn complete(&mut self, host: &mut Host, f: Inflight, resp: &NvmeCapsule) {
        // Invalidate before looking at the data so that no late remote write
        // can slip in between verification and use.
        if let Some(rkey) = f.rkey {
            let _ = host.rnic.invalidate_mr(rkey);
        }
        let mut status = match resp.status {
            Status::Success => CommandStatus::Success,
            Status::AuthFailure => CommandStatus::AuthFailure,
            Status::InvalidBlock => CommandStatus::InvalidBlock,
            Status::TransferError => CommandStatus::TransferError,
        };
        let mut data = None;
        if let Command::Read { len, .. } = f.cmd {
            let buf = host
                .rnic
                .memory
                .read(self.slot_addr(f.slot), len as usize)
                .unwrap_or_default();
            if status == CommandStatus::Success && self.cfg.mac {
                let ok = self
                    .key
                    .as_deref()
                    .is_some_and(|k| capsule::verify_data(resp, k, &buf));
                if !ok {
                    status = CommandStatus::Rejected;
                }
            }
            if status == CommandStatus::Success {
                data = Some(buf);
            }
        }
        self.finish(host, &f, status, data);
    }

    fn finish(&mut self, host: &mut Host, f: &Inflight, status: CommandStatus, data: Option<Vec<u8>>) {
        let (op, lba) = match f.cmd {
            Command::Write { lba, .. } => (OpKind::Write, lba),
            Command::Read { lba, .. } => (OpKind::Read, lba),
        };
        host.emit(AppEvent::Completed {
            cid: f.cid,
            op,
            lba,
            status,
            data: data.as_deref().map(short_digest),
        });
        self.completions.push(Completion {
            cid: f.cid,
            op,
            lba,
            status,
            data,
        });
    }

    fn slot_addr(&self, slot: usize) -> u64 {
        self.buf_base + (slot * MAX_IO) as u64
    }

    fn free_slot(&self) -> usize {
        (0..self.cfg.queue_depth)
            .find(|s| self.inflight.iter().all(|f| f.slot != *s))
            .expect("caller checked depth")
    }

    fn pump(&mut self, host: &mut Host) {
        while self.state == ClientState::Connected
            && self.inflight.len() < self.cfg.queue_depth
            && !self.queue.is_empty()
        {
            let cmd = self.queue.pop_front().expect("non-empty");
            self.issue(host, cmd);
        }
    }

    fn issue(&mut self, host: &mut Host, cmd: Command) {
        let cid = self.next_cid;
        self.next_cid = self.next_cid.wrapping_add(1).max(1);
        let token = self.next_token;
        self.next_token += 1;
        let slot = self.free_slot();
        let addr = self.slot_addr(slot);
        let threshold = in_capsule_threshold(host.rnic.config().wire.mtu);
        let mut f = Inflight {
            cid,
            cmd: cmd.clone(),
            slot,
            rkey: None,
            token,
        };

        let io_len = match &cmd {
            Command::Write { data, .. } => data.len(),
            Command::Read { len, .. } => *len as usize,
        };
        if io_len > MAX_IO {
            self.finish(host, &f, CommandStatus::TransferError, None);
            return;
        }

        let mut capsule = match &cmd {
            Command::Write { lba, data } if data.len() <= threshold => {
                NvmeCapsule::write_in_capsule(cid, *lba, data.clone())
            }
            Command::Write { lba, data } => {
                host.rnic.memory.write(addr, data);
                let Some(rkey) = self.buffer_key(host, addr, data.len() as u64, false) else {
                    self.finish(host, &f, CommandStatus::TransferError, None);
                    return;
                };
                f.rkey = (self.cfg.profile == ClientProfile::KernelStyle).then_some(rkey);
                let sgl = Sgl {
                    rkey,
                    vaddr: addr,
                    len: data.len() as u32,
                };
                NvmeCapsule::with_sgl(CapsuleKind::Write, cid, *lba, sgl)
            }
            Command::Read { lba, len } => {
                let Some(rkey) = self.buffer_key(host, addr, *len as u64, true) else {
                    self.finish(host, &f, CommandStatus::TransferError, None);
                    return;
                };
                f.rkey = (self.cfg.profile == ClientProfile::KernelStyle).then_some(rkey);
                let sgl = Sgl {
                    rkey,
                    vaddr: addr,
                    len: *len,
                };
                NvmeCapsule::with_sgl(CapsuleKind::Read, cid, *lba, sgl)
            }
        };
        if self.cfg.mac {
            let key = self.key.clone().unwrap_or_default();
            let data = match &cmd {
                Command::Write { data, .. } if capsule.kind == CapsuleKind::Write => Some(data.as_slice()),
                _ => None,
            };
            capsule::seal(&mut capsule, &key, data);
        }
        let qpn = self.qpn.expect("connected");
        if host.rnic.post_send(qpn, capsule.encode(), host.now).is_err() {
            if let Some(rkey) = f.rkey {
                let _ = host.rnic.invalidate_mr(rkey);
            }
            self.finish(host, &f, CommandStatus::TransferError, None);
            return;
        }
        if self.cfg.profile == ClientProfile::UserSpaceStyle {
            if let Some(resp) = self.stale.pop_front() {
                self.complete(host, f, &resp);
                return;
            }
        }
        host.set_timer(host.now + self.cfg.timeout, token);
        self.inflight.push(f);
    }

    /// Remote key covering the buffer slot: the shared pool key, or a fresh
    /// fast registration.
    fn buffer_key(&mut self, host: &mut Host, addr: u64, len: u64, remote_write: bool) -> Option<u32> {
        match self.cfg.profile {
            ClientProfile::UserSpaceStyle => self.pool_rkey,
            ClientProfile::KernelStyle => {
                let access = if remote_write {
                    Access::REMOTE_WRITE
                } else {
                    Access::REMOTE_READ
                };
                host.rnic
                    .register_mr(&self.actor, addr, len.max(1), access, MrKind::FastReg)
                    .ok()
                    .map(|mr| mr.rkey)
            }
        }
    }
}
