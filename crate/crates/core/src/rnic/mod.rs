//! RNIC model: verbs-style endpoints, the ingress pipeline, memory
//! registration and device limits.

pub mod memory;
pub mod rate;

use std::collections::{BTreeMap, VecDeque};

use crate::fabric::{Actor, ActorId, Privilege};
use crate::wire::{
    self, FabricKind, Opcode, Packet, PortAddr, RdmaExtHeader, RouteHeader, SrcQpnExtHeader,
    TransportHeader, WireConfig,
};
use crate::{Rate, Widths};

pub use memory::{Access, HostMemory, MemoryRegion, MrKind, RkeyGenerator, RkeyMode};

pub type Qpn = u32;
pub type WrId = u64;

/// Reserved endpoint of the connection manager.
pub const CM_QPN: Qpn = 1;
/// Requests a QP may have in flight without acknowledgement.
pub const MAX_UNACKED: usize = 128;
/// Size of the datagram header in front of every CmMad payload.
pub const DATAGRAM_HEADER_LEN: usize = 4;

/// NAK syndromes carried as the one-byte payload of a Nak packet.
pub const NAK_PSN_SEQUENCE: u8 = 0;
pub const NAK_REMOTE_ACCESS: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceLimits {
    pub max_qps_system_wide: usize,
    /// Per-user QP quota enforced by an RDMA cgroup controller.
    pub per_user_quota: Option<usize>,
    pub max_mrs: usize,
}

impl Default for DeviceLimits {
    fn default() -> Self {
        DeviceLimits {
            max_qps_system_wide: 1 << 10,
            per_user_quota: None,
            max_mrs: 1 << 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnicConfig {
    pub widths: Widths,
    pub qpn_seed: u32,
    pub static_rkey: u32,
    pub rkey_stride: u32,
    pub fastreg_rkey_base: u32,
    pub limits: DeviceLimits,
    pub reject_duplicate_dest: bool,
    pub src_qpn_header: bool,
    pub rate_decrease: f64,
    pub rate_recovery: f64,
    pub recovery_period: Option<u64>,
    pub fabric_kind: FabricKind,
    pub wire: WireConfig,
}

impl Default for RnicConfig {
    fn default() -> Self {
        RnicConfig {
            widths: Widths::PAPER,
            qpn_seed: 0x100,
            static_rkey: 0x0000_2a00,
            rkey_stride: 0x100,
            fastreg_rkey_base: 0x0010_0000,
            limits: DeviceLimits::default(),
            reject_duplicate_dest: false,
            src_qpn_header: false,
            rate_decrease: 0.5,
            rate_recovery: 1.05,
            recovery_period: Some(100),
            fabric_kind: FabricKind::RoCE,
            wire: WireConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RnicError {
    #[error("device queue-pair limit exhausted")]
    LimitExhausted,
    #[error("per-user quota exhausted")]
    QuotaExhausted,
    #[error("a queue pair with this destination already exists")]
    DuplicateDestination,
    #[error("send window full")]
    WindowFull,
    #[error("queue pair not ready")]
    QpError,
    #[error("unknown queue pair {0:#x}")]
    UnknownQp(Qpn),
    #[error("operation not valid on this queue pair type")]
    WrongQpKind,
    #[error("memory region already invalid")]
    AlreadyInvalid,
    #[error("unknown memory key {0:#x}")]
    UnknownRkey(u32),
    #[error("memory registration limit exhausted")]
    MrLimitExhausted,
    #[error("local buffer not allocated")]
    BadLocalBuffer,
    #[error("value {0:#x} outside configured field width")]
    OutOfWidth(u32),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}

pub type Result<T> = std::result::Result<T, RnicError>;

/// Sequential QPN allocator with a static post-reboot seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QpnGenerator {
    static_seed: u32,
    counter: u32,
    mask: u32,
}

impl QpnGenerator {
    pub fn new(static_seed: u32, bits: u8) -> Self {
        let mask = ((1u64 << bits) - 1) as u32;
        QpnGenerator {
            static_seed: static_seed & mask,
            counter: 0,
            mask,
        }
    }

    pub fn static_seed(&self) -> u32 {
        self.static_seed
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    pub fn next_qpn(&mut self) -> Qpn {
        let v = self.static_seed.wrapping_add(self.counter) & self.mask;
        self.counter = self.counter.wrapping_add(1);
        v
    }

    pub fn reboot(&mut self) {
        self.counter = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpState {
    Init,
    Ready,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpKind {
    /// Reliable connected.
    Rc,
    /// Unreliable datagram, used for connection management.
    Ud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dest {
    pub addr: PortAddr,
    pub qpn: Qpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    Send,
    Write,
    Read { local_vaddr: u64, len: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Outstanding {
    psn: u32,
    kind: Pending,
    wr_id: WrId,
}

#[derive(Debug, Clone)]
pub struct QueuePair {
    pub qpn: Qpn,
    pub kind: QpKind,
    pub dest: Option<Dest>,
    pub next_send_psn: u32,
    pub expected_recv_psn: u32,
    pub state: QpState,
    pub owner: ActorId,
    pub rate: Rate,
    next_emit: u64,
    outstanding: VecDeque<Outstanding>,
}

impl QueuePair {
    pub fn unacked_count(&self) -> usize {
        self.outstanding.len()
    }

    pub fn rate_factor(&self) -> f64 {
        self.rate.factor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCause {
    /// This QP received a request it could not execute.
    AccessViolation,
    /// The peer reported a remote-access error.
    RemoteNak,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpEventKind {
    Recv { psn: u32, payload: Vec<u8> },
    SendDone { wr_id: WrId },
    ReadDone { wr_id: WrId, local_vaddr: u64, len: u32 },
    Error(ErrorCause),
    RateChanged { factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpEvent {
    pub qpn: Qpn,
    pub owner: ActorId,
    pub kind: QpEventKind,
}

/// A datagram addressed to a UD endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub dest_qpn: Qpn,
    pub owner: ActorId,
    pub src_addr: PortAddr,
    /// Source QPN as claimed by the datagram header.
    pub src_qpn: Qpn,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RnicOutput {
    Transmit { at: u64, packet: Packet },
    Event(QpEvent),
    Datagram(Datagram),
}

/// What the ingress pipeline did with one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    BadChecksum,
    Malformed,
    NoEndpoint,
    SrcQpnMismatch,
    QpNotReady,
    PsnOutOfRange,
    Accepted { qpn: Qpn, opcode: Opcode, psn: u32 },
    Duplicate { qpn: Qpn, psn: u32 },
    OutOfSequence { qpn: Qpn, psn: u32 },
    AccessViolation { qpn: Qpn },
    CnpApplied { qpn: Qpn },
    Acked { qpn: Qpn, completed: usize },
    Nak { qpn: Qpn, syndrome: u8 },
    ReadResponse { qpn: Qpn, matched: bool },
    Datagram { qpn: Qpn },
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        matches!(self, Verdict::Accepted { .. })
    }
}

pub struct Rnic {
    cfg: RnicConfig,
    addr: PortAddr,
    qpn_gen: QpnGenerator,
    static_keys: RkeyGenerator,
    fastreg_keys: RkeyGenerator,
    qps: BTreeMap<Qpn, QueuePair>,
    mrs: BTreeMap<u32, MemoryRegion>,
    pub memory: HostMemory,
    outbox: Vec<RnicOutput>,
    next_wr: WrId,
}

impl Rnic {
    pub fn new(cfg: RnicConfig, addr: PortAddr) -> Self {
        let qpn_gen = QpnGenerator::new(cfg.qpn_seed, cfg.widths.qpn_bits);
        let static_keys =
            RkeyGenerator::new(RkeyMode::StaticSequential, cfg.static_rkey, cfg.rkey_stride);
        let fastreg_keys = RkeyGenerator::new(RkeyMode::SequentialPlusOne, cfg.fastreg_rkey_base, 1);
        Rnic {
            cfg,
            addr,
            qpn_gen,
            static_keys,
            fastreg_keys,
            qps: BTreeMap::new(),
            mrs: BTreeMap::new(),
            memory: HostMemory::default(),
            outbox: Vec::new(),
            next_wr: 1,
        }
    }

    pub fn config(&self) -> &RnicConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut RnicConfig {
        &mut self.cfg
    }

    pub fn addr(&self) -> PortAddr {
        self.addr
    }

    pub fn set_addr(&mut self, addr: PortAddr) {
        self.addr = addr;
    }

    pub fn qpn_generator(&self) -> &QpnGenerator {
        &self.qpn_gen
    }

    fn psn_mask(&self) -> u32 {
        self.cfg.widths.psn_space() - 1
    }

    /// Drops all QPs and registrations and restarts the identifier generators.
    pub fn reboot(&mut self) {
        self.qpn_gen.reboot();
        self.static_keys.reboot();
        self.fastreg_keys.reboot();
        self.qps.clear();
        self.mrs.clear();
        self.outbox.clear();
    }

    pub fn qp(&self, qpn: Qpn) -> Option<&QueuePair> {
        self.qps.get(&qpn)
    }

    pub fn qps(&self) -> impl Iterator<Item = &QueuePair> {
        self.qps.values()
    }

    pub fn qp_count(&self) -> usize {
        self.qps.len()
    }

    pub fn mr(&self, rkey: u32) -> Option<&MemoryRegion> {
        self.mrs.get(&rkey)
    }

    pub fn drain(&mut self) -> Vec<RnicOutput> {
        std::mem::take(&mut self.outbox)
    }

    fn check_limits(&self, actor: &Actor) -> Result<()> {
        if actor.privilege == Privilege::Unprivileged {
            if let Some(q) = self.cfg.limits.per_user_quota {
                let used = self.qps.values().filter(|qp| qp.owner == actor.id).count();
                if used >= q {
                    return Err(RnicError::QuotaExhausted);
                }
            }
        }
        if self.qps.len() >= self.cfg.limits.max_qps_system_wide {
            return Err(RnicError::LimitExhausted);
        }
        Ok(())
    }

    fn new_qp(&self, qpn: Qpn, kind: QpKind, owner: ActorId) -> QueuePair {
        QueuePair {
            qpn,
            kind,
            dest: None,
            next_send_psn: 0,
            expected_recv_psn: 0,
            state: if kind == QpKind::Ud {
                QpState::Ready
            } else {
                QpState::Init
            },
            owner,
            rate: Rate::new(
                self.cfg.rate_decrease,
                self.cfg.rate_recovery,
                self.cfg.recovery_period,
            ),
            next_emit: 0,
            outstanding: VecDeque::new(),
        }
    }

    /// Creates the reserved connection-manager endpoint. It counts toward the
    /// device limit like any other QP.
    pub fn create_cm_endpoint(&mut self, kernel: &Actor) -> Result<Qpn> {
        self.check_limits(kernel)?;
        let qp = self.new_qp(CM_QPN, QpKind::Ud, kernel.id);
        self.qps.insert(CM_QPN, qp);
        Ok(CM_QPN)
    }

    /// Allocates an unconnected QP. QPNs come from the sequential generator,
    /// skipping the reserved values and QPNs still in use.
    pub fn alloc_qp(&mut self, actor: &Actor, kind: QpKind) -> Result<Qpn> {
        self.check_limits(actor)?;
        let space = self.cfg.widths.qpn_space();
        for _ in 0..space {
            let qpn = self.qpn_gen.next_qpn();
            if qpn > CM_QPN && !self.qps.contains_key(&qpn) {
                let qp = self.new_qp(qpn, kind, actor.id);
                self.qps.insert(qpn, qp);
                return Ok(qpn);
            }
        }
        Err(RnicError::LimitExhausted)
    }

    /// Moves a QP to Ready towards `dest`. No check is made that another QP
    /// already targets the same destination unless the mitigation is enabled.
    pub fn connect_qp(&mut self, qpn: Qpn, dest: Dest, send_psn: u32, recv_psn: u32) -> Result<()> {
        let mask = self.psn_mask();
        if send_psn > mask {
            return Err(RnicError::OutOfWidth(send_psn));
        }
        if recv_psn > mask {
            return Err(RnicError::OutOfWidth(recv_psn));
        }
        if self.cfg.reject_duplicate_dest
            && self
                .qps
                .values()
                .any(|q| q.qpn != qpn && q.dest == Some(dest))
        {
            return Err(RnicError::DuplicateDestination);
        }
        let qp = self.qps.get_mut(&qpn).ok_or(RnicError::UnknownQp(qpn))?;
        if qp.kind != QpKind::Rc {
            return Err(RnicError::WrongQpKind);
        }
        qp.dest = Some(dest);
        qp.next_send_psn = send_psn;
        qp.expected_recv_psn = recv_psn;
        qp.state = QpState::Ready;
        qp.outstanding.clear();
        Ok(())
    }

    /// Allocates and connects in one step. Emits no traffic.
    pub fn create_qp(&mut self, actor: &Actor, dest: Dest, initial_psn: u32) -> Result<Qpn> {
        if self.cfg.reject_duplicate_dest && self.qps.values().any(|q| q.dest == Some(dest)) {
            return Err(RnicError::DuplicateDestination);
        }
        let qpn = self.alloc_qp(actor, QpKind::Rc)?;
        if let Err(e) = self.connect_qp(qpn, dest, initial_psn, 0) {
            self.qps.remove(&qpn);
            return Err(e);
        }
        Ok(qpn)
    }

    pub fn destroy_qp(&mut self, qpn: Qpn) {
        self.qps.remove(&qpn);
    }

    /// Forces an error transition, e.g. when the application tears the connection down.
    pub fn set_error(&mut self, qpn: Qpn) {
        if let Some(qp) = self.qps.get_mut(&qpn) {
            qp.state = QpState::Error;
        }
    }

    /// Resets a QP's send side to `send_psn` and forgets unacknowledged requests.
    pub fn reset_qp(&mut self, qpn: Qpn, send_psn: u32) -> Result<()> {
        let mask = self.psn_mask();
        let qp = self.qps.get_mut(&qpn).ok_or(RnicError::UnknownQp(qpn))?;
        if qp.dest.is_none() {
            return Err(RnicError::QpError);
        }
        qp.next_send_psn = send_psn & mask;
        qp.outstanding.clear();
        qp.state = QpState::Ready;
        Ok(())
    }

    fn route_to(&self, dst: PortAddr) -> Result<RouteHeader> {
        Ok(RouteHeader::new(self.addr, dst, self.cfg.fabric_kind)?)
    }

    fn src_ext(&self, qpn: Qpn) -> Option<SrcQpnExtHeader> {
        if self.cfg.src_qpn_header {
            SrcQpnExtHeader::new(qpn).ok()
        } else {
            None
        }
    }

    fn post(
        &mut self,
        qpn: Qpn,
        opcode: Opcode,
        rdma: Option<RdmaExtHeader>,
        payload: Vec<u8>,
        kind: Pending,
        now: u64,
    ) -> Result<WrId> {
        if payload.len() > self.cfg.wire.mtu {
            return Err(wire::WireError::OversizePayload {
                len: payload.len(),
                mtu: self.cfg.wire.mtu,
            }
            .into());
        }
        let mask = self.psn_mask();
        let qp = self.qps.get(&qpn).ok_or(RnicError::UnknownQp(qpn))?;
        if qp.kind != QpKind::Rc {
            return Err(RnicError::WrongQpKind);
        }
        if qp.state != QpState::Ready {
            return Err(RnicError::QpError);
        }
        if qp.outstanding.len() >= MAX_UNACKED {
            return Err(RnicError::WindowFull);
        }
        let dest = qp.dest.ok_or(RnicError::QpError)?;
        let psn = qp.next_send_psn;
        let route = self.route_to(dest.addr)?;
        let transport = TransportHeader::new(opcode, dest.qpn, psn)?;
        let packet = Packet::new(route, transport, rdma, self.src_ext(qpn), payload)?;

        let wr_id = self.next_wr;
        self.next_wr += 1;
        let qp = self.qps.get_mut(&qpn).expect("checked above");
        qp.rate.advance(now);
        let at = now.max(qp.next_emit);
        qp.next_emit = at + qp.rate.gap();
        qp.next_send_psn = (psn + 1) & mask;
        qp.outstanding.push_back(Outstanding { psn, kind, wr_id });
        self.outbox.push(RnicOutput::Transmit { at, packet });
        Ok(wr_id)
    }

    pub fn post_send(&mut self, qpn: Qpn, payload: Vec<u8>, now: u64) -> Result<WrId> {
        self.post(qpn, Opcode::Send, None, payload, Pending::Send, now)
    }

    pub fn post_rdma_write(
        &mut self,
        qpn: Qpn,
        payload: Vec<u8>,
        rkey: u32,
        vaddr: u64,
        now: u64,
    ) -> Result<WrId> {
        let rdma = RdmaExtHeader {
            rkey,
            vaddr,
            dma_len: payload.len() as u32,
        };
        self.post(qpn, Opcode::Write, Some(rdma), payload, Pending::Write, now)
    }

    /// Reads `len` remote bytes into local memory at `local_vaddr`.
    pub fn post_rdma_read(
        &mut self,
        qpn: Qpn,
        len: u32,
        rkey: u32,
        vaddr: u64,
        local_vaddr: u64,
        now: u64,
    ) -> Result<WrId> {
        if self.memory.read(local_vaddr, len as usize).is_none() {
            return Err(RnicError::BadLocalBuffer);
        }
        if len as usize > self.cfg.wire.mtu {
            return Err(wire::WireError::OversizePayload {
                len: len as usize,
                mtu: self.cfg.wire.mtu,
            }
            .into());
        }
        let rdma = RdmaExtHeader {
            rkey,
            vaddr,
            dma_len: len,
        };
        self.post(
            qpn,
            Opcode::Read,
            Some(rdma),
            Vec::new(),
            Pending::Read { local_vaddr, len },
            now,
        )
    }

    /// Sends a datagram from a UD endpoint. The header carries the sender's
    /// own QPN; verbs users cannot choose it.
    pub fn post_datagram(
        &mut self,
        qpn: Qpn,
        dst: PortAddr,
        dest_qpn: Qpn,
        payload: &[u8],
        now: u64,
    ) -> Result<()> {
        let qp = self.qps.get(&qpn).ok_or(RnicError::UnknownQp(qpn))?;
        if qp.kind != QpKind::Ud {
            return Err(RnicError::WrongQpKind);
        }
        let packet = datagram_packet(self.route_to(dst)?, dest_qpn, qpn, payload)?;
        self.outbox.push(RnicOutput::Transmit { at: now, packet });
        Ok(())
    }

    pub fn register_mr(
        &mut self,
        actor: &Actor,
        base_vaddr: u64,
        length: u64,
        access: Access,
        kind: MrKind,
    ) -> Result<MemoryRegion> {
        if self.mrs.values().filter(|m| m.valid).count() >= self.cfg.limits.max_mrs {
            return Err(RnicError::MrLimitExhausted);
        }
        if self.memory.read(base_vaddr, length as usize).is_none() {
            return Err(RnicError::BadLocalBuffer);
        }
        let rkey = match kind {
            MrKind::Static => self.static_keys.next_key(),
            MrKind::FastReg => self.fastreg_keys.next_key(),
        };
        let mr = MemoryRegion {
            rkey,
            base_vaddr,
            length,
            access,
            valid: true,
            kind,
            owner: actor.id,
        };
        self.mrs.insert(rkey, mr.clone());
        Ok(mr)
    }

    pub fn invalidate_mr(&mut self, rkey: u32) -> Result<()> {
        let mr = self.mrs.get_mut(&rkey).ok_or(RnicError::UnknownRkey(rkey))?;
        if !mr.valid {
            return Err(RnicError::AlreadyInvalid);
        }
        mr.valid = false;
        Ok(())
    }

    fn control_packet(&self, qp: &QueuePair, opcode: Opcode, psn: u32, payload: Vec<u8>) -> Option<Packet> {
        let dest = qp.dest?;
        let route = self.route_to(dest.addr).ok()?;
        let transport = TransportHeader::new(opcode, dest.qpn, psn).ok()?;
        Packet::new(route, transport, None, self.src_ext(qp.qpn), payload).ok()
    }

    fn emit_control(&mut self, qpn: Qpn, opcode: Opcode, psn: u32, payload: Vec<u8>, now: u64) {
        let pkt = self
            .qps
            .get(&qpn)
            .and_then(|qp| self.control_packet(qp, opcode, psn, payload));
        if let Some(packet) = pkt {
            self.outbox.push(RnicOutput::Transmit { at: now, packet });
        }
    }

    fn event(&mut self, qpn: Qpn, kind: QpEventKind) {
        if let Some(qp) = self.qps.get(&qpn) {
            self.outbox.push(RnicOutput::Event(QpEvent {
                qpn,
                owner: qp.owner,
                kind,
            }));
        }
    }

    fn fail_qp(&mut self, qpn: Qpn, cause: ErrorCause) {
        if let Some(qp) = self.qps.get_mut(&qpn) {
            if qp.state == QpState::Error {
                return;
            }
            qp.state = QpState::Error;
            qp.outstanding.clear();
        }
        self.event(qpn, QpEventKind::Error(cause));
    }

    /// Runs one received frame through the pipeline: checksum, connection
    /// lookup, PSN check, then execution.
    pub fn ingress(&mut self, bytes: &[u8], now: u64) -> Verdict {
        let pkt = match self.cfg.wire.decode(bytes) {
            Ok(p) => p,
            Err(wire::WireError::BadChecksum { .. }) => return Verdict::BadChecksum,
            Err(_) => return Verdict::Malformed,
        };
        let op = pkt.transport.opcode();
        let dest_qpn = pkt.transport.dest_qpn();

        if op == Opcode::CmMad {
            return self.ingress_datagram(pkt);
        }

        // Lookup on routing information and destination QPN only.
        let src = pkt.route.src_addr;
        let Some(qp) = self.qps.get(&dest_qpn) else {
            return Verdict::NoEndpoint;
        };
        let Some(dest) = qp.dest else {
            return Verdict::NoEndpoint;
        };
        if qp.kind != QpKind::Rc || dest.addr != src {
            return Verdict::NoEndpoint;
        }
        if self.cfg.src_qpn_header
            && pkt.src_qpn_ext.map(|e| e.src_qpn()) != Some(dest.qpn)
        {
            return Verdict::SrcQpnMismatch;
        }
        if qp.state != QpState::Ready {
            return Verdict::QpNotReady;
        }
        let qpn = dest_qpn;

        match op {
            Opcode::Cnp => {
                let qp = self.qps.get_mut(&qpn).expect("looked up");
                qp.rate.on_cnp(now);
                let factor = qp.rate.factor();
                self.event(qpn, QpEventKind::RateChanged { factor });
                Verdict::CnpApplied { qpn }
            }
            Opcode::Ack => self.on_ack(qpn, pkt.transport.psn()),
            Opcode::Nak => {
                let syndrome = pkt.payload.first().copied().unwrap_or(NAK_PSN_SEQUENCE);
                if syndrome == NAK_REMOTE_ACCESS {
                    self.fail_qp(qpn, ErrorCause::RemoteNak);
                }
                Verdict::Nak { qpn, syndrome }
            }
            Opcode::ReadResponse => self.on_read_response(qpn, &pkt),
            Opcode::Send | Opcode::Write | Opcode::Read => self.on_request(qpn, &pkt, now),
            Opcode::CmMad => unreachable!("handled above"),
        }
    }

    fn ingress_datagram(&mut self, pkt: Packet) -> Verdict {
        let qpn = pkt.transport.dest_qpn();
        let Some(qp) = self.qps.get(&qpn) else {
            return Verdict::NoEndpoint;
        };
        if qp.kind != QpKind::Ud {
            return Verdict::NoEndpoint;
        }
        let Some((src_qpn, body)) = split_datagram(&pkt.payload) else {
            return Verdict::Malformed;
        };
        self.outbox.push(RnicOutput::Datagram(Datagram {
            dest_qpn: qpn,
            owner: qp.owner,
            src_addr: pkt.route.src_addr,
            src_qpn,
            payload: body.to_vec(),
        }));
        Verdict::Datagram { qpn }
    }

    fn on_request(&mut self, qpn: Qpn, pkt: &Packet, now: u64) -> Verdict {
        let psn = pkt.transport.psn();
        let mask = self.psn_mask();
        if psn > mask {
            return Verdict::PsnOutOfRange;
        }
        let expected = self.qps[&qpn].expected_recv_psn;
        let half = (mask >> 1) + 1;
        let behind = expected.wrapping_sub(psn) & mask;
        if psn != expected {
            if behind >= 1 && behind <= half {
                // Duplicate: never executed again, but acknowledged so the
                // sender can move on. Reads are idempotent and are answered
                // from current memory instead.
                if pkt.transport.opcode() == Opcode::Read {
                    let ext = pkt.rdma_ext.expect("decoder enforces presence");
                    match self.read_remote(&ext) {
                        Some(data) => self.emit_control(qpn, Opcode::ReadResponse, psn, data, now),
                        None => return self.access_violation(qpn, psn, now),
                    }
                } else {
                    self.emit_control(qpn, Opcode::Ack, psn, Vec::new(), now);
                }
                return Verdict::Duplicate { qpn, psn };
            }
            self.emit_control(qpn, Opcode::Nak, expected, vec![NAK_PSN_SEQUENCE], now);
            return Verdict::OutOfSequence { qpn, psn };
        }

        let op = pkt.transport.opcode();
        match op {
            Opcode::Send => {
                self.event(
                    qpn,
                    QpEventKind::Recv {
                        psn,
                        payload: pkt.payload.clone(),
                    },
                );
                self.emit_control(qpn, Opcode::Ack, psn, Vec::new(), now);
            }
            Opcode::Write => {
                let ext = pkt.rdma_ext.expect("decoder enforces presence");
                let ok = ext.dma_len as usize == pkt.payload.len()
                    && self.remote_access_ok(ext.rkey, true, ext.vaddr, ext.dma_len as u64)
                    && self.memory.write(ext.vaddr, &pkt.payload);
                if !ok {
                    return self.access_violation(qpn, psn, now);
                }
                self.emit_control(qpn, Opcode::Ack, psn, Vec::new(), now);
            }
            Opcode::Read => {
                let ext = pkt.rdma_ext.expect("decoder enforces presence");
                let Some(data) = self.read_remote(&ext) else {
                    return self.access_violation(qpn, psn, now);
                };
                self.emit_control(qpn, Opcode::ReadResponse, psn, data, now);
            }
            _ => unreachable!("only requests reach here"),
        }
        let qp = self.qps.get_mut(&qpn).expect("looked up");
        qp.expected_recv_psn = (psn + 1) & mask;
        if pkt.transport.congestion_mark {
            self.emit_control(qpn, Opcode::Cnp, 0, Vec::new(), now);
        }
        Verdict::Accepted { qpn, opcode: op, psn }
    }

    fn read_remote(&self, ext: &RdmaExtHeader) -> Option<Vec<u8>> {
        if ext.dma_len as usize <= self.cfg.wire.mtu
            && self.remote_access_ok(ext.rkey, false, ext.vaddr, ext.dma_len as u64)
        {
            self.memory.read(ext.vaddr, ext.dma_len as usize)
        } else {
            None
        }
    }

    fn remote_access_ok(&self, rkey: u32, write: bool, vaddr: u64, len: u64) -> bool {
        self.mrs
            .get(&rkey)
            .is_some_and(|mr| mr.permits(write, vaddr, len))
    }

    fn access_violation(&mut self, qpn: Qpn, psn: u32, now: u64) -> Verdict {
        self.emit_control(qpn, Opcode::Nak, psn, vec![NAK_REMOTE_ACCESS], now);
        self.fail_qp(qpn, ErrorCause::AccessViolation);
        Verdict::AccessViolation { qpn }
    }

    /// Cumulative acknowledgement up to and including `psn`, if `psn` names
    /// an outstanding request.
    fn on_ack(&mut self, qpn: Qpn, psn: u32) -> Verdict {
        let qp = self.qps.get_mut(&qpn).expect("looked up");
        let Some(idx) = qp.outstanding.iter().position(|o| o.psn == psn) else {
            return Verdict::Acked { qpn, completed: 0 };
        };
        // Reads complete only through their responses.
        let n = qp
            .outstanding
            .iter()
            .take(idx + 1)
            .take_while(|o| !matches!(o.kind, Pending::Read { .. }))
            .count();
        let done: Vec<Outstanding> = qp.outstanding.drain(..n).collect();
        for o in &done {
            self.event(qpn, QpEventKind::SendDone { wr_id: o.wr_id });
        }
        Verdict::Acked {
            qpn,
            completed: done.len(),
        }
    }

    fn on_read_response(&mut self, qpn: Qpn, pkt: &Packet) -> Verdict {
        let psn = pkt.transport.psn();
        let qp = self.qps.get_mut(&qpn).expect("looked up");
        let Some(idx) = qp
            .outstanding
            .iter()
            .position(|o| o.psn == psn && matches!(o.kind, Pending::Read { .. }))
        else {
            return Verdict::ReadResponse { qpn, matched: false };
        };
        let o = qp.outstanding[idx];
        let Pending::Read { local_vaddr, len } = o.kind else {
            unreachable!()
        };
        if pkt.payload.len() != len as usize {
            return Verdict::ReadResponse { qpn, matched: false };
        }
        let done: Vec<Outstanding> = qp.outstanding.drain(..=idx).collect();
        self.memory.write(local_vaddr, &pkt.payload);
        for d in &done[..done.len() - 1] {
            if matches!(d.kind, Pending::Send | Pending::Write) {
                self.event(qpn, QpEventKind::SendDone { wr_id: d.wr_id });
            }
        }
        self.event(
            qpn,
            QpEventKind::ReadDone {
                wr_id: o.wr_id,
                local_vaddr,
                len,
            },
        );
        Verdict::ReadResponse { qpn, matched: true }
    }
}

/// Builds a CmMad packet whose datagram header claims `src_qpn`.
pub fn datagram_packet(
    route: RouteHeader,
    dest_qpn: Qpn,
    src_qpn: Qpn,
    body: &[u8],
) -> wire::Result<Packet> {
    let mut payload = Vec::with_capacity(DATAGRAM_HEADER_LEN + body.len());
    wire::put_u24(&mut payload, src_qpn & wire::MAX_24);
    payload.push(0);
    payload.extend_from_slice(body);
    Packet::new(
        route,
        TransportHeader::new(Opcode::CmMad, dest_qpn, 0)?,
        None,
        None,
        payload,
    )
}

pub fn split_datagram(payload: &[u8]) -> Option<(Qpn, &[u8])> {
    if payload.len() < DATAGRAM_HEADER_LEN {
        return None;
    }
    let qpn = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
    Some((qpn, &payload[DATAGRAM_HEADER_LEN..]))
}
