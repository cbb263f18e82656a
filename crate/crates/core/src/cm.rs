//! Connection manager: connection setup and teardown over the reserved
//! datagram endpoint, the hidden-key generator, and disconnect verification.
//!
//! Message layout inside a CmMad datagram (after the 4-byte datagram header):
//!
//! ```text
//! kind 1B | qpn 3B | start_psn 3B | initiator_key 4B | target_key 4B | payload_len 2B | payload
//! ```
//!
//! All integers are big-endian.

use std::collections::BTreeMap;

use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::Sha256;

use crate::fabric::ActorId;
use crate::rnic::Qpn;
use crate::wire::{self, PortAddr, Reader, WireError};

pub const CM_HEADER_LEN: usize = 17;
pub const CHALLENGE_RETRIES: u32 = 3;
pub const CHALLENGE_TIMEOUT: u64 = 50;
pub const CONNECT_TIMEOUT: u64 = 100;
const NONCE_LEN: usize = 16;

/// `seed ^ counter`, with the counter starting at zero when the module loads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmKeyGenerator {
    seed: u32,
    local_key_state: u32,
    mask: u32,
}

impl CmKeyGenerator {
    pub fn new(seed: u32, key_bits: u8) -> Self {
        let mask = if key_bits >= 32 {
            u32::MAX
        } else {
            (1 << key_bits) - 1
        };
        CmKeyGenerator {
            seed: seed & mask,
            local_key_state: 0,
            mask,
        }
    }

    pub fn get_key(&mut self) -> u32 {
        let k = (self.seed ^ self.local_key_state) & self.mask;
        self.local_key_state = self.local_key_state.wrapping_add(1);
        k
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }

    pub fn counter(&self) -> u32 {
        self.local_key_state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmKind {
    ConnectReq,
    ConnectRep,
    ReadyToUse,
    DisconnectReq,
    ChallengeReq,
    ChallengeRep,
    ConnectReject,
}

impl CmKind {
    pub fn code(self) -> u8 {
        match self {
            CmKind::ConnectReq => 0x01,
            CmKind::ConnectRep => 0x02,
            CmKind::ReadyToUse => 0x03,
            CmKind::DisconnectReq => 0x04,
            CmKind::ChallengeReq => 0x05,
            CmKind::ChallengeRep => 0x06,
            CmKind::ConnectReject => 0x07,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0x01 => CmKind::ConnectReq,
            0x02 => CmKind::ConnectRep,
            0x03 => CmKind::ReadyToUse,
            0x04 => CmKind::DisconnectReq,
            0x05 => CmKind::ChallengeReq,
            0x06 => CmKind::ChallengeRep,
            0x07 => CmKind::ConnectReject,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmMessage {
    pub kind: CmKind,
    pub qpn: Qpn,
    pub start_psn: u32,
    pub initiator_key: u32,
    pub target_key: u32,
    pub private_payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CmCodecError {
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("payload length field does not match")]
    LengthMismatch,
    #[error("private payload too long")]
    PayloadTooLong,
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl CmMessage {
    pub fn encode(&self) -> Result<Vec<u8>, CmCodecError> {
        if self.private_payload.len() > u16::MAX as usize {
            return Err(CmCodecError::PayloadTooLong);
        }
        for (field, v) in [("qpn", self.qpn), ("start_psn", self.start_psn)] {
            if v > wire::MAX_24 {
                return Err(WireError::FieldOutOfRange { field, value: v }.into());
            }
        }
        let mut out = Vec::with_capacity(CM_HEADER_LEN + self.private_payload.len());
        out.push(self.kind.code());
        wire::put_u24(&mut out, self.qpn);
        wire::put_u24(&mut out, self.start_psn);
        out.extend_from_slice(&self.initiator_key.to_be_bytes());
        out.extend_from_slice(&self.target_key.to_be_bytes());
        out.extend_from_slice(&(self.private_payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.private_payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CmCodecError> {
        let mut r = Reader::new(bytes);
        let code = r.u8()?;
        let kind = CmKind::from_code(code).ok_or(CmCodecError::UnknownKind(code))?;
        let qpn = r.u24()?;
        let start_psn = r.u24()?;
        let initiator_key = r.u32()?;
        let target_key = r.u32()?;
        let len = r.u16()? as usize;
        let payload = r.rest();
        if payload.len() != len {
            return Err(CmCodecError::LengthMismatch);
        }
        Ok(CmMessage {
            kind,
            qpn,
            start_psn,
            initiator_key,
            target_key,
            private_payload: payload.to_vec(),
        })
    }

    pub fn control(kind: CmKind, qpn: Qpn, ik: u32, tk: u32, payload: Vec<u8>) -> Self {
        CmMessage {
            kind,
            qpn,
            start_psn: 0,
            initiator_key: ik,
            target_key: tk,
            private_payload: payload,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Requested,
    Established,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Challenge {
    nonce: [u8; NONCE_LEN],
    attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmConnection {
    pub id: ConnId,
    pub app: ActorId,
    pub role: Role,
    pub local_qpn: Qpn,
    pub remote_qpn: Qpn,
    pub peer_addr: PortAddr,
    pub state: ConnState,
    local_key: u32,
    remote_key: u32,
    req_payload: Vec<u8>,
    rep_payload: Vec<u8>,
    challenge: Option<Challenge>,
}

impl CmConnection {
    fn keys(&self) -> (u32, u32) {
        match self.role {
            Role::Initiator => (self.local_key, self.remote_key),
            Role::Target => (self.remote_key, self.local_key),
        }
    }

    /// `(initiator_key, target_key)`. Applications never see these; the
    /// accessor exists for test oracles that inspect hidden state.
    pub fn hidden_keys(&self) -> (u32, u32) {
        self.keys()
    }

    fn secret(&self) -> Vec<u8> {
        let mut mac = Hmac::<Sha256>::new_from_slice(b"cm-challenge").expect("any key length");
        mac.update(&self.req_payload);
        mac.update(&[0xff]);
        mac.update(&self.rep_payload);
        mac.finalize().into_bytes().to_vec()
    }
}

fn challenge_response(secret: &[u8], nonce: &[u8]) -> Vec<u8> {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("any key length");
    mac.update(nonce);
    mac.finalize().into_bytes()[..16].to_vec()
}

/// Notifications delivered to applications. They never carry keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CmEventKind {
    /// Delivered to the listener for each admitted-by-filter request.
    ConnectRequest {
        peer: PortAddr,
        remote_qpn: Qpn,
        remote_start_psn: u32,
        private_payload: Vec<u8>,
    },
    /// Delivered to the initiator; it answers with [`Cm::ready`] or [`Cm::disconnect`].
    Replied {
        remote_qpn: Qpn,
        remote_start_psn: u32,
        private_payload: Vec<u8>,
    },
    Established { private_payload: Vec<u8> },
    Rejected,
    Timeout,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmEvent {
    pub app: ActorId,
    pub conn: ConnId,
    pub kind: CmEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmTimer {
    Connect(ConnId),
    Challenge(ConnId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CmOutput {
    Send { dst: PortAddr, msg: CmMessage },
    Event(CmEvent),
    Timer { at: u64, timer: CmTimer },
}

/// What happened to one received message; used by traces and oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmVerdict {
    Malformed,
    SourceFiltered,
    NoMatch,
    Processed,
    ChallengeStarted,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CmMitigations {
    /// Accept only datagrams whose source QPN is the reserved CM endpoint.
    pub filter_cm_source: bool,
    /// Verify disconnect requests by challenging the recorded peer.
    pub challenge_disconnect: bool,
}

pub struct Cm {
    addr: PortAddr,
    keys: CmKeyGenerator,
    rng: ChaCha8Rng,
    mitigations: CmMitigations,
    listener: Option<ActorId>,
    conns: BTreeMap<ConnId, CmConnection>,
    next_conn: u64,
    outbox: Vec<CmOutput>,
}

impl Cm {
    pub fn new(addr: PortAddr, key_seed: u32, key_bits: u8, rng_seed: u64, mitigations: CmMitigations) -> Self {
        Cm {
            addr,
            keys: CmKeyGenerator::new(key_seed, key_bits),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            mitigations,
            listener: None,
            conns: BTreeMap::new(),
            next_conn: 1,
            outbox: Vec::new(),
        }
    }

    pub fn addr(&self) -> PortAddr {
        self.addr
    }

    pub fn key_generator(&self) -> &CmKeyGenerator {
        &self.keys
    }

    pub fn mitigations(&self) -> CmMitigations {
        self.mitigations
    }

    pub fn listen(&mut self, app: ActorId) {
        self.listener = Some(app);
    }

    pub fn connection(&self, id: ConnId) -> Option<&CmConnection> {
        self.conns.get(&id)
    }

    pub fn connections(&self) -> impl Iterator<Item = &CmConnection> {
        self.conns.values()
    }

    pub fn drain(&mut self) -> Vec<CmOutput> {
        std::mem::take(&mut self.outbox)
    }

    fn event(&mut self, id: ConnId, kind: CmEventKind) {
        if let Some(c) = self.conns.get(&id) {
            self.outbox.push(CmOutput::Event(CmEvent {
                app: c.app,
                conn: id,
                kind,
            }));
        }
    }

    fn send(&mut self, dst: PortAddr, msg: CmMessage) {
        self.outbox.push(CmOutput::Send { dst, msg });
    }

    fn new_conn(&mut self, app: ActorId, role: Role, local_qpn: Qpn, peer: PortAddr) -> ConnId {
        let id = ConnId(self.next_conn);
        self.next_conn += 1;
        self.conns.insert(
            id,
            CmConnection {
                id,
                app,
                role,
                local_qpn,
                remote_qpn: 0,
                peer_addr: peer,
                state: ConnState::Requested,
                local_key: 0,
                remote_key: 0,
                req_payload: Vec::new(),
                rep_payload: Vec::new(),
                challenge: None,
            },
        );
        id
    }

    /// Starts an active connect from `local_qpn` to the CM at `peer`.
    pub fn connect(
        &mut self,
        app: ActorId,
        local_qpn: Qpn,
        start_psn: u32,
        peer: PortAddr,
        private_payload: Vec<u8>,
        now: u64,
    ) -> ConnId {
        let id = self.new_conn(app, Role::Initiator, local_qpn, peer);
        let key = self.keys.get_key();
        let c = self.conns.get_mut(&id).expect("just inserted");
        c.local_key = key;
        c.req_payload = private_payload.clone();
        self.send(
            peer,
            CmMessage {
                kind: CmKind::ConnectReq,
                qpn: local_qpn,
                start_psn,
                initiator_key: key,
                target_key: 0,
                private_payload,
            },
        );
        self.outbox.push(CmOutput::Timer {
            at: now + CONNECT_TIMEOUT,
            timer: CmTimer::Connect(id),
        });
        id
    }

    /// Listener accepts a pending request with its own QP and start PSN.
    pub fn accept(&mut self, id: ConnId, local_qpn: Qpn, start_psn: u32, private_payload: Vec<u8>) {
        let Some(c) = self.conns.get(&id) else { return };
        if c.role != Role::Target || c.state != ConnState::Requested {
            return;
        }
        let key = self.keys.get_key();
        let c = self.conns.get_mut(&id).expect("checked");
        c.local_key = key;
        c.local_qpn = local_qpn;
        c.rep_payload = private_payload.clone();
        let msg = CmMessage {
            kind: CmKind::ConnectRep,
            qpn: local_qpn,
            start_psn,
            initiator_key: c.remote_key,
            target_key: key,
            private_payload,
        };
        let dst = c.peer_addr;
        self.send(dst, msg);
    }

    pub fn reject(&mut self, id: ConnId) {
        let Some(c) = self.conns.get(&id) else { return };
        if c.role != Role::Target || c.state != ConnState::Requested {
            return;
        }
        let msg = CmMessage::control(CmKind::ConnectReject, c.remote_qpn, c.remote_key, 0, vec![]);
        let dst = c.peer_addr;
        self.conns.remove(&id);
        self.send(dst, msg);
    }

    /// Initiator confirms a reply and completes the handshake.
    pub fn ready(&mut self, id: ConnId, private_payload: Vec<u8>) {
        let Some(c) = self.conns.get_mut(&id) else { return };
        if c.role != Role::Initiator || c.state != ConnState::Requested || c.remote_qpn == 0 {
            return;
        }
        c.state = ConnState::Established;
        let (ik, tk) = c.keys();
        let msg = CmMessage::control(CmKind::ReadyToUse, c.remote_qpn, ik, tk, private_payload);
        let dst = c.peer_addr;
        self.send(dst, msg);
        self.event(
            id,
            CmEventKind::Established {
                private_payload: Vec::new(),
            },
        );
    }

    /// Local disconnect: notifies the peer and surfaces Disconnected. A second
    /// call is a no-op.
    pub fn disconnect(&mut self, id: ConnId) {
        let Some(c) = self.conns.get_mut(&id) else { return };
        if c.state == ConnState::Disconnected {
            return;
        }
        let was_requested = c.state == ConnState::Requested && c.remote_qpn == 0;
        c.state = ConnState::Disconnected;
        c.challenge = None;
        let (ik, tk) = c.keys();
        let msg = CmMessage::control(CmKind::DisconnectReq, c.remote_qpn, ik, tk, vec![]);
        let dst = c.peer_addr;
        if !was_requested {
            self.send(dst, msg);
        }
        self.event(id, CmEventKind::Disconnected);
    }

    fn find(&self, local_qpn: Qpn, ik: u32, tk: u32) -> Option<ConnId> {
        self.conns
            .values()
            .find(|c| c.local_qpn == local_qpn && c.keys() == (ik, tk))
            .map(|c| c.id)
    }

    /// Processes one datagram addressed to the CM endpoint.
    pub fn handle_mad(&mut self, src: PortAddr, src_qpn_observed: Qpn, body: &[u8], now: u64) -> CmVerdict {
        if self.mitigations.filter_cm_source && src_qpn_observed != crate::rnic::CM_QPN {
            return CmVerdict::SourceFiltered;
        }
        let Ok(msg) = CmMessage::decode(body) else {
            return CmVerdict::Malformed;
        };
        match msg.kind {
            CmKind::ConnectReq => {
                let Some(app) = self.listener else {
                    return CmVerdict::NoMatch;
                };
                let id = self.new_conn(app, Role::Target, 0, src);
                let c = self.conns.get_mut(&id).expect("just inserted");
                c.remote_qpn = msg.qpn;
                c.remote_key = msg.initiator_key;
                c.req_payload = msg.private_payload.clone();
                self.event(
                    id,
                    CmEventKind::ConnectRequest {
                        peer: src,
                        remote_qpn: msg.qpn,
                        remote_start_psn: msg.start_psn,
                        private_payload: msg.private_payload,
                    },
                );
                CmVerdict::Processed
            }
            CmKind::ConnectRep => {
                let Some(id) = self.conns.values().find(|c| {
                    c.role == Role::Initiator
                        && c.state == ConnState::Requested
                        && c.remote_qpn == 0
                        && c.local_key == msg.initiator_key
                        && c.peer_addr == src
                }).map(|c| c.id) else {
                    return CmVerdict::NoMatch;
                };
                let c = self.conns.get_mut(&id).expect("found");
                c.remote_qpn = msg.qpn;
                c.remote_key = msg.target_key;
                c.rep_payload = msg.private_payload.clone();
                self.event(
                    id,
                    CmEventKind::Replied {
                        remote_qpn: msg.qpn,
                        remote_start_psn: msg.start_psn,
                        private_payload: msg.private_payload,
                    },
                );
                CmVerdict::Processed
            }
            CmKind::ConnectReject => {
                let Some(id) = self.conns.values().find(|c| {
                    c.role == Role::Initiator
                        && c.state == ConnState::Requested
                        && c.local_key == msg.initiator_key
                        && c.peer_addr == src
                }).map(|c| c.id) else {
                    return CmVerdict::NoMatch;
                };
                self.event(id, CmEventKind::Rejected);
                self.conns.remove(&id);
                CmVerdict::Processed
            }
            CmKind::ReadyToUse => {
                let Some(id) = self.find(msg.qpn, msg.initiator_key, msg.target_key) else {
                    return CmVerdict::NoMatch;
                };
                let c = self.conns.get_mut(&id).expect("found");
                if c.state != ConnState::Requested || c.role != Role::Target {
                    return CmVerdict::NoMatch;
                }
                c.state = ConnState::Established;
                self.event(
                    id,
                    CmEventKind::Established {
                        private_payload: msg.private_payload,
                    },
                );
                CmVerdict::Processed
            }
            CmKind::DisconnectReq => {
                // The sender's address is not compared with the recorded peer.
                let Some(id) = self.find(msg.qpn, msg.initiator_key, msg.target_key) else {
                    return CmVerdict::NoMatch;
                };
                let c = &self.conns[&id];
                if c.state != ConnState::Established {
                    return CmVerdict::NoMatch;
                }
                if !self.mitigations.challenge_disconnect {
                    self.conns.get_mut(&id).expect("found").state = ConnState::Disconnected;
                    self.event(id, CmEventKind::Disconnected);
                    return CmVerdict::Disconnected;
                }
                if c.challenge.is_some() {
                    return CmVerdict::ChallengeStarted;
                }
                let mut nonce = [0u8; NONCE_LEN];
                self.rng.fill_bytes(&mut nonce);
                self.conns.get_mut(&id).expect("found").challenge = Some(Challenge { nonce, attempts: 1 });
                self.send_challenge(id, now);
                CmVerdict::ChallengeStarted
            }
            CmKind::ChallengeReq => {
                let Some(id) = self.find(msg.qpn, msg.initiator_key, msg.target_key) else {
                    return CmVerdict::NoMatch;
                };
                let c = &self.conns[&id];
                // A peer that asked for the disconnect itself stays silent.
                if c.state != ConnState::Established || c.peer_addr != src {
                    return CmVerdict::NoMatch;
                }
                let resp = challenge_response(&c.secret(), &msg.private_payload);
                let (ik, tk) = c.keys();
                let reply = CmMessage::control(CmKind::ChallengeRep, c.remote_qpn, ik, tk, resp);
                self.send(src, reply);
                CmVerdict::Processed
            }
            CmKind::ChallengeRep => {
                let Some(id) = self.find(msg.qpn, msg.initiator_key, msg.target_key) else {
                    return CmVerdict::NoMatch;
                };
                let c = &self.conns[&id];
                let Some(ch) = c.challenge else {
                    return CmVerdict::NoMatch;
                };
                if c.peer_addr != src || challenge_response(&c.secret(), &ch.nonce) != msg.private_payload {
                    return CmVerdict::NoMatch;
                }
                self.conns.get_mut(&id).expect("found").challenge = None;
                CmVerdict::Processed
            }
        }
    }

    fn send_challenge(&mut self, id: ConnId, now: u64) {
        let c = &self.conns[&id];
        let ch = c.challenge.expect("challenge pending");
        let (ik, tk) = c.keys();
        let msg = CmMessage::control(CmKind::ChallengeReq, c.remote_qpn, ik, tk, ch.nonce.to_vec());
        let dst = c.peer_addr;
        self.send(dst, msg);
        self.outbox.push(CmOutput::Timer {
            at: now + CHALLENGE_TIMEOUT,
            timer: CmTimer::Challenge(id),
        });
    }

    pub fn on_timer(&mut self, timer: CmTimer, now: u64) {
        match timer {
            CmTimer::Connect(id) => {
                if self
                    .conns
                    .get(&id)
                    .is_some_and(|c| c.state == ConnState::Requested)
                {
                    self.event(id, CmEventKind::Timeout);
                    self.conns.remove(&id);
                }
            }
            CmTimer::Challenge(id) => {
                let Some(c) = self.conns.get_mut(&id) else { return };
                let Some(ch) = c.challenge.as_mut() else { return };
                if c.state != ConnState::Established {
                    return;
                }
                if ch.attempts > CHALLENGE_RETRIES {
                    c.challenge = None;
                    c.state = ConnState::Disconnected;
                    self.event(id, CmEventKind::Disconnected);
                } else {
                    ch.attempts += 1;
                    self.send_challenge(id, now);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recurrence_holds_for_all_16_bit_counters() {
        let seed = 0xbeef;
        let mut g = CmKeyGenerator::new(seed, 16);
        let mut prev = g.get_key();
        assert_eq!(prev, seed);
        for n in 1u32..(1 << 16) {
            let k = g.get_key();
            assert_eq!(k, seed ^ n);
            assert_eq!(prev ^ k, (n - 1) ^ n);
            prev = k;
        }
    }

    #[test]
    fn consecutive_key_hamming_distance() {
        assert_eq!((4u32 ^ 5).count_ones(), 1);
        assert_eq!((7u32 ^ 8).count_ones(), 4);
        let mut g = CmKeyGenerator::new(0x1234_5678, 32);
        g.get_key();
        g.get_key();
        g.get_key();
        g.get_key();
        let (a, b) = (g.get_key(), g.get_key());
        assert_eq!(a ^ b, 1);
    }

    #[test]
    fn message_round_trip() {
        let m = CmMessage {
            kind: CmKind::DisconnectReq,
            qpn: 0x00abcd,
            start_psn: 0x000123,
            initiator_key: 0xdead_beef,
            target_key: 0x0102_0304,
            private_payload: b"pp".to_vec(),
        };
        let b = m.encode().unwrap();
        assert_eq!(b.len(), CM_HEADER_LEN + 2);
        assert_eq!(
            hex::encode(&b),
            "0400abcd000123deadbeef010203040002" .to_owned() + "7070"
        );
        assert_eq!(CmMessage::decode(&b).unwrap(), m);
        assert_eq!(
            CmMessage::decode(&b[..b.len() - 1]),
            Err(CmCodecError::LengthMismatch)
        );
    }

    const A: PortAddr = PortAddr(1);
    const B: PortAddr = PortAddr(2);

    struct Duo {
        a: Cm,
        b: Cm,
    }

    // Shuttles messages between two CMs until quiet; returns app events.
    fn pump(d: &mut Duo, now: u64) -> Vec<(PortAddr, CmEvent)> {
        let mut events = vec![];
        loop {
            let mut moved = false;
            for side in [A, B] {
                let out = if side == A { d.a.drain() } else { d.b.drain() };
                for o in out {
                    match o {
                        CmOutput::Send { dst, msg } => {
                            moved = true;
                            let bytes = msg.encode().unwrap();
                            let to = if dst == A { &mut d.a } else { &mut d.b };
                            to.handle_mad(side, 1, &bytes, now);
                        }
                        CmOutput::Event(e) => events.push((side, e)),
                        CmOutput::Timer { .. } => {}
                    }
                }
            }
            if !moved {
                return events;
            }
        }
    }

    fn established(m: CmMitigations) -> (Duo, ConnId, ConnId) {
        let mut d = Duo {
            a: Cm::new(A, 0x1111, 16, 1, m),
            b: Cm::new(B, 0x2222, 16, 2, m),
        };
        d.b.listen(ActorId(20));
        let ca = d.a.connect(ActorId(10), 0x50, 7, B, b"req".to_vec(), 0);
        let ev = pump(&mut d, 0);
        let cb = ev
            .iter()
            .find_map(|(_, e)| matches!(e.kind, CmEventKind::ConnectRequest { .. }).then_some(e.conn))
            .unwrap();
        d.b.accept(cb, 0x60, 9, b"rep".to_vec());
        pump(&mut d, 0);
        d.a.ready(ca, vec![]);
        let ev = pump(&mut d, 0);
        assert_eq!(
            ev.iter()
                .filter(|(_, e)| matches!(e.kind, CmEventKind::Established { .. }))
                .count(),
            2
        );
        (d, ca, cb)
    }

    #[test]
    fn connect_establishes_both_sides_with_keys_recorded() {
        let (d, ca, cb) = established(CmMitigations::default());
        let a = d.a.connection(ca).unwrap();
        let b = d.b.connection(cb).unwrap();
        assert_eq!((a.local_qpn, a.remote_qpn), (0x50, 0x60));
        assert_eq!((b.local_qpn, b.remote_qpn), (0x60, 0x50));
        assert_eq!(a.hidden_keys(), b.hidden_keys());
        assert_eq!(a.hidden_keys(), (0x1111, 0x2222));
    }

    #[test]
    fn forged_disconnect_with_keys_from_anywhere() {
        let (mut d, _ca, cb) = established(CmMitigations::default());
        let forged = CmMessage::control(CmKind::DisconnectReq, 0x60, 0x1111, 0x2222, vec![]);
        let v = d.b.handle_mad(PortAddr(99), 0x777, &forged.encode().unwrap(), 0);
        assert_eq!(v, CmVerdict::Disconnected);
        assert_eq!(d.b.connection(cb).unwrap().state, ConnState::Disconnected);
    }

    #[test]
    fn wrong_key_is_silent() {
        let (mut d, _ca, cb) = established(CmMitigations::default());
        let forged = CmMessage::control(CmKind::DisconnectReq, 0x60, 0x1111, 0x2223, vec![]);
        assert_eq!(
            d.b.handle_mad(PortAddr(99), 0x777, &forged.encode().unwrap(), 0),
            CmVerdict::NoMatch
        );
        assert!(d.b.drain().is_empty());
        assert_eq!(d.b.connection(cb).unwrap().state, ConnState::Established);
    }

    #[test]
    fn source_filter_drops_user_endpoints() {
        let m = CmMitigations {
            filter_cm_source: true,
            ..Default::default()
        };
        let (mut d, _ca, cb) = established(m);
        let forged = CmMessage::control(CmKind::DisconnectReq, 0x60, 0x1111, 0x2222, vec![]);
        assert_eq!(
            d.b.handle_mad(A, 0x777, &forged.encode().unwrap(), 0),
            CmVerdict::SourceFiltered
        );
        assert_eq!(d.b.connection(cb).unwrap().state, ConnState::Established);
    }

    #[test]
    fn live_peer_refutes_forged_disconnect() {
        let m = CmMitigations {
            challenge_disconnect: true,
            ..Default::default()
        };
        let (mut d, _ca, cb) = established(m);
        let forged = CmMessage::control(CmKind::DisconnectReq, 0x60, 0x1111, 0x2222, vec![]);
        assert_eq!(
            d.b.handle_mad(PortAddr(99), 1, &forged.encode().unwrap(), 0),
            CmVerdict::ChallengeStarted
        );
        pump(&mut d, 0);
        for t in 1..=5 {
            d.b.on_timer(CmTimer::Challenge(cb), t * CHALLENGE_TIMEOUT);
            pump(&mut d, t * CHALLENGE_TIMEOUT);
        }
        assert_eq!(d.b.connection(cb).unwrap().state, ConnState::Established);
    }

    #[test]
    fn genuine_disconnect_survives_challenge() {
        let m = CmMitigations {
            challenge_disconnect: true,
            filter_cm_source: true,
        };
        let (mut d, ca, cb) = established(m);
        d.a.disconnect(ca);
        let ev = pump(&mut d, 0);
        assert!(ev.iter().any(|(s, e)| *s == A && e.kind == CmEventKind::Disconnected));
        let mut t = 0;
        for _ in 0..=CHALLENGE_RETRIES {
            t += CHALLENGE_TIMEOUT;
            d.b.on_timer(CmTimer::Challenge(cb), t);
            pump(&mut d, t);
        }
        assert_eq!(d.b.connection(cb).unwrap().state, ConnState::Disconnected);
        // Second disconnect is a no-op.
        d.a.disconnect(ca);
        assert!(d.a.drain().is_empty());
    }

    #[test]
    fn disconnect_is_notification_only() {
        let (mut d, ca, cb) = established(CmMitigations::default());
        d.a.disconnect(ca);
        let ev = pump(&mut d, 0);
        let at_b: Vec<_> = ev.iter().filter(|(s, _)| *s == B).collect();
        assert_eq!(at_b.len(), 1);
        assert_eq!(at_b[0].1.conn, cb);
        assert_eq!(at_b[0].1.kind, CmEventKind::Disconnected);
    }
}
