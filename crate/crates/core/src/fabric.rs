//! Discrete-event network: nodes, paths, IPsec policies, congestion marking and
//! the capability rules of the two threat models.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use hmac::{Hmac, Mac};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::Sha256;

use crate::wire::{self, FabricKind, Opcode, Packet, PortAddr, WireConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Privilege {
    Unprivileged,
    Admin,
    /// Kernel modules (connection manager, NVMe-oF drivers). Not subject to user quotas.
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    CoLocatedWithVictim,
    RemoteNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Actor {
    pub id: ActorId,
    pub node: NodeId,
    pub privilege: Privilege,
    pub location: Location,
}

impl Actor {
    /// Local unprivileged user on the victim's host.
    pub fn local_user(id: ActorId, node: NodeId) -> Self {
        Actor {
            id,
            node,
            privilege: Privilege::Unprivileged,
            location: Location::CoLocatedWithVictim,
        }
    }

    /// Administrator of another host on the network.
    pub fn remote_admin(id: ActorId, node: NodeId) -> Self {
        Actor {
            id,
            node,
            privilege: Privilege::Admin,
            location: Location::RemoteNode,
        }
    }

    pub fn kernel(id: ActorId, node: NodeId) -> Self {
        Actor {
            id,
            node,
            privilege: Privilege::Kernel,
            location: Location::CoLocatedWithVictim,
        }
    }

    /// Whether the actor may emit packets the verbs interface cannot produce.
    pub fn raw_capable(&self) -> bool {
        self.privilege == Privilege::Admin
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("port address {0} already attached")]
    DuplicateAddress(PortAddr),
    #[error("node {0:?} already attached")]
    DuplicateNode(NodeId),
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("destination {0} unreachable")]
    Unreachable(PortAddr),
    #[error("unprivileged actor may not send with source {0}")]
    SpoofDenied(PortAddr),
    #[error("unprivileged actor may not emit {0:?} packets")]
    RawOpcodeDenied(Opcode),
    #[error("packet dropped by IPsec policy")]
    IpsecDrop,
    #[error("port address change requires admin privilege")]
    NotAdmin,
    #[error(transparent)]
    Wire(#[from] wire::WireError),
}

/// Unordered pair of port addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Path(PortAddr, PortAddr);

impl Path {
    pub fn new(a: PortAddr, b: PortAddr) -> Self {
        if a.0 <= b.0 {
            Path(a, b)
        } else {
            Path(b, a)
        }
    }

    pub fn ends(&self) -> (PortAddr, PortAddr) {
        (self.0, self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpsecPolicy {
    pub path: Path,
    pub key: Vec<u8>,
}

/// Tag size of the idealized AEAD.
pub const IPSEC_TAG_LEN: usize = 16;

fn ipsec_tag(key: &[u8], bytes: &[u8]) -> [u8; IPSEC_TAG_LEN] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("any key length");
    mac.update(bytes);
    let full = mac.finalize().into_bytes();
    let mut tag = [0u8; IPSEC_TAG_LEN];
    tag.copy_from_slice(&full[..IPSEC_TAG_LEN]);
    tag
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub bytes: Vec<u8>,
    pub ipsec_tag: Option<[u8; IPSEC_TAG_LEN]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricEvent {
    pub deliver_time: u64,
    pub seq: u64,
    pub node: NodeId,
    pub ingress_port: PortAddr,
    pub frame: Frame,
}

impl PartialOrd for FabricEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FabricEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_time, self.seq).cmp(&(other.deliver_time, other.seq))
    }
}

/// Captured packet as seen by a passive observer on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Captured {
    pub time: u64,
    pub packet: Packet,
    /// Encrypted frames are opaque to an observer without the key.
    pub encrypted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NodeEntry {
    home: PortAddr,
    current: PortAddr,
    revert_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FabricConfig {
    pub kind: FabricKind,
    pub default_latency: u64,
    pub wire: WireConfig,
    /// Ticks before an administratively reassigned port address reverts.
    pub addr_revert_ticks: u64,
    pub loss_probability: f64,
    pub seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            kind: FabricKind::RoCE,
            default_latency: 1,
            wire: WireConfig::default(),
            addr_revert_ticks: 5000,
            loss_probability: 0.0,
            seed: 0,
        }
    }
}

pub struct Fabric {
    cfg: FabricConfig,
    nodes: BTreeMap<NodeId, NodeEntry>,
    latency: BTreeMap<Path, u64>,
    ipsec: BTreeMap<Path, Vec<u8>>,
    marks: Vec<(Path, u64, u64)>,
    queue: BinaryHeap<Reverse<FabricEvent>>,
    seq: u64,
    rng: ChaCha8Rng,
    capture: Option<Vec<Captured>>,
}

impl Fabric {
    pub fn new(cfg: FabricConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6661_6272_6963);
        Fabric {
            cfg,
            nodes: BTreeMap::new(),
            latency: BTreeMap::new(),
            ipsec: BTreeMap::new(),
            marks: Vec::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            rng,
            capture: None,
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn kind(&self) -> FabricKind {
        self.cfg.kind
    }

    pub fn attach_node(&mut self, node: NodeId, addr: PortAddr) -> Result<(), FabricError> {
        if self.nodes.contains_key(&node) {
            return Err(FabricError::DuplicateNode(node));
        }
        if self.node_at(addr).is_some() {
            return Err(FabricError::DuplicateAddress(addr));
        }
        self.nodes.insert(
            node,
            NodeEntry {
                home: addr,
                current: addr,
                revert_at: None,
            },
        );
        Ok(())
    }

    pub fn detach_node(&mut self, node: NodeId) {
        self.nodes.remove(&node);
    }

    /// Node currently answering at `addr`. When an admin has claimed an address
    /// that is still held by its owner, the owner keeps receiving its traffic.
    pub fn node_at(&self, addr: PortAddr) -> Option<NodeId> {
        let mut found = None;
        for (&id, e) in &self.nodes {
            if e.current == addr {
                if e.home == addr {
                    return Some(id);
                }
                found.get_or_insert(id);
            }
        }
        found
    }

    pub fn address_of(&self, node: NodeId) -> Option<PortAddr> {
        self.nodes.get(&node).map(|e| e.current)
    }

    pub fn home_address(&self, node: NodeId) -> Option<PortAddr> {
        self.nodes.get(&node).map(|e| e.home)
    }

    pub fn set_latency(&mut self, a: PortAddr, b: PortAddr, ticks: u64) {
        self.latency.insert(Path::new(a, b), ticks);
    }

    pub fn add_ipsec_policy(&mut self, policy: IpsecPolicy) {
        self.ipsec.insert(policy.path, policy.key);
    }

    pub fn ipsec_policy(&self, path: Path) -> Option<&[u8]> {
        self.ipsec.get(&path).map(|k| k.as_slice())
    }

    pub fn mark_congestion(&mut self, path: Path, window: std::ops::Range<u64>) {
        self.marks.push((path, window.start, window.end));
    }

    pub fn start_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn captured(&self) -> &[Captured] {
        self.capture.as_deref().unwrap_or(&[])
    }

    /// Administratively moves the node's port to `addr` until the revert deadline.
    pub fn set_port_address(
        &mut self,
        actor: &Actor,
        addr: PortAddr,
        now: u64,
    ) -> Result<(), FabricError> {
        if actor.privilege != Privilege::Admin {
            return Err(FabricError::NotAdmin);
        }
        let revert = now + self.cfg.addr_revert_ticks;
        let entry = self
            .nodes
            .get_mut(&actor.node)
            .ok_or(FabricError::UnknownNode(actor.node))?;
        entry.current = addr;
        entry.revert_at = Some(revert);
        Ok(())
    }

    /// Reverts expired port reassignments.
    pub fn tick(&mut self, now: u64) {
        for e in self.nodes.values_mut() {
            if e.revert_at.is_some_and(|t| now >= t) {
                e.current = e.home;
                e.revert_at = None;
            }
        }
    }

    /// Sends on behalf of `actor`, enforcing its capabilities.
    pub fn send(&mut self, actor: &Actor, pkt: Packet, now: u64) -> Result<(), FabricError> {
        let entry = *self
            .nodes
            .get(&actor.node)
            .ok_or(FabricError::UnknownNode(actor.node))?;
        let privileged = actor.privilege != Privilege::Unprivileged;
        if pkt.route.src_addr != entry.current && actor.privilege != Privilege::Admin {
            return Err(FabricError::SpoofDenied(pkt.route.src_addr));
        }
        if !privileged && matches!(pkt.transport.opcode(), Opcode::Cnp) {
            return Err(FabricError::RawOpcodeDenied(Opcode::Cnp));
        }
        self.transmit(actor.node, pkt, now)
    }

    /// Emission by an RNIC on behalf of its queue pairs. The RNIC stamps its
    /// own address, so no capability checks apply.
    pub fn transmit(&mut self, from: NodeId, mut pkt: Packet, at: u64) -> Result<(), FabricError> {
        let entry = *self
            .nodes
            .get(&from)
            .ok_or(FabricError::UnknownNode(from))?;
        let dst = pkt.route.dst_addr;
        let to = self.node_at(dst).ok_or(FabricError::Unreachable(dst))?;
        let to_home = self.nodes[&to].home;
        // Policies are configured between home addresses; a key is held by
        // the host, whatever address its port currently claims.
        let path = Path::new(pkt.route.src_addr, dst);
        let held_path = Path::new(entry.home, to_home);
        let latency = self
            .latency
            .get(&held_path)
            .copied()
            .unwrap_or(self.cfg.default_latency);
        let deliver_time = at + latency;

        if pkt.transport.opcode().is_data()
            && self
                .marks
                .iter()
                .any(|&(p, s, e)| (p == path || p == held_path) && at >= s && at < e)
        {
            pkt.transport.congestion_mark = true;
            pkt.reseal();
        }

        let bytes = self.cfg.wire.encode(&pkt)?;
        // Connection management datagrams travel outside the security association.
        let is_cm = pkt.transport.opcode() == Opcode::CmMad;
        let protected = (!is_cm)
            .then(|| self.ipsec.get(&held_path).or_else(|| self.ipsec.get(&path)))
            .flatten();
        let ipsec_tag = protected.map(|_| {
            // Sender holds a key only if it is an endpoint of the protected path.
            match self.ipsec.get(&held_path) {
                Some(key) => ipsec_tag(key, &bytes),
                None => [0u8; IPSEC_TAG_LEN],
            }
        });
        if let Some(cap) = self.capture.as_mut() {
            cap.push(Captured {
                time: at,
                packet: pkt.clone(),
                encrypted: ipsec_tag.is_some(),
            });
        }
        if self.cfg.loss_probability > 0.0 && self.rng.gen_bool(self.cfg.loss_probability) {
            return Ok(());
        }
        self.seq += 1;
        self.queue.push(Reverse(FabricEvent {
            deliver_time,
            seq: self.seq,
            node: to,
            ingress_port: dst,
            frame: Frame {
                bytes,
                ipsec_tag,
            },
        }));
        Ok(())
    }

    /// Receiver side IPsec check. Returns false when the frame must be dropped.
    pub fn ingress_ok(&self, ev: &FabricEvent) -> bool {
        let Some(home) = self.home_address(ev.node) else {
            return false;
        };
        // Frames arriving over a protected path must carry a valid tag under
        // the key of the path from the claimed source to this host.
        let src = match wire::decode_packet(&ev.frame.bytes) {
            Ok(p) if p.transport.opcode() == Opcode::CmMad => return true,
            Ok(p) => p.route.src_addr,
            Err(_) => return ev.frame.ipsec_tag.is_none(),
        };
        let src_home = self
            .node_at(src)
            .and_then(|n| self.home_address(n))
            .unwrap_or(src);
        let path = Path::new(src_home, home);
        match (self.ipsec.get(&path), ev.frame.ipsec_tag) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(key), Some(tag)) => ipsec_tag(key, &ev.frame.bytes) == tag,
        }
    }

    pub fn next_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(e)| e.deliver_time)
    }

    pub fn pop_due(&mut self, now: u64) -> Option<FabricEvent> {
        if self.next_time()? <= now {
            self.queue.pop().map(|Reverse(e)| e)
        } else {
            None
        }
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{RouteHeader, TransportHeader};

    const A: PortAddr = PortAddr(0x0a00_0001);
    const B: PortAddr = PortAddr(0x0a00_0002);
    const C: PortAddr = PortAddr(0x0a00_0003);

    fn fabric() -> Fabric {
        let mut f = Fabric::new(FabricConfig::default());
        f.attach_node(NodeId(1), A).unwrap();
        f.attach_node(NodeId(2), B).unwrap();
        f.attach_node(NodeId(3), C).unwrap();
        f
    }

    fn send_pkt(src: PortAddr, dst: PortAddr, op: Opcode) -> Packet {
        Packet::new(
            RouteHeader::new(src, dst, FabricKind::RoCE).unwrap(),
            TransportHeader::new(op, 0x20, 0).unwrap(),
            None,
            None,
            if op == Opcode::Cnp { vec![] } else { vec![1, 2] },
        )
        .unwrap()
    }

    fn deliver_all(f: &mut Fabric) -> Vec<(FabricEvent, bool)> {
        let mut out = vec![];
        while let Some(t) = f.next_time() {
            let ev = f.pop_due(t).unwrap();
            let ok = f.ingress_ok(&ev);
            out.push((ev, ok));
        }
        out
    }

    #[test]
    fn duplicate_address_rejected() {
        let mut f = fabric();
        assert_eq!(
            f.attach_node(NodeId(9), B),
            Err(FabricError::DuplicateAddress(B))
        );
    }

    #[test]
    fn detached_node_unreachable() {
        let mut f = fabric();
        let u = Actor::local_user(ActorId(1), NodeId(1));
        f.send(&u, send_pkt(A, B, Opcode::Send), 0).unwrap();
        f.detach_node(NodeId(2));
        assert_eq!(
            f.send(&u, send_pkt(A, B, Opcode::Send), 0),
            Err(FabricError::Unreachable(B))
        );
    }

    #[test]
    fn spoofing_requires_admin() {
        let mut f = fabric();
        let u = Actor::local_user(ActorId(1), NodeId(3));
        assert_eq!(
            f.send(&u, send_pkt(A, B, Opcode::Send), 0),
            Err(FabricError::SpoofDenied(A))
        );
        let adm = Actor::remote_admin(ActorId(2), NodeId(3));
        f.send(&adm, send_pkt(A, B, Opcode::Send), 0).unwrap();
        assert_eq!(deliver_all(&mut f).len(), 1);
    }

    #[test]
    fn unprivileged_cannot_emit_cnp() {
        let mut f = fabric();
        let u = Actor::local_user(ActorId(1), NodeId(1));
        assert_eq!(
            f.send(&u, send_pkt(A, B, Opcode::Cnp), 0),
            Err(FabricError::RawOpcodeDenied(Opcode::Cnp))
        );
    }

    #[test]
    fn ipsec_passes_colocated_and_drops_spoofer() {
        let mut f = fabric();
        f.add_ipsec_policy(IpsecPolicy {
            path: Path::new(A, B),
            key: b"path-key".to_vec(),
        });
        let u = Actor::local_user(ActorId(1), NodeId(1));
        let adm = Actor::remote_admin(ActorId(2), NodeId(3));
        f.send(&u, send_pkt(A, B, Opcode::Send), 0).unwrap();
        f.send(&adm, send_pkt(A, B, Opcode::Send), 0).unwrap();
        let got = deliver_all(&mut f);
        assert_eq!(got.len(), 2);
        assert!(got[0].1);
        assert!(!got[1].1);
    }

    #[test]
    fn admin_port_reassignment_reverts() {
        let mut f = fabric();
        let adm = Actor::remote_admin(ActorId(2), NodeId(3));
        f.set_port_address(&adm, PortAddr(0x0a00_0009), 10).unwrap();
        assert_eq!(f.node_at(PortAddr(0x0a00_0009)), Some(NodeId(3)));
        f.tick(5009);
        assert_eq!(f.address_of(NodeId(3)), Some(PortAddr(0x0a00_0009)));
        f.tick(5010);
        assert_eq!(f.address_of(NodeId(3)), Some(C));
        let u = Actor::local_user(ActorId(1), NodeId(1));
        assert_eq!(f.set_port_address(&u, C, 0), Err(FabricError::NotAdmin));
    }

    #[test]
    fn congestion_window_marks_data_only_inside() {
        let mut f = fabric();
        f.mark_congestion(Path::new(A, B), 5..10);
        let u = Actor::local_user(ActorId(1), NodeId(1));
        f.send(&u, send_pkt(A, B, Opcode::Send), 4).unwrap();
        f.send(&u, send_pkt(A, B, Opcode::Send), 5).unwrap();
        f.send(&u, send_pkt(A, B, Opcode::Send), 10).unwrap();
        let marks: Vec<bool> = deliver_all(&mut f)
            .iter()
            .map(|(e, _)| {
                wire::decode_packet(&e.frame.bytes)
                    .unwrap()
                    .transport
                    .congestion_mark
            })
            .collect();
        assert_eq!(marks, vec![false, true, false]);
    }

    #[test]
    fn delivery_order_is_time_then_insertion() {
        let mut f = fabric();
        f.set_latency(A, C, 5);
        let u = Actor::local_user(ActorId(1), NodeId(1));
        f.send(&u, send_pkt(A, C, Opcode::Send), 0).unwrap();
        f.send(&u, send_pkt(A, B, Opcode::Send), 0).unwrap();
        f.send(&u, send_pkt(A, B, Opcode::Send), 0).unwrap();
        let got = deliver_all(&mut f);
        let order: Vec<(u64, NodeId)> = got.iter().map(|(e, _)| (e.deliver_time, e.node)).collect();
        assert_eq!(
            order,
            vec![(1, NodeId(2)), (1, NodeId(2)), (5, NodeId(3))]
        );
        assert!(got[0].0.seq < got[1].0.seq);
    }
}
