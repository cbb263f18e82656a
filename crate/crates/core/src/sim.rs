//! Single-threaded event loop tying the fabric, the per-node RNIC and
//! connection manager, and the NVMe-oF applications together.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cm::{Cm, CmEvent, CmMitigations, CmOutput, CmTimer, CmVerdict};
use crate::fabric::{Actor, ActorId, Fabric, FabricConfig, FabricError, Location, NodeId, Privilege};
use crate::nvmeof::client::{ClientConfig, Command, NvmeClient};
use crate::nvmeof::target::{NvmeTarget, TargetConfig};
use crate::rnic::{Datagram, QpEvent, Rnic, RnicConfig, RnicOutput, Verdict, CM_QPN};
use crate::wire::{Packet, PortAddr};
use crate::Widths;

/// Application-visible event, free of timing so that runs with and without
/// background attacker activity can be compared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub actor: ActorId,
    pub kind: AppEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Write,
    Read,
}

/// How a client command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandStatus {
    Success,
    AuthFailure,
    InvalidBlock,
    TransferError,
    /// Response or data failed local MAC verification.
    Rejected,
    Timeout,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppEvent {
    Connected { peer: PortAddr },
    ConnectFailed { reason: String },
    Admitted { peer: PortAddr },
    Refused { peer: PortAddr, reason: String },
    Completed {
        cid: u16,
        op: OpKind,
        lba: u64,
        status: CommandStatus,
        /// Short digest of the data returned to the application by a read.
        data: Option<String>,
    },
    Served {
        cid: u16,
        op: OpKind,
        lba: u64,
        status: CommandStatus,
    },
    Disconnected,
}

impl std::fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "actor{} ", self.actor.0)?;
        match &self.kind {
            AppEvent::Connected { peer } => write!(f, "connected {peer}"),
            AppEvent::ConnectFailed { reason } => write!(f, "connect-failed {reason}"),
            AppEvent::Admitted { peer } => write!(f, "admitted {peer}"),
            AppEvent::Refused { peer, reason } => write!(f, "refused {peer} {reason}"),
            AppEvent::Completed {
                cid,
                op,
                lba,
                status,
                data,
            } => {
                write!(f, "completed cid={cid} {op:?} lba={lba} {status:?}")?;
                if let Some(d) = data {
                    write!(f, " data={d}")?;
                }
                Ok(())
            }
            AppEvent::Served { cid, op, lba, status } => {
                write!(f, "served cid={cid} {op:?} lba={lba} {status:?}")
            }
            AppEvent::Disconnected => write!(f, "disconnected"),
        }
    }
}

/// What the world did with one delivered frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub time: u64,
    pub node: NodeId,
    /// `None` when the frame was dropped by the path's IPsec check.
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmRecord {
    pub time: u64,
    pub node: NodeId,
    pub verdict: CmVerdict,
}

/// Events for actors that are not applications, such as attack programs.
#[derive(Debug, Clone, PartialEq)]
pub enum Mail {
    Qp(QpEvent),
    Datagram(Datagram),
    Cm(CmEvent),
}

pub struct Node {
    pub id: NodeId,
    pub rnic: Rnic,
    pub cm: Cm,
    pub kernel: Actor,
}

pub enum App {
    Client(NvmeClient),
    Target(NvmeTarget),
}

#[derive(Debug, Clone, Copy)]
enum Timer {
    Cm(NodeId, CmTimer),
    App(ActorId, u64),
}

/// Handle given to an application while it reacts to an event.
pub struct Host<'a> {
    pub now: u64,
    pub actor: Actor,
    pub rnic: &'a mut Rnic,
    pub cm: &'a mut Cm,
    pub rng: &'a mut ChaCha8Rng,
    trace: &'a mut Vec<TraceEvent>,
    timers: &'a mut Vec<(u64, u64)>,
}

impl Host<'_> {
    pub fn set_timer(&mut self, at: u64, token: u64) {
        self.timers.push((at, token));
    }

    pub fn emit(&mut self, kind: AppEvent) {
        self.trace.push(TraceEvent {
            actor: self.actor.id,
            kind,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub widths: Widths,
    pub fabric: FabricConfig,
    pub rnic: RnicConfig,
    pub cm: CmMitigations,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(widths: Widths, seed: u64) -> Self {
        WorldConfig {
            widths,
            fabric: FabricConfig {
                seed,
                ..FabricConfig::default()
            },
            rnic: RnicConfig {
                widths,
                ..RnicConfig::default()
            },
            cm: CmMitigations::default(),
            seed,
        }
    }
}

pub struct World {
    cfg: WorldConfig,
    now: u64,
    pub fabric: Fabric,
    nodes: BTreeMap<NodeId, Node>,
    actors: BTreeMap<ActorId, Actor>,
    apps: BTreeMap<ActorId, App>,
    mailboxes: BTreeMap<ActorId, Vec<(u64, Mail)>>,
    timer_heap: BinaryHeap<Reverse<(u64, u64)>>,
    timer_slots: BTreeMap<u64, Timer>,
    timer_seq: u64,
    trace: Vec<TraceEvent>,
    deliveries: Vec<DeliveryRecord>,
    cm_log: Vec<CmRecord>,
    rng: ChaCha8Rng,
    next_actor: u32,
    next_node: u32,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Self {
        World {
            fabric: Fabric::new(cfg.fabric.clone()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            now: 0,
            nodes: BTreeMap::new(),
            actors: BTreeMap::new(),
            apps: BTreeMap::new(),
            mailboxes: BTreeMap::new(),
            timer_heap: BinaryHeap::new(),
            timer_slots: BTreeMap::new(),
            timer_seq: 0,
            trace: Vec::new(),
            deliveries: Vec::new(),
            cm_log: Vec::new(),
            next_actor: 1,
            next_node: 1,
        }
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Attaches a node using the world's RNIC template.
    pub fn add_node(&mut self, addr: PortAddr) -> Result<NodeId, FabricError> {
        let rnic = self.cfg.rnic.clone();
        self.add_node_with(addr, rnic, None)
    }

    /// Attaches a node with its own RNIC configuration and, optionally, a
    /// fixed CM key seed (otherwise drawn from the world RNG).
    pub fn add_node_with(
        &mut self,
        addr: PortAddr,
        rnic: RnicConfig,
        cm_key_seed: Option<u32>,
    ) -> Result<NodeId, FabricError> {
        let id = NodeId(self.next_node);
        self.fabric.attach_node(id, addr)?;
        self.next_node += 1;
        let key_seed = cm_key_seed.unwrap_or_else(|| self.rng.gen());
        let cm = Cm::new(
            addr,
            key_seed,
            self.cfg.widths.key_bits,
            self.rng.gen(),
            self.cfg.cm,
        );
        let kernel = self.new_actor(id, Privilege::Kernel, Location::CoLocatedWithVictim);
        let mut rnic = Rnic::new(rnic, addr);
        rnic.create_cm_endpoint(&kernel)
            .expect("fresh device has room for the CM endpoint");
        self.nodes.insert(
            id,
            Node {
                id,
                rnic,
                cm,
                kernel,
            },
        );
        Ok(id)
    }

    pub fn new_actor(&mut self, node: NodeId, privilege: Privilege, location: Location) -> Actor {
        let actor = Actor {
            id: ActorId(self.next_actor),
            node,
            privilege,
            location,
        };
        self.next_actor += 1;
        self.actors.insert(actor.id, actor);
        actor
    }

    pub fn actor(&self, id: ActorId) -> Option<&Actor> {
        self.actors.get(&id)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes.get_mut(&id).expect("unknown node")
    }

    pub fn add_client(&mut self, node: NodeId, cfg: ClientConfig) -> ActorId {
        let actor = self.new_actor(node, Privilege::Kernel, Location::CoLocatedWithVictim);
        let client = NvmeClient::new(actor, cfg);
        self.apps.insert(actor.id, App::Client(client));
        actor.id
    }

    pub fn add_target(&mut self, node: NodeId, cfg: TargetConfig) -> ActorId {
        let actor = self.new_actor(node, Privilege::Kernel, Location::CoLocatedWithVictim);
        let target = NvmeTarget::new(actor, cfg);
        self.apps.insert(actor.id, App::Target(target));
        self.node_mut(node).cm.listen(actor.id);
        actor.id
    }

    pub fn client(&self, id: ActorId) -> &NvmeClient {
        match &self.apps[&id] {
            App::Client(c) => c,
            App::Target(_) => panic!("actor {id:?} is a target"),
        }
    }

    pub fn target(&self, id: ActorId) -> &NvmeTarget {
        match &self.apps[&id] {
            App::Target(t) => t,
            App::Client(_) => panic!("actor {id:?} is a client"),
        }
    }

    /// Starts the client's connection handshake.
    pub fn connect_client(&mut self, id: ActorId) {
        self.with_app(id, |app, host| {
            if let App::Client(c) = app {
                c.connect(host);
            }
        });
        self.flush();
    }

    /// Queues a command; it is issued as soon as the queue depth allows.
    pub fn submit(&mut self, id: ActorId, cmd: Command) {
        self.with_app(id, |app, host| {
            if let App::Client(c) = app {
                c.submit(host, cmd);
            }
        });
        self.flush();
    }

    /// Application-initiated teardown.
    pub fn disconnect_client(&mut self, id: ActorId) {
        self.with_app(id, |app, host| {
            if let App::Client(c) = app {
                c.disconnect(host);
            }
        });
        self.flush();
    }

    fn with_app(&mut self, id: ActorId, f: impl FnOnce(&mut App, &mut Host)) {
        let Some(app) = self.apps.get_mut(&id) else {
            return;
        };
        let actor = self.actors[&id];
        let node = self.nodes.get_mut(&actor.node).expect("actor node exists");
        let mut timers = Vec::new();
        let mut host = Host {
            now: self.now,
            actor,
            rnic: &mut node.rnic,
            cm: &mut node.cm,
            rng: &mut self.rng,
            trace: &mut self.trace,
            timers: &mut timers,
        };
        f(app, &mut host);
        for (at, token) in timers {
            self.push_timer(at, Timer::App(id, token));
        }
    }

    fn push_timer(&mut self, at: u64, timer: Timer) {
        self.timer_seq += 1;
        self.timer_heap.push(Reverse((at, self.timer_seq)));
        self.timer_slots.insert(self.timer_seq, timer);
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Trace restricted to the given actors.
    pub fn trace_of(&self, actors: &[ActorId]) -> Vec<TraceEvent> {
        self.trace
            .iter()
            .filter(|e| actors.contains(&e.actor))
            .cloned()
            .collect()
    }

    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.deliveries
    }

    pub fn cm_log(&self) -> &[CmRecord] {
        &self.cm_log
    }

    pub fn take_mail(&mut self, actor: ActorId) -> Vec<Mail> {
        self.take_mail_timed(actor).into_iter().map(|(_, m)| m).collect()
    }

    /// Like [`World::take_mail`], with the time each item arrived.
    pub fn take_mail_timed(&mut self, actor: ActorId) -> Vec<(u64, Mail)> {
        self.mailboxes.remove(&actor).unwrap_or_default()
    }

    /// Raw frame injection on behalf of `actor`, subject to its capabilities.
    pub fn raw_send(&mut self, actor: &Actor, pkt: Packet) -> Result<(), FabricError> {
        self.fabric.send(actor, pkt, self.now)
    }

    /// Administrative port address change; the RNIC follows the port.
    pub fn set_port_address(&mut self, actor: &Actor, addr: PortAddr) -> Result<(), FabricError> {
        self.fabric.set_port_address(actor, addr, self.now)?;
        self.node_mut(actor.node).rnic.set_addr(addr);
        Ok(())
    }

    fn next_event_time(&self) -> Option<u64> {
        let t = self.timer_heap.peek().map(|Reverse((at, _))| *at);
        match (self.fabric.next_time(), t) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes everything due at the next event time. Returns false when
    /// nothing is pending.
    pub fn step(&mut self) -> bool {
        self.flush();
        let Some(t) = self.next_event_time() else {
            return false;
        };
        self.now = self.now.max(t);
        self.fabric.tick(self.now);
        let addrs: Vec<(NodeId, PortAddr)> = self
            .nodes
            .keys()
            .filter_map(|&n| self.fabric.address_of(n).map(|a| (n, a)))
            .collect();
        for (n, a) in addrs {
            let rnic = &mut self.node_mut(n).rnic;
            if rnic.addr() != a {
                rnic.set_addr(a);
            }
        }

        while let Some(ev) = self.fabric.pop_due(self.now) {
            let verdict = if self.fabric.ingress_ok(&ev) {
                let node = self.nodes.get_mut(&ev.node).expect("fabric delivers to nodes");
                Some(node.rnic.ingress(&ev.frame.bytes, self.now))
            } else {
                None
            };
            self.deliveries.push(DeliveryRecord {
                time: self.now,
                node: ev.node,
                verdict,
            });
            self.flush();
        }
        while let Some(&Reverse((at, seq))) = self.timer_heap.peek() {
            if at > self.now {
                break;
            }
            self.timer_heap.pop();
            let timer = self.timer_slots.remove(&seq).expect("slot for every entry");
            match timer {
                Timer::Cm(n, t) => {
                    let now = self.now;
                    self.node_mut(n).cm.on_timer(t, now);
                }
                Timer::App(id, token) => self.with_app(id, |app, host| match app {
                    App::Client(c) => c.on_timer(host, token),
                    App::Target(t) => t.on_timer(host, token),
                }),
            }
            self.flush();
        }
        true
    }

    /// Runs until no events remain or `max_ticks` have elapsed.
    pub fn run_until_idle(&mut self, max_ticks: u64) {
        let deadline = self.now.saturating_add(max_ticks);
        self.flush();
        while self.next_event_time().is_some_and(|t| t <= deadline) {
            self.step();
        }
    }

    /// Runs every event due up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: u64) {
        self.flush();
        while self.next_event_time().is_some_and(|at| at <= t) {
            self.step();
        }
        self.now = self.now.max(t);
        self.fabric.tick(self.now);
    }

    pub fn advance(&mut self, ticks: u64) {
        let t = self.now + ticks;
        self.run_until(t);
    }

    /// Drains every outbox until the system is quiet.
    pub fn flush(&mut self) {
        loop {
            let mut busy = false;
            let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
            for n in ids {
                let (rnic_out, cm_out) = {
                    let node = self.node_mut(n);
                    (node.rnic.drain(), node.cm.drain())
                };
                busy |= !rnic_out.is_empty() || !cm_out.is_empty();
                for out in rnic_out {
                    self.on_rnic_output(n, out);
                }
                for out in cm_out {
                    self.on_cm_output(n, out);
                }
            }
            if !busy {
                break;
            }
        }
    }

    fn on_rnic_output(&mut self, n: NodeId, out: RnicOutput) {
        let now = self.now;
        match out {
            RnicOutput::Transmit { at, packet } => {
                // Unreachable destinations are silently lost, as on a real wire.
                let _ = self.fabric.transmit(n, packet, at);
            }
            RnicOutput::Event(ev) => {
                let owner = ev.owner;
                if self.apps.contains_key(&owner) {
                    self.with_app(owner, |app, host| match app {
                        App::Client(c) => c.on_qp_event(host, ev),
                        App::Target(t) => t.on_qp_event(host, ev),
                    });
                } else {
                    self.mailboxes.entry(owner).or_default().push((now, Mail::Qp(ev)));
                }
            }
            RnicOutput::Datagram(d) => {
                if d.dest_qpn == CM_QPN {
                    let verdict = self
                        .node_mut(n)
                        .cm
                        .handle_mad(d.src_addr, d.src_qpn, &d.payload, now);
                    self.cm_log.push(CmRecord {
                        time: now,
                        node: n,
                        verdict,
                    });
                } else {
                    self.mailboxes
                        .entry(d.owner)
                        .or_default()
                        .push((now, Mail::Datagram(d)));
                }
            }
        }
    }

    fn on_cm_output(&mut self, n: NodeId, out: CmOutput) {
        let now = self.now;
        match out {
            CmOutput::Send { dst, msg } => {
                if let Ok(bytes) = msg.encode() {
                    let _ = self
                        .node_mut(n)
                        .rnic
                        .post_datagram(CM_QPN, dst, CM_QPN, &bytes, now);
                }
            }
            CmOutput::Event(ev) => {
                let app = ev.app;
                if self.apps.contains_key(&app) {
                    self.with_app(app, |a, host| match a {
                        App::Client(c) => c.on_cm_event(host, ev),
                        App::Target(t) => t.on_cm_event(host, ev),
                    });
                } else {
                    self.mailboxes.entry(app).or_default().push((now, Mail::Cm(ev)));
                }
            }
            CmOutput::Timer { at, timer } => self.push_timer(at, Timer::Cm(n, timer)),
        }
    }

    /// Random draw from the world RNG, for scenario setup.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
