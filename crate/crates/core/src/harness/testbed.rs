//! Standard topology: an NVMe-oF client and target, a control client whose
//! connection shares the target device, and a remote node for attackers
//! that do not live on a victim host.

use serde::{Deserialize, Serialize};

use crate::cm::CmMitigations;
use crate::fabric::{Actor, IpsecPolicy, Location, NodeId, Path, Privilege};
use crate::nvmeof::client::{ClientConfig, ClientProfile, Command};
use crate::nvmeof::target::{TargetConfig, TargetRegistration};
use crate::nvmeof::BlockStore;
use crate::rnic::Qpn;
use crate::sim::{TraceEvent, World, WorldConfig};
use crate::wire::PortAddr;
use crate::{ActorId, Widths};

pub const CLIENT_ADDR: PortAddr = PortAddr(0x0a00_0001);
pub const TARGET_ADDR: PortAddr = PortAddr(0x0a00_0002);
pub const REMOTE_ADDR: PortAddr = PortAddr(0x0a00_0003);
pub const CONTROL_ADDR: PortAddr = PortAddr(0x0a00_0004);

/// Block the setup phase fills with a known pattern.
pub const KNOWN_LBA: u64 = 4;
pub const KNOWN_LEN: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SecurityConfig {
    None,
    InBand,
    IPsec,
}

impl SecurityConfig {
    pub const ALL: [SecurityConfig; 3] = [SecurityConfig::None, SecurityConfig::InBand, SecurityConfig::IPsec];

    pub fn label(self) -> &'static str {
        match self {
            SecurityConfig::None => "None",
            SecurityConfig::InBand => "InBand",
            SecurityConfig::IPsec => "IPsec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ThreatModel {
    /// Unprivileged user logged into a victim host.
    #[serde(rename = "TLU")]
    Tlu,
    /// Administrator of a different host with raw-packet capability.
    #[serde(rename = "TRA")]
    Tra,
}

impl ThreatModel {
    pub const ALL: [ThreatModel; 2] = [ThreatModel::Tlu, ThreatModel::Tra];

    pub fn label(self) -> &'static str {
        match self {
            ThreatModel::Tlu => "TLU",
            ThreatModel::Tra => "TRA",
        }
    }
}

/// Proposed countermeasures, all off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Mitigations {
    pub src_qpn_header: bool,
    pub reject_duplicate_dest: bool,
    pub filter_cm_source: bool,
    pub challenge_disconnect: bool,
    pub per_user_quota: Option<usize>,
    pub target_local_only: bool,
    pub dual_mac: bool,
}

impl Mitigations {
    pub fn all() -> Self {
        Mitigations {
            src_qpn_header: true,
            reject_duplicate_dest: true,
            filter_cm_source: true,
            challenge_disconnect: true,
            per_user_quota: Some(16),
            target_local_only: true,
            dual_mac: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedConfig {
    pub widths: Widths,
    pub seed: u64,
    pub security: SecurityConfig,
    pub mitigations: Mitigations,
    pub profile: ClientProfile,
    pub max_qps: usize,
    /// Lets attackers read clear-text traffic on the client-target path.
    pub eavesdrop: bool,
    /// Disables congestion-rate recovery so rate factors can be compared exactly.
    pub rate_recovery: bool,
}

impl TestbedConfig {
    pub fn new(widths: Widths, seed: u64) -> Self {
        TestbedConfig {
            widths,
            seed,
            security: SecurityConfig::None,
            mitigations: Mitigations::default(),
            profile: ClientProfile::UserSpaceStyle,
            max_qps: 1024,
            eavesdrop: false,
            rate_recovery: false,
        }
    }
}

pub struct Testbed {
    pub cfg: TestbedConfig,
    pub world: World,
    pub client_node: NodeId,
    pub target_node: NodeId,
    pub remote_node: NodeId,
    pub control_node: NodeId,
    pub client: ActorId,
    pub target: ActorId,
    pub control: ActorId,
    /// Victim applications added by individual scenarios.
    pub extra_victims: Vec<ActorId>,
}

const SECRET: &[u8] = b"dhchap-shared-secret";
const PSK: &[u8] = b"capsule-mac-pre-shared-key";

/// Contents the setup phase writes at [`KNOWN_LBA`].
pub fn known_pattern() -> Vec<u8> {
    (0..KNOWN_LEN).map(|i| (i % 251) as u8).collect()
}

impl Testbed {
    /// Builds the topology, connects both clients and runs a short warm-up
    /// workload so that sequence numbers have moved away from their start.
    pub fn new(cfg: TestbedConfig) -> Self {
        let m = cfg.mitigations;
        let mut wc = WorldConfig::new(cfg.widths, cfg.seed);
        wc.rnic.src_qpn_header = m.src_qpn_header;
        wc.rnic.reject_duplicate_dest = m.reject_duplicate_dest;
        wc.rnic.limits.per_user_quota = m.per_user_quota;
        wc.rnic.limits.max_qps_system_wide = cfg.max_qps;
        if !cfg.rate_recovery {
            wc.rnic.recovery_period = None;
        }
        wc.cm = CmMitigations {
            filter_cm_source: m.filter_cm_source,
            challenge_disconnect: m.challenge_disconnect,
        };
        let mut world = World::new(wc);
        let client_node = world.add_node(CLIENT_ADDR).expect("fresh address");
        let target_node = world.add_node(TARGET_ADDR).expect("fresh address");
        let remote_node = world.add_node(REMOTE_ADDR).expect("fresh address");
        let control_node = world.add_node(CONTROL_ADDR).expect("fresh address");

        if cfg.security == SecurityConfig::IPsec {
            for (a, key) in [(CLIENT_ADDR, b"sa-client".as_slice()), (CONTROL_ADDR, b"sa-control")] {
                world.fabric.add_ipsec_policy(IpsecPolicy {
                    path: Path::new(a, TARGET_ADDR),
                    key: key.to_vec(),
                });
            }
        }

        let inband = cfg.security == SecurityConfig::InBand;
        let tcfg = TargetConfig {
            ip_filter: vec![CLIENT_ADDR, CONTROL_ADDR],
            inband_secret: inband.then(|| SECRET.to_vec()),
            psk: Some(PSK.to_vec()),
            registration: if m.target_local_only {
                TargetRegistration::LocalOnly
            } else {
                TargetRegistration::RemoteAccessible
            },
            mac: m.dual_mac,
            ..TargetConfig::default()
        };
        let target = world.add_target(target_node, tcfg);
        let client = world.add_client(client_node, Self::client_config(&cfg, cfg.profile));
        let control = world.add_client(control_node, Self::client_config(&cfg, ClientProfile::KernelStyle));

        let mut tb = Testbed {
            cfg,
            world,
            client_node,
            target_node,
            remote_node,
            control_node,
            client,
            target,
            control,
            extra_victims: Vec::new(),
        };
        tb.world.fabric.start_capture();
        tb.world.connect_client(client);
        tb.settle();
        tb.world.connect_client(control);
        tb.settle();
        tb.run(
            client,
            vec![
                Command::Write {
                    lba: KNOWN_LBA,
                    data: known_pattern(),
                },
                Command::Write {
                    lba: 1,
                    data: b"warm-up".to_vec(),
                },
                Command::Read { lba: 1, len: 7 },
            ],
        );
        tb.run(
            control,
            vec![Command::Write {
                lba: 100,
                data: vec![0x5a; 512],
            }],
        );
        tb
    }

    fn client_config(cfg: &TestbedConfig, profile: ClientProfile) -> ClientConfig {
        let mut c = ClientConfig::new(profile, TARGET_ADDR);
        if cfg.security == SecurityConfig::InBand {
            c.secret = Some(SECRET.to_vec());
        }
        c.psk = Some(PSK.to_vec());
        c.mac = cfg.mitigations.dual_mac;
        c
    }

    /// Runs the world until nothing is pending (bounded).
    pub fn settle(&mut self) {
        self.world.run_until_idle(100_000);
    }

    pub fn run(&mut self, client: ActorId, cmds: Vec<Command>) {
        for c in cmds {
            self.world.submit(client, c);
        }
        self.settle();
    }

    pub fn store(&self) -> &BlockStore {
        &self.world.target(self.target).store
    }

    /// Actors whose application-visible behaviour defines "the victim".
    pub fn victims(&self) -> Vec<ActorId> {
        let mut v = vec![self.client, self.target, self.control];
        v.extend(&self.extra_victims);
        v
    }

    pub fn victim_trace(&self) -> Vec<TraceEvent> {
        self.world.trace_of(&self.victims())
    }

    pub fn client_qpn(&self) -> Option<Qpn> {
        self.world.client(self.client).qpn()
    }

    /// Target-side QPN of the connection from `peer`.
    pub fn target_qpn_for(&self, peer: PortAddr) -> Option<Qpn> {
        self.world
            .target(self.target)
            .connections()
            .find(|(_, c)| c.peer == peer)
            .map(|(_, c)| c.qpn)
    }

    /// Creates an attacker for the threat model: an unprivileged user on
    /// `colocated_with`, or an administrator on the remote node.
    pub fn attacker(&mut self, model: ThreatModel, colocated_with: NodeId) -> Actor {
        match model {
            ThreatModel::Tlu => {
                self.world
                    .new_actor(colocated_with, Privilege::Unprivileged, Location::CoLocatedWithVictim)
            }
            ThreatModel::Tra => self
                .world
                .new_actor(self.remote_node, Privilege::Admin, Location::RemoteNode),
        }
    }
}
