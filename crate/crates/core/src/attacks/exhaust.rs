//! Denial of new connections by holding every queue pair of a device.

use crate::harness::testbed::TARGET_ADDR;
use crate::harness::{Testbed, ThreatModel};
use crate::nvmeof::{ClientConfig, ClientProfile, ClientState};
use crate::rnic::QpKind;

use super::{AttackId, AttackOutcome, Effect};

/// Connection attempts a remote attacker makes against the target.
const REMOTE_ATTEMPTS: u64 = 16;

/// A local user allocates queue pairs on the client host until the device
/// refuses; a kernel-space client started afterwards cannot connect. A
/// remote attacker can only try to open connections to the target from its
/// own address.
pub fn exhaust_connections(tb: &mut Testbed, model: ThreatModel, attack: bool) -> AttackOutcome {
    let mut cost = 1;
    // Created in the baseline too, so actor numbering matches.
    let actor = tb.attacker(model, tb.client_node);
    if attack {
        match model {
            ThreatModel::Tlu => {
                let rnic = &mut tb.world.node_mut(tb.client_node).rnic;
                cost = 0;
                loop {
                    cost += 1;
                    if rnic.alloc_qp(&actor, QpKind::Rc).is_err() {
                        break;
                    }
                }
            }
            ThreatModel::Tra => {
                let remote = tb.remote_node;
                for _ in 0..REMOTE_ATTEMPTS {
                    let now = tb.world.now();
                    let node = tb.world.node_mut(remote);
                    let Ok(qpn) = node.rnic.alloc_qp(&actor, QpKind::Rc) else {
                        break;
                    };
                    node.cm.connect(actor.id, qpn, 0, TARGET_ADDR, Vec::new(), now);
                    tb.settle();
                }
                tb.world.take_mail(actor.id);
                cost = REMOTE_ATTEMPTS;
            }
        }
    }

    // A kernel-space client on the same host starting after the attack.
    let mut cfg = ClientConfig::new(ClientProfile::KernelStyle, TARGET_ADDR);
    cfg.psk = tb.world.client(tb.client).config().psk.clone();
    cfg.secret = tb.world.client(tb.client).config().secret.clone();
    cfg.mac = tb.cfg.mitigations.dual_mac;
    let late = tb.world.add_client(tb.client_node, cfg);
    tb.extra_victims.push(late);
    tb.world.connect_client(late);
    tb.settle();
    let hit = tb.world.client(late).state() == ClientState::Failed;
    AttackOutcome::new(AttackId::Exhaust, tb, model, hit.then_some(Effect::ConnectionFailure), cost)
}
