use nvmf_rdma_sim::attacks::cnp::{control_rate, spoof_cnp_with, victim_rate, CnpOptions};
use nvmf_rdma_sim::attacks::{
    enumerate_psn_inject, guess_qpn, run_attack, AttackId, AttackerKnowledge, InjectPayload, SweepOptions,
};
use nvmf_rdma_sim::harness::testbed::{CLIENT_ADDR, TARGET_ADDR};
use nvmf_rdma_sim::harness::{Mitigations, SecurityConfig, Testbed, TestbedConfig, ThreatModel};
use nvmf_rdma_sim::nvmeof::NvmeCapsule;
use nvmf_rdma_sim::rnic::{Dest, Verdict};
use nvmf_rdma_sim::Widths;

fn bed(seed: u64) -> Testbed {
    Testbed::new(TestbedConfig::new(Widths::TEST, seed))
}

fn bed_with(f: impl FnOnce(&mut TestbedConfig)) -> Testbed {
    let mut cfg = TestbedConfig::new(Widths::TEST, 5);
    f(&mut cfg);
    Testbed::new(cfg)
}

#[test]
fn local_guess_lists_victim_qpn_first() {
    let mut tb = bed(1);
    let actor = tb.attacker(ThreatModel::Tlu, tb.client_node);
    let knowledge = AttackerKnowledge::for_testbed(&tb);
    let node = tb.client_node;
    let cands = guess_qpn(&mut tb.world, &actor, node, &knowledge);
    assert_eq!(cands.first().copied(), tb.client_qpn());
}

#[test]
fn remote_guess_sweeps_from_static_seed() {
    let mut tb = bed(1);
    let actor = tb.attacker(ThreatModel::Tra, tb.remote_node);
    let knowledge = AttackerKnowledge {
        seed_low: 0x10,
        seed_high: 0x10,
        window: 4,
    };
    let node = tb.target_node;
    assert_eq!(guess_qpn(&mut tb.world, &actor, node, &knowledge), vec![0x10, 0x11, 0x12, 0x13]);
}

#[test]
fn known_psn_needs_one_packet() {
    let mut tb = bed(1);
    let actor = tb.attacker(ThreatModel::Tlu, tb.client_node);
    let qpn = tb.target_qpn_for(CLIENT_ADDR).unwrap();
    let psn = tb.world.node(tb.target_node).rnic.qp(qpn).unwrap().expected_recv_psn;
    let capsule = NvmeCapsule::write_in_capsule(9, 30, b"one".to_vec());
    let opts = SweepOptions {
        start_psn: psn,
        ..SweepOptions::default()
    };
    let inj = enumerate_psn_inject(
        &mut tb.world,
        &actor,
        CLIENT_ADDR,
        Dest { addr: TARGET_ADDR, qpn },
        &InjectPayload::Send(capsule.encode()),
        &opts,
    )
    .unwrap();
    assert_eq!((inj.psn, inj.cost), (Some(psn), 1));
    tb.settle();
    assert_eq!(tb.store().read(30, 3), b"one");
}

#[test]
fn wrong_psn_invalid_write_has_no_effect() {
    let mut tb = bed(1);
    let actor = tb.attacker(ThreatModel::Tlu, tb.client_node);
    let qpn = tb.target_qpn_for(CLIENT_ADDR).unwrap();
    let psn = tb.world.node(tb.target_node).rnic.qp(qpn).unwrap().expected_recv_psn;
    let before = tb.victim_trace();
    let opts = SweepOptions {
        start_psn: (psn + 100) & 0xfff,
        max_packets: Some(50),
        ..SweepOptions::default()
    };
    let res = enumerate_psn_inject(
        &mut tb.world,
        &actor,
        CLIENT_ADDR,
        Dest { addr: TARGET_ADDR, qpn },
        &InjectPayload::Write {
            rkey: 0,
            vaddr: 0,
            data: vec![0; 8],
        },
        &opts,
    );
    assert!(res.is_err());
    tb.settle();
    assert_eq!(tb.victim_trace(), before);
    let qp = tb.world.node(tb.target_node).rnic.qp(qpn).unwrap();
    assert_eq!(qp.expected_recv_psn, psn);
}

#[test]
fn duplicate_dest_mitigation_blocks_local_sweep() {
    let mut tb = bed_with(|c| c.mitigations.reject_duplicate_dest = true);
    let out = run_attack(&mut tb, AttackId::SpoofRequest, ThreatModel::Tlu, true);
    assert!(!out.succeeded);
}

#[test]
fn outcomes_are_well_formed() {
    for a in AttackId::ALL {
        for m in ThreatModel::ALL {
            let mut tb = bed(2);
            let o = run_attack(&mut tb, a, m, true);
            assert_eq!(o.succeeded, o.effect.is_some(), "{a} {m:?}");
            assert!(o.cost >= 1);
            assert_eq!((o.attack_id, o.threat_model), (a, m));
        }
    }
}

#[test]
fn attack_names_round_trip() {
    for a in AttackId::ALL {
        assert_eq!(AttackId::from_name(a.name()), Some(a));
    }
    assert_eq!(AttackId::from_name("nope"), None);
}

#[test]
fn cnp_at_other_qpn_leaves_victim_alone() {
    let mut tb = bed(1);
    let knowledge = AttackerKnowledge {
        seed_low: 0x300,
        seed_high: 0x300,
        window: 4,
    };
    let opts = CnpOptions {
        count: 10,
        forge_src_qpn: None,
    };
    let o = spoof_cnp_with(&mut tb, ThreatModel::Tra, &knowledge, &opts, true);
    assert!(!o.succeeded);
    assert_eq!(victim_rate(&tb), 1.0);
}

#[test]
fn forged_src_qpn_header_defeats_header_check_but_not_ipsec() {
    let run = |security: SecurityConfig, forge: bool| {
        let mut tb = bed_with(|c| {
            c.security = security;
            c.mitigations.src_qpn_header = true;
        });
        let knowledge = AttackerKnowledge::for_testbed(&tb);
        let opts = CnpOptions {
            count: 10,
            forge_src_qpn: forge.then(|| tb.client_qpn().unwrap()),
        };
        let o = spoof_cnp_with(&mut tb, ThreatModel::Tra, &knowledge, &opts, true);
        (o.succeeded, victim_rate(&tb), control_rate(&tb))
    };
    assert!(!run(SecurityConfig::None, false).0);
    assert_eq!(run(SecurityConfig::None, true), (true, 0.5f64.powi(10), 1.0));
    assert_eq!(run(SecurityConfig::IPsec, true), (false, 1.0, 1.0));
}

#[test]
fn quota_stops_exhaustion() {
    let mut tb = bed_with(|c| c.mitigations.per_user_quota = Some(16));
    let o = run_attack(&mut tb, AttackId::Exhaust, ThreatModel::Tlu, true);
    assert!(!o.succeeded);
    assert_eq!(o.cost, 17);
}

#[test]
fn cm_source_filter_stops_local_disconnect() {
    let mut tb = bed_with(|c| c.mitigations.filter_cm_source = true);
    let o = run_attack(&mut tb, AttackId::Disconnect, ThreatModel::Tlu, true);
    assert!(!o.succeeded);
}

#[test]
fn challenge_stops_remote_disconnect() {
    let mut tb = bed_with(|c| c.mitigations.challenge_disconnect = true);
    let o = run_attack(&mut tb, AttackId::Disconnect, ThreatModel::Tra, true);
    assert!(!o.succeeded);
    let mut plain = bed(5);
    assert!(run_attack(&mut plain, AttackId::Disconnect, ThreatModel::Tra, true).succeeded);
}

#[test]
fn dual_mac_stops_forged_capsule_execution() {
    let mut tb = bed_with(|c| c.mitigations.dual_mac = true);
    let o = run_attack(&mut tb, AttackId::SpoofRequest, ThreatModel::Tlu, true);
    assert!(!o.succeeded);
}

#[test]
fn failed_attack_leaves_trace_unchanged() {
    for a in AttackId::ALL {
        let run = |inject: bool| {
            let mut tb = bed_with(|c| {
                c.security = SecurityConfig::IPsec;
                c.mitigations = Mitigations::all();
            });
            let o = run_attack(&mut tb, a, ThreatModel::Tra, inject);
            (o.succeeded, tb.victim_trace())
        };
        let (hit, trace) = run(true);
        assert!(!hit, "{a}");
        assert_eq!(trace, run(false).1, "{a}");
    }
}

#[test]
fn tra_ipsec_sweep_never_accepted() {
    let mut tb = bed_with(|c| c.security = SecurityConfig::IPsec);
    let actor = tb.attacker(ThreatModel::Tra, tb.remote_node);
    let qpn = tb.target_qpn_for(CLIENT_ADDR).unwrap();
    let start = tb.world.deliveries().len();
    let res = enumerate_psn_inject(
        &mut tb.world,
        &actor,
        CLIENT_ADDR,
        Dest { addr: TARGET_ADDR, qpn },
        &InjectPayload::Send(vec![1, 2, 3]),
        &SweepOptions::default(),
    );
    assert!(res.is_err());
    let target = tb.target_node;
    assert!(!tb.world.deliveries()[start..]
        .iter()
        .any(|r| r.node == target && matches!(r.verdict, Some(Verdict::Accepted { .. }))));
}
