use nvmf_rdma_sim::harness::testbed::{known_pattern, KNOWN_LBA, KNOWN_LEN};
use nvmf_rdma_sim::harness::{Mitigations, SecurityConfig, Testbed, TestbedConfig};
use nvmf_rdma_sim::nvmeof::{ClientProfile, ClientState, Command};
use nvmf_rdma_sim::sim::CommandStatus;
use nvmf_rdma_sim::Widths;

fn bed(security: SecurityConfig, profile: ClientProfile, mac: bool) -> Testbed {
    let mut cfg = TestbedConfig::new(Widths::TEST, 7);
    cfg.security = security;
    cfg.profile = profile;
    cfg.mitigations = Mitigations {
        dual_mac: mac,
        ..Mitigations::default()
    };
    Testbed::new(cfg)
}

fn each_bed(mut f: impl FnMut(Testbed)) {
    for s in SecurityConfig::ALL {
        for p in [ClientProfile::UserSpaceStyle, ClientProfile::KernelStyle] {
            for mac in [false, true] {
                f(bed(s, p, mac));
            }
        }
    }
}

#[test]
fn setup_connects_and_stores() {
    each_bed(|tb| {
        let c = tb.world.client(tb.client);
        assert_eq!(c.state(), ClientState::Connected, "{:?}", tb.cfg);
        assert_eq!(tb.world.client(tb.control).state(), ClientState::Connected);
        assert_eq!(tb.store().read(KNOWN_LBA, KNOWN_LEN), known_pattern());
        assert!(c.completions().iter().all(|x| x.status == CommandStatus::Success), "{:?}", c.completions());
        assert_eq!(c.completions().len(), 3);
        assert_eq!(c.completions()[2].data.as_deref(), Some(&b"warm-up"[..]));
    });
}

#[test]
fn large_and_small_round_trip() {
    each_bed(|mut tb| {
        let big: Vec<u8> = (0..20_000u32).map(|i| (i * 7) as u8).collect();
        let client = tb.client;
        tb.run(
            client,
            vec![
                Command::Write { lba: 10, data: big.clone() },
                Command::Read { lba: 10, len: big.len() as u32 },
                Command::Write { lba: 30, data: vec![1, 2, 3] },
                Command::Read { lba: 30, len: 3 },
            ],
        );
        let done = tb.world.client(client).completions();
        let last: Vec<_> = done[done.len() - 4..].to_vec();
        assert!(last.iter().all(|x| x.status == CommandStatus::Success), "{last:?}");
        assert_eq!(last[1].data.as_deref(), Some(big.as_slice()));
        assert_eq!(last[3].data.as_deref(), Some(&[1u8, 2, 3][..]));
    });
}

#[test]
fn oversize_command_fails_locally() {
    let mut tb = bed(SecurityConfig::None, ClientProfile::UserSpaceStyle, false);
    let client = tb.client;
    tb.run(client, vec![Command::Write { lba: 0, data: vec![0; 64 * 1024] }]);
    let last = tb.world.client(client).completions().last().unwrap().clone();
    assert_eq!(last.status, CommandStatus::TransferError);
}

#[test]
fn setup_is_deterministic() {
    let a = bed(SecurityConfig::InBand, ClientProfile::KernelStyle, true);
    let b = bed(SecurityConfig::InBand, ClientProfile::KernelStyle, true);
    assert_eq!(a.world.trace(), b.world.trace());
    assert_eq!(a.store().digest(), b.store().digest());
}
