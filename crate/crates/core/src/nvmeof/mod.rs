//! NVMe over Fabrics block service on top of RDMA queue pairs.

pub mod blockstore;
pub mod capsule;
pub mod client;
pub mod target;

pub use blockstore::{BlockStore, BLOCK_SIZE};
pub use capsule::{CapsuleError, CapsuleKind, NvmeCapsule, Sgl, Status};
pub use client::{ClientConfig, ClientProfile, ClientState, Command, NvmeClient};
pub use target::{NvmeTarget, TargetConfig, TargetRegistration};

/// Fixed address at which user-space drivers map their buffer pool.
pub const USER_POOL_BASE: u64 = 0x2000_0000_0000;
/// Largest single transfer, and the size of one buffer slot.
pub const MAX_IO: usize = 32 * 1024;
pub const DEFAULT_IN_CAPSULE: usize = 4096;

/// Largest write carried inside the command capsule: 4096 bytes, or less
/// when the capsule would not fit the MTU.
pub fn in_capsule_threshold(mtu: usize) -> usize {
    DEFAULT_IN_CAPSULE.min(mtu.saturating_sub(capsule::CAPSULE_HEADER_LEN))
}

/// Mutual nonce/keyed-response exchange carried in the CM private payloads.
/// It authenticates the connection, never individual capsules.
pub mod auth {
    use super::capsule::mac;

    pub const NONCE_LEN: usize = 16;

    fn tag(secret: &[u8], label: &[u8], a: &[u8], b: &[u8]) -> Vec<u8> {
        let mut input = label.to_vec();
        input.extend_from_slice(a);
        input.extend_from_slice(b);
        mac(secret, &input).to_vec()
    }

    /// Target reply: its nonce followed by its proof over both nonces.
    pub fn target_reply(secret: &[u8], nc: &[u8], nt: &[u8]) -> Vec<u8> {
        let mut out = nt.to_vec();
        out.extend_from_slice(&tag(secret, b"target", nc, nt));
        out
    }

    /// Checks the target's reply and returns its nonce.
    pub fn verify_target(secret: &[u8], nc: &[u8], reply: &[u8]) -> Option<Vec<u8>> {
        if reply.len() != NONCE_LEN + 16 {
            return None;
        }
        let (nt, proof) = reply.split_at(NONCE_LEN);
        (tag(secret, b"target", nc, nt) == proof).then(|| nt.to_vec())
    }

    pub fn client_proof(secret: &[u8], nc: &[u8], nt: &[u8]) -> Vec<u8> {
        tag(secret, b"client", nt, nc)
    }

    pub fn session_key(secret: &[u8], nc: &[u8], nt: &[u8]) -> Vec<u8> {
        tag(secret, b"session", nc, nt)
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn mutual_exchange() {
            let (nc, nt) = ([1u8; NONCE_LEN], [2u8; NONCE_LEN]);
            let reply = target_reply(b"s", &nc, &nt);
            assert_eq!(verify_target(b"s", &nc, &reply).unwrap(), nt);
            assert!(verify_target(b"wrong", &nc, &reply).is_none());
            assert_ne!(client_proof(b"s", &nc, &nt), client_proof(b"s", &nt, &nc));
            assert_eq!(session_key(b"s", &nc, &nt), session_key(b"s", &nc, &nt));
        }
    }
}
