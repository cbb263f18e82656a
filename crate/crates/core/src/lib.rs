//! Deterministic simulator of RDMA fabrics carrying NVMe-oF traffic, with a
//! model of the RNIC and connection-manager weaknesses, an attack library and
//! toggleable mitigations.

pub mod attacks;
pub mod cm;
pub mod fabric;
pub mod harness;
pub mod nvmeof;
pub mod rnic;
pub mod sim;
pub mod wire;

pub use fabric::{Actor, ActorId, Location, NodeId, Privilege};

pub use sim::World;
pub use wire::{Packet, PortAddr};

/// Rate model at the scalar type used by the simulator.
pub type Rate = rnic::rate::RateControl<f64>;

/// Identifier field widths. Keys of the connection manager use `key_bits`;
/// memory keys are always 32 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Widths {
    pub qpn_bits: u8,
    pub psn_bits: u8,
    pub key_bits: u8,
}

impl Widths {
    /// Desk-scale profile for exhaustive enumeration.
    pub const TEST: Widths = Widths {
        qpn_bits: 12,
        psn_bits: 12,
        key_bits: 16,
    };
    /// Field widths of real hardware.
    pub const PAPER: Widths = Widths {
        qpn_bits: 24,
        psn_bits: 24,
        key_bits: 32,
    };

    pub fn qpn_space(&self) -> u32 {
        1 << self.qpn_bits
    }

    pub fn psn_space(&self) -> u32 {
        1 << self.psn_bits
    }

    pub fn key_mask(&self) -> u32 {
        if self.key_bits >= 32 {
            u32::MAX
        } else {
            (1 << self.key_bits) - 1
        }
    }
}

impl Default for Widths {
    fn default() -> Self {
        Widths::PAPER
    }
}
