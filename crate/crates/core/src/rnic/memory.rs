//! Host memory reachable by the RNIC's DMA engine, and memory registrations.

use std::collections::BTreeMap;

use crate::fabric::ActorId;

/// Sparse host address space made of disjoint allocations.
#[derive(Debug, Default, Clone)]
pub struct HostMemory {
    regions: BTreeMap<u64, Vec<u8>>,
}

impl HostMemory {
    /// Allocates `len` zeroed bytes at `base`. Fails on overlap with an existing allocation.
    pub fn alloc(&mut self, base: u64, len: usize) -> bool {
        let Some(end) = base.checked_add(len as u64) else {
            return false;
        };
        if let Some((&b, v)) = self.regions.range(..end).next_back() {
            if b + v.len() as u64 > base {
                return false;
            }
        }
        self.regions.insert(base, vec![0; len]);
        true
    }

    pub fn free(&mut self, base: u64) {
        self.regions.remove(&base);
    }

    fn locate(&self, vaddr: u64, len: usize) -> Option<(u64, usize)> {
        let (&base, buf) = self.regions.range(..=vaddr).next_back()?;
        let off = (vaddr - base) as usize;
        (off.checked_add(len)? <= buf.len()).then_some((base, off))
    }

    pub fn read(&self, vaddr: u64, len: usize) -> Option<Vec<u8>> {
        let (base, off) = self.locate(vaddr, len)?;
        Some(self.regions[&base][off..off + len].to_vec())
    }

    pub fn write(&mut self, vaddr: u64, data: &[u8]) -> bool {
        match self.locate(vaddr, data.len()) {
            Some((base, off)) => {
                self.regions.get_mut(&base).expect("located")[off..off + data.len()]
                    .copy_from_slice(data);
                true
            }
            None => false,
        }
    }
}

/// Remote access rights of a registration. Local access is always granted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Access {
    pub remote_read: bool,
    pub remote_write: bool,
}

impl Access {
    pub const LOCAL_ONLY: Access = Access {
        remote_read: false,
        remote_write: false,
    };
    pub const REMOTE_READ: Access = Access {
        remote_read: true,
        remote_write: false,
    };
    pub const REMOTE_WRITE: Access = Access {
        remote_read: false,
        remote_write: true,
    };
    pub const REMOTE_RW: Access = Access {
        remote_read: true,
        remote_write: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrKind {
    Static,
    FastReg,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegion {
    pub rkey: u32,
    pub base_vaddr: u64,
    pub length: u64,
    pub access: Access,
    pub valid: bool,
    pub kind: MrKind,
    pub owner: ActorId,
}

impl MemoryRegion {
    /// Whether a remote request may touch `[vaddr, vaddr + len)`.
    pub fn permits(&self, write: bool, vaddr: u64, len: u64) -> bool {
        let allowed = if write {
            self.access.remote_write
        } else {
            self.access.remote_read
        };
        let Some(end) = vaddr.checked_add(len) else {
            return false;
        };
        self.valid && allowed && vaddr >= self.base_vaddr && end <= self.base_vaddr + self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkeyMode {
    /// Fixed first key after reboot, then `+stride`.
    StaticSequential,
    /// Fast registration: next key is the last key plus one.
    SequentialPlusOne,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RkeyGenerator {
    mode: RkeyMode,
    initial: u32,
    stride: u32,
    next: u32,
}

impl RkeyGenerator {
    pub fn new(mode: RkeyMode, initial: u32, stride: u32) -> Self {
        let stride = match mode {
            RkeyMode::StaticSequential => stride,
            RkeyMode::SequentialPlusOne => 1,
        };
        RkeyGenerator {
            mode,
            initial,
            stride,
            next: initial,
        }
    }

    pub fn mode(&self) -> RkeyMode {
        self.mode
    }

    pub fn next_key(&mut self) -> u32 {
        let key = self.next;
        self.next = self.next.wrapping_add(self.stride);
        key
    }

    pub fn reboot(&mut self) {
        self.next = self.initial;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_rejects_overlap() {
        let mut m = HostMemory::default();
        assert!(m.alloc(0x1000, 0x100));
        assert!(!m.alloc(0x10ff, 0x10));
        assert!(!m.alloc(0x0f80, 0x100));
        assert!(m.alloc(0x1100, 0x10));
    }

    #[test]
    fn read_write_bounds() {
        let mut m = HostMemory::default();
        m.alloc(0x1000, 16);
        assert!(m.write(0x1004, &[1, 2, 3]));
        assert_eq!(m.read(0x1003, 5).unwrap(), vec![0, 1, 2, 3, 0]);
        assert!(!m.write(0x100e, &[0; 4]));
        assert!(m.read(0x0, 1).is_none());
    }

    #[test]
    fn fastreg_keys_increment_by_one() {
        let mut g = RkeyGenerator::new(RkeyMode::SequentialPlusOne, 0x500, 0x100);
        assert_eq!(
            [g.next_key(), g.next_key(), g.next_key()],
            [0x500, 0x501, 0x502]
        );
    }

    #[test]
    fn static_keys_repeat_after_reboot() {
        let mut g = RkeyGenerator::new(RkeyMode::StaticSequential, 0x2a00, 0x100);
        assert_eq!(g.next_key(), 0x2a00);
        assert_eq!(g.next_key(), 0x2b00);
        g.reboot();
        assert_eq!(g.next_key(), 0x2a00);
    }
}
