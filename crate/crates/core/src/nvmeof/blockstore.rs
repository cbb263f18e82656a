//! In-memory block device behind the target.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

pub const BLOCK_SIZE: usize = 4096;

/// Byte-addressed store over 4096-byte blocks. Unwritten blocks read as zeros.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct BlockStore {
    blocks: BTreeMap<u64, Box<[u8; BLOCK_SIZE]>>,
}

impl BlockStore {
    /// Writes `data` starting at the first byte of block `lba`.
    pub fn write(&mut self, lba: u64, data: &[u8]) {
        for (i, chunk) in data.chunks(BLOCK_SIZE).enumerate() {
            let block = self
                .blocks
                .entry(lba + i as u64)
                .or_insert_with(|| Box::new([0; BLOCK_SIZE]));
            block[..chunk.len()].copy_from_slice(chunk);
        }
    }

    pub fn read(&self, lba: u64, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len);
        let mut b = lba;
        while out.len() < len {
            let take = (len - out.len()).min(BLOCK_SIZE);
            match self.blocks.get(&b) {
                Some(block) => out.extend_from_slice(&block[..take]),
                None => out.resize(out.len() + take, 0),
            }
            b += 1;
        }
        out
    }

    pub fn written_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Content hash; equal stores have equal digests.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (lba, block) in &self.blocks {
            if block.iter().any(|&b| b != 0) {
                h.update(lba.to_be_bytes());
                h.update(&block[..]);
            }
        }
        h.finalize().into()
    }
}
