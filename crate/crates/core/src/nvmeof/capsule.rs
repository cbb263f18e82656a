//! NVMe-oF command and response capsules, and their message/data MACs.
//!
//! Layout (big-endian):
//!
//! ```text
//! kind 1B | command_id 2B | block_addr 8B | length 4B
//! | sgl: rkey 4B, vaddr 8B, len 4B | msg_mac 16B | data_mac 16B | inline data
//! ```
//!
//! An all-zero SGL or MAC field means "absent". Responses carry their status
//! code in the `block_addr` field, which has no other meaning for them.

use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::wire::{Reader, WireError};

pub const CAPSULE_HEADER_LEN: usize = 63;
pub const MAC_LEN: usize = 16;
pub type Tag = [u8; MAC_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsuleKind {
    WriteInCapsule,
    Write,
    Read,
    Response,
}

impl CapsuleKind {
    pub fn code(self) -> u8 {
        match self {
            CapsuleKind::WriteInCapsule => 0x01,
            CapsuleKind::Write => 0x02,
            CapsuleKind::Read => 0x03,
            CapsuleKind::Response => 0x04,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0x01 => CapsuleKind::WriteInCapsule,
            0x02 => CapsuleKind::Write,
            0x03 => CapsuleKind::Read,
            0x04 => CapsuleKind::Response,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    AuthFailure,
    InvalidBlock,
    TransferError,
}

impl Status {
    pub fn code(self) -> u64 {
        match self {
            Status::Success => 0,
            Status::AuthFailure => 1,
            Status::InvalidBlock => 2,
            Status::TransferError => 3,
        }
    }

    pub fn from_code(c: u64) -> Option<Self> {
        Some(match c {
            0 => Status::Success,
            1 => Status::AuthFailure,
            2 => Status::InvalidBlock,
            3 => Status::TransferError,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sgl {
    pub rkey: u32,
    pub vaddr: u64,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NvmeCapsule {
    pub kind: CapsuleKind,
    pub command_id: u16,
    pub block_addr: u64,
    pub length: u32,
    pub sgl: Option<Sgl>,
    pub status: Status,
    pub msg_mac: Option<Tag>,
    pub data_mac: Option<Tag>,
    pub inline_data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CapsuleError {
    #[error("unknown capsule kind {0:#04x}")]
    UnknownKind(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u64),
    #[error("{0:?} capsule requires a data descriptor")]
    MissingSgl(CapsuleKind),
    #[error("in-capsule data length does not match length field")]
    LengthMismatch,
    #[error("in-capsule data of {len} bytes exceeds threshold {threshold}")]
    InlineTooLarge { len: usize, threshold: usize },
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl NvmeCapsule {
    pub fn write_in_capsule(command_id: u16, block_addr: u64, data: Vec<u8>) -> Self {
        NvmeCapsule {
            kind: CapsuleKind::WriteInCapsule,
            command_id,
            block_addr,
            length: data.len() as u32,
            sgl: None,
            status: Status::Success,
            msg_mac: None,
            data_mac: None,
            inline_data: data,
        }
    }

    pub fn with_sgl(kind: CapsuleKind, command_id: u16, block_addr: u64, sgl: Sgl) -> Self {
        NvmeCapsule {
            kind,
            command_id,
            block_addr,
            length: sgl.len,
            sgl: Some(sgl),
            status: Status::Success,
            msg_mac: None,
            data_mac: None,
            inline_data: Vec::new(),
        }
    }

    pub fn response(command_id: u16, status: Status) -> Self {
        NvmeCapsule {
            kind: CapsuleKind::Response,
            command_id,
            block_addr: 0,
            length: 0,
            sgl: None,
            status,
            msg_mac: None,
            data_mac: None,
            inline_data: Vec::new(),
        }
    }

    /// Checks the structural invariants for the given in-capsule threshold.
    pub fn validate(&self, threshold: usize) -> Result<(), CapsuleError> {
        match self.kind {
            CapsuleKind::WriteInCapsule => {
                if self.inline_data.len() != self.length as usize {
                    return Err(CapsuleError::LengthMismatch);
                }
                if self.inline_data.len() > threshold {
                    return Err(CapsuleError::InlineTooLarge {
                        len: self.inline_data.len(),
                        threshold,
                    });
                }
            }
            CapsuleKind::Write | CapsuleKind::Read => {
                if self.sgl.is_none() {
                    return Err(CapsuleError::MissingSgl(self.kind));
                }
            }
            CapsuleKind::Response => {}
        }
        Ok(())
    }

    fn put(&self, out: &mut Vec<u8>, with_macs: bool) {
        out.push(self.kind.code());
        out.extend_from_slice(&self.command_id.to_be_bytes());
        let addr = if self.kind == CapsuleKind::Response {
            self.status.code()
        } else {
            self.block_addr
        };
        out.extend_from_slice(&addr.to_be_bytes());
        out.extend_from_slice(&self.length.to_be_bytes());
        let sgl = self.sgl.unwrap_or(Sgl {
            rkey: 0,
            vaddr: 0,
            len: 0,
        });
        out.extend_from_slice(&sgl.rkey.to_be_bytes());
        out.extend_from_slice(&sgl.vaddr.to_be_bytes());
        out.extend_from_slice(&sgl.len.to_be_bytes());
        let zero = [0u8; MAC_LEN];
        if with_macs {
            out.extend_from_slice(self.msg_mac.as_ref().unwrap_or(&zero));
            out.extend_from_slice(self.data_mac.as_ref().unwrap_or(&zero));
        } else {
            out.extend_from_slice(&zero);
            out.extend_from_slice(&zero);
        }
        out.extend_from_slice(&self.inline_data);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CAPSULE_HEADER_LEN + self.inline_data.len());
        self.put(&mut out, true);
        out
    }

    /// Encoding with both MAC fields zeroed; the input of the message MAC.
    pub fn canonical(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CAPSULE_HEADER_LEN + self.inline_data.len());
        self.put(&mut out, false);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CapsuleError> {
        let mut r = Reader::new(bytes);
        let code = r.u8()?;
        let kind = CapsuleKind::from_code(code).ok_or(CapsuleError::UnknownKind(code))?;
        let command_id = r.u16()?;
        let addr = r.u64()?;
        let length = r.u32()?;
        let sgl = Sgl {
            rkey: r.u32()?,
            vaddr: r.u64()?,
            len: r.u32()?,
        };
        let msg_mac: Tag = r.take(MAC_LEN)?.try_into().expect("16 bytes");
        let data_mac: Tag = r.take(MAC_LEN)?.try_into().expect("16 bytes");
        let inline_data = r.rest().to_vec();
        let (block_addr, status) = if kind == CapsuleKind::Response {
            (
                0,
                Status::from_code(addr).ok_or(CapsuleError::UnknownStatus(addr))?,
            )
        } else {
            (addr, Status::Success)
        };
        let present = |t: Tag| (t != [0; MAC_LEN]).then_some(t);
        Ok(NvmeCapsule {
            kind,
            command_id,
            block_addr,
            length,
            sgl: (sgl.rkey != 0 || sgl.vaddr != 0 || sgl.len != 0).then_some(sgl),
            status,
            msg_mac: present(msg_mac),
            data_mac: present(data_mac),
            inline_data,
        })
    }
}

/// HMAC-SHA256 truncated to 16 bytes.
pub fn mac(key: &[u8], data: &[u8]) -> Tag {
    let mut m = Hmac::<Sha256>::new_from_slice(key).expect("any key length");
    m.update(data);
    let full = m.finalize().into_bytes();
    full[..MAC_LEN].try_into().expect("16 bytes")
}

/// Returns `(msg_mac, data_mac)`; the data MAC only when out-of-band data is given.
pub fn compute_capsule_macs(capsule: &NvmeCapsule, key: &[u8], data: Option<&[u8]>) -> (Tag, Option<Tag>) {
    (mac(key, &capsule.canonical()), data.map(|d| mac(key, d)))
}

/// Fills in the MAC fields.
pub fn seal(capsule: &mut NvmeCapsule, key: &[u8], data: Option<&[u8]>) {
    let (m, d) = compute_capsule_macs(capsule, key, data);
    capsule.msg_mac = Some(m);
    capsule.data_mac = d;
}

pub fn verify_msg(capsule: &NvmeCapsule, key: &[u8]) -> bool {
    capsule.msg_mac == Some(mac(key, &capsule.canonical()))
}

pub fn verify_data(capsule: &NvmeCapsule, key: &[u8], data: &[u8]) -> bool {
    capsule.data_mac == Some(mac(key, data))
}
