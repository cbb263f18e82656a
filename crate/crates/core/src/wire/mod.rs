//! Packet model and bit-exact codec.
//!
//! ```text
//! route      9B   kind(1) | src_addr(4, BE) | dst_addr(4, BE)
//! transport  8B   opcode(1) | flags(1) | dest_qpn(3, BE) | psn(3, BE)
//! src-qpn    4B   src_qpn(3, BE) | reserved(1) = 0        if flags & SRC_QPN
//! rdma       16B  rkey(4) | vaddr(8) | dma_len(4)         iff opcode is Write or Read
//! payload    ..
//! icrc       4B   CRC-32 over every preceding byte
//! ```
//!
//! Flags: bit 0 congestion mark, bit 1 solicited, bit 2 source-QPN header present.

mod crc;

pub use crc::compute_icrc;

use thiserror::Error;

pub const ROUTE_LEN: usize = 9;
pub const TRANSPORT_LEN: usize = 8;
pub const SRC_QPN_EXT_LEN: usize = 4;
pub const RDMA_EXT_LEN: usize = 16;
pub const ICRC_LEN: usize = 4;
pub const DEFAULT_MTU: usize = 4096;

/// Largest value a 24-bit header field can carry.
pub const MAX_24: u32 = (1 << 24) - 1;

const FLAG_CONGESTION: u8 = 0x01;
const FLAG_SOLICITED: u8 = 0x02;
const FLAG_SRC_QPN: u8 = 0x04;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {len} bytes exceeds MTU {mtu}")]
    OversizePayload { len: usize, mtu: usize },
    #[error("checksum mismatch: computed {computed:#010x}, carried {carried:#010x}")]
    BadChecksum { computed: u32, carried: u32 },
    #[error("truncated packet")]
    Truncated,
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("unknown fabric kind {0:#04x}")]
    UnknownFabricKind(u8),
    #[error("{field} value {value:#x} does not fit in 24 bits")]
    FieldOutOfRange { field: &'static str, value: u32 },
    #[error("congestion notification must carry psn 0, got {0:#x}")]
    CnpNonZeroPsn(u32),
    #[error("congestion notification must not carry a payload")]
    CnpWithPayload,
    #[error("opcode {0:?} requires an RDMA extension header")]
    MissingRdmaExt(Opcode),
    #[error("opcode {0:?} must not carry an RDMA extension header")]
    UnexpectedRdmaExt(Opcode),
    #[error("reserved byte of source-QPN header is nonzero")]
    NonZeroReserved,
    #[error("port address must be nonzero")]
    ZeroAddress,
}

pub type Result<T> = std::result::Result<T, WireError>;

/// 32-bit opaque port address: an IPv4 address on RoCE, a zero-extended LID on IB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortAddr(pub u32);

impl std::fmt::Display for PortAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FabricKind {
    RoCE,
    IB,
}

impl FabricKind {
    fn tag(self) -> u8 {
        match self {
            FabricKind::RoCE => 0,
            FabricKind::IB => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(FabricKind::RoCE),
            1 => Ok(FabricKind::IB),
            other => Err(WireError::UnknownFabricKind(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Send,
    Write,
    Read,
    ReadResponse,
    Ack,
    Nak,
    Cnp,
    CmMad,
}

impl Opcode {
    pub const ALL: [Opcode; 8] = [
        Opcode::Send,
        Opcode::Write,
        Opcode::Read,
        Opcode::ReadResponse,
        Opcode::Ack,
        Opcode::Nak,
        Opcode::Cnp,
        Opcode::CmMad,
    ];

    pub fn code(self) -> u8 {
        match self {
            Opcode::Send => 0x04,
            Opcode::Write => 0x0A,
            Opcode::Read => 0x0C,
            Opcode::ReadResponse => 0x10,
            Opcode::Ack => 0x11,
            Opcode::Nak => 0x12,
            Opcode::Cnp => 0x81,
            Opcode::CmMad => 0x64,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Opcode::ALL
            .into_iter()
            .find(|op| op.code() == code)
            .ok_or(WireError::UnknownOpcode(code))
    }

    /// Opcodes that carry an [`RdmaExtHeader`].
    pub fn has_rdma_ext(self) -> bool {
        matches!(self, Opcode::Write | Opcode::Read)
    }

    /// Request opcodes subject to the receiver's PSN check.
    pub fn is_request(self) -> bool {
        matches!(self, Opcode::Send | Opcode::Write | Opcode::Read)
    }

    /// Packets a switch may congestion-mark.
    pub fn is_data(self) -> bool {
        matches!(
            self,
            Opcode::Send | Opcode::Write | Opcode::Read | Opcode::ReadResponse
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteHeader {
    pub src_addr: PortAddr,
    pub dst_addr: PortAddr,
    pub fabric_kind: FabricKind,
}

impl RouteHeader {
    pub fn new(src_addr: PortAddr, dst_addr: PortAddr, fabric_kind: FabricKind) -> Result<Self> {
        if src_addr.0 == 0 || dst_addr.0 == 0 {
            return Err(WireError::ZeroAddress);
        }
        Ok(RouteHeader {
            src_addr,
            dst_addr,
            fabric_kind,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportHeader {
    opcode: Opcode,
    dest_qpn: u32,
    psn: u32,
    pub congestion_mark: bool,
    pub solicited: bool,
}

impl TransportHeader {
    pub fn new(opcode: Opcode, dest_qpn: u32, psn: u32) -> Result<Self> {
        if dest_qpn > MAX_24 {
            return Err(WireError::FieldOutOfRange {
                field: "dest_qpn",
                value: dest_qpn,
            });
        }
        if psn > MAX_24 {
            return Err(WireError::FieldOutOfRange {
                field: "psn",
                value: psn,
            });
        }
        if opcode == Opcode::Cnp && psn != 0 {
            return Err(WireError::CnpNonZeroPsn(psn));
        }
        Ok(TransportHeader {
            opcode,
            dest_qpn,
            psn,
            congestion_mark: false,
            solicited: false,
        })
    }

    pub fn opcode(&self) -> Opcode {
        self.opcode
    }

    pub fn dest_qpn(&self) -> u32 {
        self.dest_qpn
    }

    pub fn psn(&self) -> u32 {
        self.psn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RdmaExtHeader {
    pub rkey: u32,
    pub vaddr: u64,
    pub dma_len: u32,
}

/// Four-byte header carrying the sender's QPN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrcQpnExtHeader {
    src_qpn: u32,
}

impl SrcQpnExtHeader {
    pub fn new(src_qpn: u32) -> Result<Self> {
        if src_qpn > MAX_24 {
            return Err(WireError::FieldOutOfRange {
                field: "src_qpn",
                value: src_qpn,
            });
        }
        Ok(SrcQpnExtHeader { src_qpn })
    }

    pub fn src_qpn(&self) -> u32 {
        self.src_qpn
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub route: RouteHeader,
    pub transport: TransportHeader,
    pub rdma_ext: Option<RdmaExtHeader>,
    pub src_qpn_ext: Option<SrcQpnExtHeader>,
    pub payload: Vec<u8>,
    icrc: u32,
}

impl Packet {
    /// Builds a packet and seals its checksum.
    pub fn new(
        route: RouteHeader,
        transport: TransportHeader,
        rdma_ext: Option<RdmaExtHeader>,
        src_qpn_ext: Option<SrcQpnExtHeader>,
        payload: Vec<u8>,
    ) -> Result<Self> {
        let op = transport.opcode;
        match (op.has_rdma_ext(), rdma_ext.is_some()) {
            (true, false) => return Err(WireError::MissingRdmaExt(op)),
            (false, true) => return Err(WireError::UnexpectedRdmaExt(op)),
            _ => {}
        }
        if op == Opcode::Cnp && !payload.is_empty() {
            return Err(WireError::CnpWithPayload);
        }
        let mut pkt = Packet {
            route,
            transport,
            rdma_ext,
            src_qpn_ext,
            payload,
            icrc: 0,
        };
        pkt.reseal();
        Ok(pkt)
    }

    pub fn icrc(&self) -> u32 {
        self.icrc
    }

    /// Recomputes the checksum after a header mutation (e.g. congestion marking).
    pub fn reseal(&mut self) {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write_body(&mut buf);
        self.icrc = compute_icrc(&buf);
    }

    pub fn encoded_len(&self) -> usize {
        ROUTE_LEN
            + TRANSPORT_LEN
            + self.src_qpn_ext.map_or(0, |_| SRC_QPN_EXT_LEN)
            + self.rdma_ext.map_or(0, |_| RDMA_EXT_LEN)
            + self.payload.len()
            + ICRC_LEN
    }

    fn write_body(&self, out: &mut Vec<u8>) {
        out.push(self.route.fabric_kind.tag());
        out.extend_from_slice(&self.route.src_addr.0.to_be_bytes());
        out.extend_from_slice(&self.route.dst_addr.0.to_be_bytes());

        let t = &self.transport;
        out.push(t.opcode.code());
        let mut flags = 0u8;
        if t.congestion_mark {
            flags |= FLAG_CONGESTION;
        }
        if t.solicited {
            flags |= FLAG_SOLICITED;
        }
        if self.src_qpn_ext.is_some() {
            flags |= FLAG_SRC_QPN;
        }
        out.push(flags);
        out.extend_from_slice(&t.dest_qpn.to_be_bytes()[1..]);
        out.extend_from_slice(&t.psn.to_be_bytes()[1..]);

        if let Some(ext) = self.src_qpn_ext {
            out.extend_from_slice(&ext.src_qpn.to_be_bytes()[1..]);
            out.push(0);
        }
        if let Some(ext) = self.rdma_ext {
            out.extend_from_slice(&ext.rkey.to_be_bytes());
            out.extend_from_slice(&ext.vaddr.to_be_bytes());
            out.extend_from_slice(&ext.dma_len.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
    }
}

/// Codec parameters shared by every node of a fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireConfig {
    pub mtu: usize,
}

impl Default for WireConfig {
    fn default() -> Self {
        WireConfig { mtu: DEFAULT_MTU }
    }
}

impl WireConfig {
    pub fn encode(&self, pkt: &Packet) -> Result<Vec<u8>> {
        if pkt.payload.len() > self.mtu {
            return Err(WireError::OversizePayload {
                len: pkt.payload.len(),
                mtu: self.mtu,
            });
        }
        let mut out = Vec::with_capacity(pkt.encoded_len());
        pkt.write_body(&mut out);
        let crc = compute_icrc(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Packet> {
        if bytes.len() < ROUTE_LEN + TRANSPORT_LEN + ICRC_LEN {
            return Err(WireError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - ICRC_LEN);
        let carried = u32::from_be_bytes(trailer.try_into().expect("4-byte trailer"));
        let computed = compute_icrc(body);
        if carried != computed {
            return Err(WireError::BadChecksum { computed, carried });
        }

        let mut r = Reader::new(body);
        let kind = FabricKind::from_tag(r.u8()?)?;
        let src = PortAddr(r.u32()?);
        let dst = PortAddr(r.u32()?);
        let route = RouteHeader::new(src, dst, kind)?;

        let opcode = Opcode::from_code(r.u8()?)?;
        let flags = r.u8()?;
        let dest_qpn = r.u24()?;
        let psn = r.u24()?;
        let mut transport = TransportHeader::new(opcode, dest_qpn, psn)?;
        transport.congestion_mark = flags & FLAG_CONGESTION != 0;
        transport.solicited = flags & FLAG_SOLICITED != 0;

        let src_qpn_ext = if flags & FLAG_SRC_QPN != 0 {
            let src_qpn = r.u24()?;
            if r.u8()? != 0 {
                return Err(WireError::NonZeroReserved);
            }
            Some(SrcQpnExtHeader { src_qpn })
        } else {
            None
        };
        let rdma_ext = if opcode.has_rdma_ext() {
            Some(RdmaExtHeader {
                rkey: r.u32()?,
                vaddr: r.u64()?,
                dma_len: r.u32()?,
            })
        } else {
            None
        };
        let payload = r.rest().to_vec();
        if payload.len() > self.mtu {
            return Err(WireError::OversizePayload {
                len: payload.len(),
                mtu: self.mtu,
            });
        }
        if opcode == Opcode::Cnp && !payload.is_empty() {
            return Err(WireError::CnpWithPayload);
        }
        Ok(Packet {
            route,
            transport,
            rdma_ext,
            src_qpn_ext,
            payload,
            icrc: carried,
        })
    }
}

/// Encodes with the default MTU.
pub fn encode_packet(pkt: &Packet) -> Result<Vec<u8>> {
    WireConfig::default().encode(pkt)
}

/// Decodes with the default MTU.
pub fn decode_packet(bytes: &[u8]) -> Result<Packet> {
    WireConfig::default().decode(bytes)
}

/// Big-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let slice = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u24(&mut self) -> Result<u32> {
        let b = self.take(3)?;
        Ok(u32::from_be_bytes([0, b[0], b[1], b[2]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let rest = &self.buf[self.pos..];
        self.pos = self.buf.len();
        rest
    }
}

pub(crate) fn put_u24(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes()[1..]);
}
