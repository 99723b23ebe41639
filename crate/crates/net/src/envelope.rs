//! Length-prefixed binary envelope.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EPN1"
//!      4     1  kind
//!      5    16  session id
//!     21     8  sequence number, u64 LE
//!     29     8  timestamp in microseconds, u64 LE
//!     37     4  payload length, u32 LE
//!     41     n  payload
//!   41+n     4  CRC-32 (IEEE) of bytes [0, 41+n), u32 LE
//! ```

use std::io::{Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EPN1";
pub const HEADER_LEN: usize = 41;
pub const CRC_LEN: usize = 4;
/// Payloads above this size are rejected before any allocation.
pub const MAX_PAYLOAD: u32 = 16 << 20;

pub type SessionId = [u8; 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    HmdFrame = 2,
    KeypointFrame = 3,
    PoseResult = 4,
    SubscribeRender = 5,
    Error = 6,
    Ping = 7,
    Pong = 8,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Hello,
        Kind::HmdFrame,
        Kind::KeypointFrame,
        Kind::PoseResult,
        Kind::SubscribeRender,
        Kind::Error,
        Kind::Ping,
        Kind::Pong,
    ];

    pub fn from_byte(b: u8) -> Option<Kind> {
        Self::ALL.get(usize::from(b).wrapping_sub(1)).copied()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("CRC mismatch: frame says {expected:08x}, computed {computed:08x}")]
    CrcMismatch { expected: u32, computed: u32 },
    #[error("truncated frame: need {needed} bytes, have {got}")]
    TruncatedFrame { needed: usize, got: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("{0} bytes after the end of the frame")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(u32),
    #[error("malformed {kind:?} payload: {message}")]
    BadPayload { kind: Kind, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub session: SessionId,
    pub seq: u64,
    pub timestamp_us: u64,
    pub payload: Vec<u8>,
}

/// Seconds to wire microseconds, rounded; negative times clamp to zero.
pub fn seconds_to_micros(t: f64) -> u64 {
    (t * 1e6).round().max(0.0) as u64
}

impl Envelope {
    pub fn new(kind: Kind, session: SessionId, seq: u64, timestamp: f64, payload: Vec<u8>) -> Self {
        Self { kind, session, seq, timestamp_us: seconds_to_micros(timestamp), payload }
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp_us as f64 * 1e-6
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.session);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Total frame length announced by a header, after validating magic and size.
pub fn frame_len(header: &[u8]) -> Result<usize, ProtocolError> {
    if header.len() < HEADER_LEN {
        // Reject garbage as early as the magic allows.
        let n = header.len().min(4);
        if header[..n] != MAGIC[..n] {
            let mut m = [0u8; 4];
            m[..n].copy_from_slice(&header[..n]);
            return Err(ProtocolError::BadMagic(m));
        }
        return Err(ProtocolError::TruncatedFrame { needed: HEADER_LEN, got: header.len() });
    }
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let len = u32_at(header, 37);
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    Ok(HEADER_LEN + len as usize + CRC_LEN)
}

/// Decodes the first frame of `bytes`, returning it with its encoded length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Envelope, usize), ProtocolError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(ProtocolError::TruncatedFrame { needed: total, got: bytes.len() });
    }
    let body = total - CRC_LEN;
    let expected = u32_at(bytes, body);
    let computed = crc32fast::hash(&bytes[..body]);
    if expected != computed {
        return Err(ProtocolError::CrcMismatch { expected, computed });
    }
    let kind = Kind::from_byte(bytes[4]).ok_or(ProtocolError::UnknownKind(bytes[4]))?;
    let env = Envelope {
        kind,
        session: bytes[5..21].try_into().expect("16 bytes"),
        seq: u64_at(bytes, 21),
        timestamp_us: u64_at(bytes, 29),
        payload: bytes[HEADER_LEN..body].to_vec(),
    };
    Ok((env, total))
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    let (env, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ProtocolError::TrailingBytes(bytes.len() - used));
    }
    Ok(env)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream
/// between frames.
pub fn read_envelope<R: Read>(reader: &mut R) -> Result<Option<Envelope>, ReadError> {
    let mut buf = vec![0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let total = frame_len(&buf)?;
    buf.resize(total, 0);
    reader.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(Some(decode(&buf)?))
}

pub fn write_envelope<W: Write>(writer: &mut W, env: &Envelope) -> std::io::Result<()> {
    writer.write_all(&env.encode())?;
    writer.flush()
}
