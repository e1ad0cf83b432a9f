//! Binary scan frame.
//!
//! ```text
//! offset  size  field
//!      0     2  magic "TX"
//!      2     1  version (1)
//!      3     2  taxel count n           u16 LE
//!      5     4  sequence                u32 LE
//!      9     8  timestamp, µs           u64 LE
//!     17    4n  readings, 0.5 fF units  i32 LE
//!  17+4n     4  CRC-32 (IEEE) of bytes 0..17+4n
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"TX";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;
pub const CRC_LEN: usize = 4;
/// Reading units per pF (one unit is 0.5 fF).
pub const COUNTS_PER_PF: f64 = 2000.0;
/// Largest reading magnitude, ±15 pF.
pub const MAX_READING: i32 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("buffer holds {got} bytes, frame needs {needed}")]
    ShortBuffer { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unknown frame version {0}")]
    UnknownVersion(u8),
    #[error("buffer holds {got} bytes, header declares {declared}")]
    LengthMismatch { declared: usize, got: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("reading {value} at taxel slot {slot} outside ±{MAX_READING}")]
    ReadingOutOfRange { slot: usize, value: i32 },
    #[error("{0} readings exceed the u16 taxel count")]
    TooManyReadings(usize),
}

/// One scan of every taxel, readings in 0.5 fF units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub sequence: u32,
    pub timestamp_us: u64,
    pub readings: Vec<i32>,
}

pub fn pf_to_counts(c: f64) -> i32 {
    let n = (c * COUNTS_PER_PF).round_ties_even();
    n.clamp(-(MAX_READING as f64), MAX_READING as f64) as i32
}

pub fn counts_to_pf(n: i32) -> f64 {
    n as f64 / COUNTS_PER_PF
}

impl Frame {
    /// Builds a frame from capacitances in pF, clamping to the converter range.
    pub fn from_pf(sequence: u32, timestamp_us: u64, readings: &[f64]) -> Self {
        Frame {
            sequence,
            timestamp_us,
            readings: readings.iter().copied().map(pf_to_counts).collect(),
        }
    }

    pub fn readings_pf(&self) -> Vec<f64> {
        self.readings.iter().copied().map(counts_to_pf).collect()
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.readings.len())
    }
}

pub fn encoded_len(taxels: usize) -> usize {
    HEADER_LEN + 4 * taxels + CRC_LEN
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let n = frame.readings.len();
    let count = u16::try_from(n).map_err(|_| FrameError::TooManyReadings(n))?;
    if let Some((slot, &value)) = frame
        .readings
        .iter()
        .enumerate()
        .find(|(_, r)| r.unsigned_abs() > MAX_READING as u32)
    {
        return Err(FrameError::ReadingOutOfRange { slot, value });
    }
    let mut buf = Vec::with_capacity(encoded_len(n));
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&frame.sequence.to_le_bytes());
    buf.extend_from_slice(&frame.timestamp_us.to_le_bytes());
    for r in &frame.readings {
        buf.extend_from_slice(&r.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn le<const N: usize>(bytes: &[u8], at: usize) -> [u8; N] {
    bytes[at..at + N].try_into().expect("length checked")
}

/// Parses one frame. Checks run in a fixed order (size, magic, version,
/// length, CRC, reading range) and the first failure is reported.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let min = encoded_len(0);
    if bytes.len() < min {
        return Err(FrameError::ShortBuffer {
            needed: min,
            got: bytes.len(),
        });
    }
    let magic = le::<2>(bytes, 0);
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(FrameError::UnknownVersion(bytes[2]));
    }
    let n = u16::from_le_bytes(le(bytes, 3)) as usize;
    let declared = encoded_len(n);
    if bytes.len() < declared {
        return Err(FrameError::ShortBuffer {
            needed: declared,
            got: bytes.len(),
        });
    }
    if bytes.len() > declared {
        return Err(FrameError::LengthMismatch {
            declared,
            got: bytes.len(),
        });
    }
    let body = declared - CRC_LEN;
    let stored = u32::from_le_bytes(le(bytes, body));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(FrameError::CrcMismatch { stored, computed });
    }
    let readings: Vec<i32> = (0..n)
        .map(|i| i32::from_le_bytes(le(bytes, HEADER_LEN + 4 * i)))
        .collect();
    if let Some((slot, &value)) = readings
        .iter()
        .enumerate()
        .find(|(_, r)| r.unsigned_abs() > MAX_READING as u32)
    {
        return Err(FrameError::ReadingOutOfRange { slot, value });
    }
    Ok(Frame {
        sequence: u32::from_le_bytes(le(bytes, 5)),
        timestamp_us: u64::from_le_bytes(le(bytes, 9)),
        readings,
    })
}

/// Writes `payload` behind a u32 little-endian length.
pub fn write_prefixed<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "payload too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)
}

/// Reads one length-prefixed payload; `Ok(None)` on clean end of stream.
pub fn read_prefixed<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Decodes every frame of a log made of concatenated length-prefixed frames.
pub fn read_frame_log<R: Read>(r: &mut R) -> io::Result<Vec<Result<Frame, FrameError>>> {
    let mut out = Vec::new();
    while let Some(buf) = read_prefixed(r)? {
        out.push(decode_frame(&buf));
    }
    Ok(out)
}
