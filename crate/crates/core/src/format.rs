//! On-disk containers: LBA1 (binary adapter) and LRF1 (dense factor pair).
//! Both are little-endian with a trailing CRC32 over every preceding byte.
//!
//! LBA1 layout:
//!   "LBA1" | version u16 | flags u16 | N M R ℓ r0_ref u32×5        (28 bytes)
//!   B₁ column-major, each column padded to u64 words
//!   B₂ row-major, each row padded to u64 words
//!   ℓ × { α: N×f16, β: R×f16, γ: M×f16 }
//!   CRC32 u32
//!
//! LRF1 layout:
//!   "LRF1" | version u16 | flags u16 | N M r₀ u32×3                (20 bytes)
//!   A row-major N×r₀ f32, B row-major M×r₀ f32, CRC32 u32

use std::fs;
use std::path::Path;

use half::f16;
use thiserror::Error;

use crate::adapter::{AdapterError, LoraFactors, LordbaAdapter, ScaleEnvelope, SignMatrix};
use crate::tensor::DenseMatrix;

pub const LBA1_MAGIC: [u8; 4] = *b"LBA1";
pub const LRF1_MAGIC: [u8; 4] = *b"LRF1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated: wanted {wanted} bytes, have {have}")]
    Truncated { wanted: usize, have: usize },
    #[error("shape inconsistency: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Total LBA1 file size in bytes for the given shape.
pub fn lba1_file_bytes(n: usize, m: usize, r: usize, l: usize) -> u64 {
    let b1_words = r as u64 * n.div_ceil(64) as u64;
    let b2_words = r as u64 * m.div_ceil(64) as u64;
    28 + 8 * (b1_words + b2_words) + 2 * l as u64 * (n + r + m) as u64 + 4
}

/// Total LRF1 file size in bytes.
pub fn lrf1_file_bytes(n: usize, m: usize, r0: usize) -> u64 {
    20 + 4 * r0 as u64 * (n + m) as u64 + 4
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + len > self.buf.len() {
            return Err(FormatError::Truncated { wanted: self.pos + len, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn push_f16(out: &mut Vec<u8>, v: f64) -> Result<(), FormatError> {
    let h = f16::from_f64(v);
    if !h.is_finite() {
        return Err(FormatError::ShapeMismatch(format!("scale {v:e} is outside binary16 range")));
    }
    out.extend_from_slice(&h.to_le_bytes());
    Ok(())
}

/// Serialize an adapter to the LBA1 byte layout.
pub fn encode_adapter(adapter: &LordbaAdapter) -> Result<Vec<u8>, FormatError> {
    let (n, r, m) = (adapter.n(), adapter.carrier_rank(), adapter.m());
    let l = adapter.num_envelopes();
    let mut out = Vec::with_capacity(lba1_file_bytes(n, m, r, l) as usize);
    out.extend_from_slice(&LBA1_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for dim in [n, m, r, l, adapter.r0_ref] {
        let v = u32::try_from(dim)
            .map_err(|_| FormatError::ShapeMismatch(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    // Column-major B₁ = word rows of B₁ᵀ; row-major B₂ as stored.
    for w in adapter.b1.transpose().words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for w in adapter.b2.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for env in &adapter.envelopes {
        for v in env.alpha.iter().chain(&env.beta).chain(&env.gamma) {
            push_f16(&mut out, *v)?;
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn check_crc(bytes: &[u8]) -> Result<&[u8], FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { wanted: 4, have: bytes.len() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    Ok(body)
}

fn check_magic(rd: &mut Reader, expected: [u8; 4]) -> Result<(), FormatError> {
    let found: [u8; 4] = rd.take(4)?.try_into().unwrap();
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    let version = rd.u16()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let _flags = rd.u16()?;
    Ok(())
}

fn read_words(rd: &mut Reader, count: usize) -> Result<Vec<u64>, FormatError> {
    let raw = rd.take(count * 8)?;
    Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_f16s(rd: &mut Reader, count: usize) -> Result<Vec<f64>, FormatError> {
    let raw = rd.take(count * 2)?;
    Ok(raw
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f64())
        .collect())
}

/// Parse an LBA1 byte buffer, validating magic, version, CRC, padding bits
/// and shape invariants.
pub fn decode_adapter(bytes: &[u8]) -> Result<LordbaAdapter, FormatError> {
    let body = check_crc(bytes)?;
    let mut rd = Reader { buf: body, pos: 0 };
    check_magic(&mut rd, LBA1_MAGIC)?;
    let n = rd.u32()? as usize;
    let m = rd.u32()? as usize;
    let r = rd.u32()? as usize;
    let l = rd.u32()? as usize;
    let r0 = rd.u32()? as usize;
    if n == 0 || m == 0 || r == 0 || l == 0 {
        return Err(FormatError::ShapeMismatch(format!("degenerate shape N={n} M={m} R={r} l={l}")));
    }
    let b1t = SignMatrix::from_words(r, n, read_words(&mut rd, r * n.div_ceil(64))?)?;
    let b2 = SignMatrix::from_words(r, m, read_words(&mut rd, r * m.div_ceil(64))?)?;
    let mut envelopes = Vec::with_capacity(l);
    for _ in 0..l {
        let alpha = read_f16s(&mut rd, n)?;
        let beta = read_f16s(&mut rd, r)?;
        let gamma = read_f16s(&mut rd, m)?;
        envelopes.push(ScaleEnvelope { alpha, beta, gamma });
    }
    if rd.pos != body.len() {
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing bytes after payload",
            body.len() - rd.pos
        )));
    }
    Ok(LordbaAdapter::new(b1t.transpose(), b2, envelopes, r0)?)
}

pub fn save_adapter(path: impl AsRef<Path>, adapter: &LordbaAdapter) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_adapter(adapter)?)?)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<LordbaAdapter, FormatError> {
    decode_adapter(&fs::read(path)?)
}

/// Serialize a dense factor pair to the LRF1 byte layout.
pub fn encode_factors(factors: &LoraFactors) -> Result<Vec<u8>, FormatError> {
    let (n, r0, m) = (factors.a.rows(), factors.rank(), factors.b.rows());
    let mut out = Vec::with_capacity(lrf1_file_bytes(n, m, r0) as usize);
    out.extend_from_slice(&LRF1_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for dim in [n, m, r0] {
        let v = u32::try_from(dim)
            .map_err(|_| FormatError::ShapeMismatch(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for mat in [&factors.a, &factors.b] {
        for v in mat.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_factors(bytes: &[u8]) -> Result<LoraFactors, FormatError> {
    let body = check_crc(bytes)?;
    let mut rd = Reader { buf: body, pos: 0 };
    check_magic(&mut rd, LRF1_MAGIC)?;
    let n = rd.u32()? as usize;
    let m = rd.u32()? as usize;
    let r0 = rd.u32()? as usize;
    if n == 0 || m == 0 || r0 == 0 {
        return Err(FormatError::ShapeMismatch(format!("degenerate shape N={n} M={m} r0={r0}")));
    }
    let mut read_mat = |rows: usize| -> Result<DenseMatrix, FormatError> {
        let raw = rd.take(rows * r0 * 4)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(DenseMatrix::from_vec(rows, r0, vals))
    };
    let a = read_mat(n)?;
    let b = read_mat(m)?;
    if rd.pos != body.len() {
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing bytes after payload",
            body.len() - rd.pos
        )));
    }
    Ok(LoraFactors::new(a, b)?)
}

pub fn save_factors(path: impl AsRef<Path>, factors: &LoraFactors) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_factors(factors)?)?)
}

pub fn load_factors(path: impl AsRef<Path>) -> Result<LoraFactors, FormatError> {
    decode_factors(&fs::read(path)?)
}
