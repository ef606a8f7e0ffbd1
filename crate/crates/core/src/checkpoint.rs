//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OTCILCKPT"        9-byte magic
//! version: u32
//! kind: u8           1 = single projector stack, 2 = engine state
//! payload
//! crc32: u32         CRC32 (IEEE) of every preceding byte
//! ```
//!
//! Parameters are stored as `f64` so that a restored engine continues
//! training bit-for-bit where the saved one stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::corpus::format::write_atomic;
use crate::engine::EngineState;
use crate::linalg::Matrix;
use crate::projectors::ProjectorStack;
use crate::replay::ClassStatistics;
use crate::{Error, Result};

const MAGIC: &[u8; 9] = b"OTCILCKPT";
const VERSION: u32 = 1;
const KIND_STACK: u8 = 1;
const KIND_ENGINE: u8 = 2;

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub(crate) fn new() -> Self {
        Self::with_kind(KIND_STACK)
    }

    fn with_kind(kind: u8) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind);
        Self { buf }
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn bytes(&mut self, data: &[u8]) {
        self.u64(data.len() as u64);
        self.buf.extend_from_slice(data);
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

#[derive(Debug)]
pub(crate) struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Verifies magic, version and checksum; returns a decoder positioned after
/// the kind byte.
pub(crate) fn open(bytes: &[u8]) -> Result<Decoder<'_>> {
    open_kind(bytes, KIND_STACK)
}

fn open_kind(bytes: &[u8], kind: u8) -> Result<Decoder<'_>> {
    let header = MAGIC.len() + 5;
    if bytes.len() < header + 4 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut dec = Decoder {
        data: body,
        pos: MAGIC.len(),
    };
    let version = dec.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let found = dec.u8()?;
    if found != kind {
        return Err(corrupt(format!("expected checkpoint kind {kind}, found {found}")));
    }
    Ok(dec)
}

impl Decoder<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_le_bytes(a)
            })
            .collect())
    }

    pub(crate) fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(corrupt(format!("{} trailing bytes", self.data.len() - self.pos)))
        }
    }
}

fn encode_statistics(enc: &mut Encoder, s: &ClassStatistics) {
    enc.u32(s.class_id);
    enc.u64(s.count as u64);
    enc.u32(s.mean.len() as u32);
    enc.f64s(&s.mean);
    enc.f64s(s.covariance.as_slice());
}

fn decode_statistics(dec: &mut Decoder) -> Result<ClassStatistics> {
    let class_id = dec.u32()?;
    let count = dec.u64()? as usize;
    let d = dec.u32()? as usize;
    let mean = dec.f64s(d)?;
    let covariance = Matrix::from_vec(d, d, dec.f64s(d * d)?)?;
    Ok(ClassStatistics {
        class_id,
        mean,
        covariance,
        count,
    })
}

/// Serializes an engine state plus an opaque metadata blob (the caller's run
/// configuration, typically JSON).
pub fn encode_engine(state: &EngineState, metadata: &[u8]) -> Vec<u8> {
    let mut enc = Encoder::with_kind(KIND_ENGINE);
    enc.u32(state.dim() as u32);
    for stack in state.stacks() {
        stack.encode(&mut enc);
    }
    enc.u32(state.sessions().len() as u32);
    for session in state.sessions() {
        enc.u32(session.len() as u32);
        for &c in session {
            enc.u32(c);
        }
    }
    enc.u32(state.attribute_choices().len() as u32);
    for (&class_id, choice) in state.attribute_choices() {
        enc.u32(class_id);
        enc.u32(choice.len() as u32);
        for &i in choice {
            enc.u32(i as u32);
        }
    }
    enc.u32(state.statistics().len() as u32);
    for s in state.statistics().values() {
        encode_statistics(&mut enc, s);
    }
    enc.bytes(metadata);
    enc.finish()
}

pub fn decode_engine(bytes: &[u8]) -> Result<(EngineState, Vec<u8>)> {
    let mut dec = open_kind(bytes, KIND_ENGINE)?;
    let dim = dec.u32()? as usize;
    let mut stacks = Vec::with_capacity(4);
    for _ in 0..4 {
        let stack = ProjectorStack::decode(&mut dec)?;
        if stack.dim() != dim {
            return Err(corrupt("stack dimension differs from engine dimension"));
        }
        stacks.push(stack);
    }
    let n_sessions = dec.u32()? as usize;
    let mut sessions = Vec::with_capacity(n_sessions.min(4096));
    for _ in 0..n_sessions {
        let n = dec.u32()? as usize;
        let mut s = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            s.push(dec.u32()?);
        }
        sessions.push(s);
    }
    let n_choices = dec.u32()? as usize;
    let mut choices = BTreeMap::new();
    for _ in 0..n_choices {
        let class_id = dec.u32()?;
        let n = dec.u32()? as usize;
        let mut c = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            c.push(dec.u32()? as usize);
        }
        choices.insert(class_id, c);
    }
    let n_stats = dec.u32()? as usize;
    let mut statistics = BTreeMap::new();
    for _ in 0..n_stats {
        let s = decode_statistics(&mut dec)?;
        statistics.insert(s.class_id, s);
    }
    let metadata = dec.bytes()?;
    dec.finish()?;
    let state =
        EngineState::from_parts(dim, stacks, sessions, choices, statistics).map_err(|e| corrupt(e.to_string()))?;
    Ok((state, metadata))
}

pub fn save(path: impl AsRef<Path>, state: &EngineState, metadata: &[u8]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_engine(state, metadata))
}

pub fn load(path: impl AsRef<Path>) -> Result<(EngineState, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_engine(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let mut enc = Encoder::new();
        enc.u32(7);
        let bytes = enc.finish();
        let mut dec = open(&bytes).unwrap();
        assert_eq!(dec.u32().unwrap(), 7);
        dec.finish().unwrap();

        assert!(open(&bytes[..5]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(open(&bad).unwrap_err().to_string().contains("magic"));
        assert!(open_kind(&bytes, KIND_ENGINE).is_err());
    }

    #[test]
    fn engine_round_trip() {
        let mut state = EngineState::new(3);
        state.begin_session(vec![4, 9]);
        let mut stats = ClassStatistics {
            class_id: 4,
            mean: vec![1.0, 2.0, 3.0],
            covariance: Matrix::identity(3),
            count: 5,
        };
        state.insert_statistics(stats.clone());
        stats.class_id = 9;
        state.insert_statistics(stats);
        state.set_attribute_choice(4, vec![0, 2]);
        let bytes = encode_engine(&state, b"{\"k\":1}");
        let (back, meta) = decode_engine(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(meta, b"{\"k\":1}");
        let mut flipped = bytes;
        let n = flipped.len();
        flipped[n / 2] ^= 1;
        assert!(decode_engine(&flipped).is_err());
    }
}
