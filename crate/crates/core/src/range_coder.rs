//! Byte-oriented rANS coding of integer symbols against [`CdfTable`]s.
//!
//! Symbols are pushed in reverse so the decoder pops them in order. The
//! payload starts with the final 32-bit state (little-endian) followed by the
//! renormalization bytes. Only integer arithmetic is involved.

use std::borrow::Borrow;

use crate::entropy_models::CdfTable;
use crate::error::{DcicError, Result};

const STATE_LOW: u32 = 1 << 23;
/// Bytes written by the final flush.
pub const FLUSH_BYTES: usize = 4;
/// Serialized segment header size.
pub const SEGMENT_HEADER_BYTES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CodedSegment {
    pub n_symbols: u32,
    /// Symbol range `L` the tables were built for.
    pub range: u16,
    pub payload: Vec<u8>,
}

impl CodedSegment {
    /// `[n_symbols u32 LE][L u16 LE][payload length u32 LE][payload]`.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.n_symbols.to_le_bytes());
        out.extend_from_slice(&self.range.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut v);
        v
    }

    pub fn serialized_len(&self) -> usize {
        SEGMENT_HEADER_BYTES + self.payload.len()
    }

    /// Parses one segment from the front of `bytes`; returns it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(CodedSegment, usize)> {
        if bytes.len() < SEGMENT_HEADER_BYTES {
            return Err(DcicError::Parse(format!("truncated segment header ({} bytes)", bytes.len())));
        }
        let n_symbols = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let range = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let end = SEGMENT_HEADER_BYTES
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| DcicError::Parse(format!("segment payload of {len} bytes exceeds the stream")))?;
        Ok((CodedSegment { n_symbols, range, payload: bytes[SEGMENT_HEADER_BYTES..end].to_vec() }, end))
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }
}

pub fn encode_symbols<B: Borrow<CdfTable>>(symbols: &[i32], tables: &[B], range: u16) -> Result<CodedSegment> {
    if symbols.len() != tables.len() {
        return Err(DcicError::Encode(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let n_symbols = u32::try_from(symbols.len()).map_err(|_| DcicError::Encode("too many symbols".into()))?;
    if symbols.is_empty() {
        return Ok(CodedSegment { n_symbols: 0, range, payload: Vec::new() });
    }
    let mut rev = Vec::new();
    let mut x = STATE_LOW;
    for (&sym, table) in symbols.iter().zip(tables).rev() {
        let table = table.borrow();
        let slot = table
            .slot(sym)
            .ok_or_else(|| DcicError::Encode(format!("symbol {sym} outside [-{0}, {0}]", table.range())))?;
        let (start, freq) = table.interval(slot);
        let bits = table.precision();
        let x_max = ((STATE_LOW >> bits) << 8) * freq;
        while x >= x_max {
            rev.push(x as u8);
            x >>= 8;
        }
        x = ((x / freq) << bits) + (x % freq) + start;
    }
    let mut payload = Vec::with_capacity(rev.len() + FLUSH_BYTES);
    payload.extend_from_slice(&x.to_le_bytes());
    payload.extend(rev.iter().rev());
    Ok(CodedSegment { n_symbols, range, payload })
}

pub fn decode_symbols<B: Borrow<CdfTable>>(seg: &CodedSegment, tables: &[B]) -> Result<Vec<i32>> {
    let n = seg.n_symbols as usize;
    if tables.len() != n {
        return Err(DcicError::Decode(format!("segment holds {n} symbols but {} tables were supplied", tables.len())));
    }
    if n == 0 {
        if !seg.payload.is_empty() {
            return Err(DcicError::Decode("non-empty payload for an empty segment".into()));
        }
        return Ok(Vec::new());
    }
    let bytes = &seg.payload;
    if bytes.len() < FLUSH_BYTES {
        return Err(DcicError::Decode("payload shorter than the coder state".into()));
    }
    let mut x = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let mut pos = FLUSH_BYTES;
    let mut out = Vec::with_capacity(n);
    for table in tables {
        let table = table.borrow();
        let bits = table.precision();
        let get = x & ((1u32 << bits) - 1);
        let cdf = table.cdf();
        // Largest slot with cdf[slot] <= get.
        let slot = cdf.partition_point(|&c| c <= get) - 1;
        if slot == table.escape_slot() {
            return Err(DcicError::Decode("escape slot decoded".into()));
        }
        let (start, freq) = table.interval(slot);
        x = (freq as u64 * (x >> bits) as u64 + (get - start) as u64) as u32;
        while x < STATE_LOW {
            let b = *bytes.get(pos).ok_or_else(|| DcicError::Decode("payload exhausted".into()))?;
            x = (x << 8) | b as u32;
            pos += 1;
        }
        out.push(table.symbol(slot));
    }
    if x != STATE_LOW || pos != bytes.len() {
        return Err(DcicError::Decode("coder state did not return to its initial value".into()));
    }
    Ok(out)
}
