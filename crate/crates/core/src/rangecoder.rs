//! Carry-less 32-bit range coder (Subbotin style) driven by 16-bit
//! fixed-point cumulative tables.

use crate::entropy::{PmfTable, PROB_BITS, PROB_TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

impl AsRef<PmfTable> for PmfTable {
    fn as_ref(&self) -> &PmfTable {
        self
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
    symbols: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new(), symbols: 0 }
    }

    /// Encodes `value` with `table`.
    pub fn encode(&mut self, value: i32, table: &PmfTable) -> Result<()> {
        let sym = table.symbol(value)?;
        let (start, size) = table.range(sym);
        self.encode_range(start, size);
        Ok(())
    }

    fn encode_range(&mut self, start: u32, size: u32) {
        debug_assert!(size > 0 && start + size <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(start * r);
        self.range = size * r;
        self.symbols += 1;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // give up the range above the next 2^16 boundary instead of carrying
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Bytes emitted so far, excluding the final flush.
    pub fn pending_len(&self) -> usize {
        self.out.len()
    }

    /// Flushes the coder state. A stream without symbols is empty.
    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols == 0 {
            return Vec::new();
        }
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    low: u32,
    range: u32,
    code: u32,
    started: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        RangeDecoder { input, pos: 0, low: 0, range: u32::MAX, code: 0, started: false }
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or(Error::PayloadExhausted)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, table: &PmfTable) -> Result<i32> {
        if !self.started {
            for _ in 0..4 {
                self.code = (self.code << 8) | self.next_byte()? as u32;
            }
            self.started = true;
        }
        let r = self.range >> PROB_BITS;
        let target = (self.code.wrapping_sub(self.low) / r).min(PROB_TOTAL - 1);
        let sym = table.lookup(target);
        let (start, size) = table.range(sym);
        self.low = self.low.wrapping_add(start * r);
        self.range = size * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(table.value(sym))
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

pub fn rc_encode<T: AsRef<PmfTable>>(symbols: &[i32], tables: &[T]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Shape(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t.as_ref())?;
    }
    Ok(enc.finish())
}

/// Decodes one symbol per table. Tables must match those used to encode;
/// a mismatch yields garbage rather than an error.
pub fn rc_decode<T: AsRef<PmfTable>>(bytes: &[u8], tables: &[T]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    tables.iter().map(|t| dec.decode(t.as_ref())).collect()
}

/// Ideal code length in bits of `symbols` under the coder's fixed-point
/// probabilities.
pub fn ideal_bits<T: AsRef<PmfTable>>(symbols: &[i32], tables: &[T]) -> f64 {
    symbols
        .iter()
        .zip(tables)
        .map(|(&s, t)| -t.as_ref().fixed_prob(s).log2())
        .sum()
}
