//! Byte-oriented range coder with carry propagation: 33-bit low, 32-bit
//! range, 16-bit frequency tables.

use super::cdf::{QuantizedCdf, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
    started: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
            started: false,
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                // the very first byte out is always zero and never stored
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                }
                self.started = true;
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, symbol: i32, cdf: &QuantizedCdf) -> Result<()> {
        let (start, freq) = cdf.range(symbol)?;
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    /// Flush the shortest tail that still identifies the final interval,
    /// and drop trailing zero bytes (the decoder reads zeros past the end).
    pub fn finish(mut self) -> Vec<u8> {
        let hi = self.low + self.range as u64;
        for keep in 0..=4u32 {
            let unit = 1u64 << (32 - 8 * keep);
            let v = self.low.div_ceil(unit) * unit;
            if v < hi {
                self.low = v;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let r = self.range >> PRECISION_BITS;
        let target = (self.code / r).min((1 << PRECISION_BITS) - 1);
        let (symbol, start, freq) = cdf.lookup(target);
        self.code -= r * start;
        self.range = r * freq;
        if self.code >= self.range {
            return Err(Error::Decode("range coder state left its interval".into()));
        }
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
        Ok(symbol)
    }

    /// Bytes read so far, counting implicit zero padding past the end.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encode `symbols[i]` against `cdfs[i]`.
pub fn range_encode(symbols: &[i32], cdfs: &[&QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::Invalid(format!(
            "{} symbols but {} tables",
            symbols.len(),
            cdfs.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], cdfs: &[&QuantizedCdf]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes);
    cdfs.iter().map(|c| dec.decode(c)).collect()
}
