//! 32-bit range coder with carry propagation through a cached byte.
//!
//! The virtual leading byte of the classic construction is always zero and
//! is never written, so an empty message flushes to exactly four bytes.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Narrows the interval to `[cum, cum + freq)` out of `total`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= 1 << 16);
        let r = self.range / total;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            debug_assert_eq!(byte, 0);
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    step: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
            step: 0,
        };
        for _ in 0..4 {
            d.code = d.code << 8 | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::CorruptStream("payload exhausted before all symbols".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Scaled target for a table with the given total; follow with [`consume`].
    ///
    /// [`consume`]: RangeDecoder::consume
    pub fn target(&mut self, total: u32) -> Result<u32> {
        self.step = self.range / total;
        let v = self.code / self.step;
        if v >= total {
            return Err(Error::CorruptStream("code value outside coding interval".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.code -= self.step * cum;
        self.range = self.step * freq;
        while self.range < TOP {
            self.code = self.code << 8 | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    /// Bytes pulled from the input so far.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}
