//! MSB-first bit packing.

use super::{CompressionError, Result};

#[derive(Debug, Default)]
pub(crate) struct BitWriter {
    buf: Vec<u8>,
    acc: u64,
    pending: u32,
}

impl BitWriter {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn write_bit(&mut self, bit: bool) {
        self.write_bits(bit as u64, 1);
    }

    /// Writes the low `count` bits of `value`, most significant first.
    pub(crate) fn write_bits(&mut self, value: u64, count: u32) {
        debug_assert!(count <= 64);
        let mut remaining = count;
        while remaining > 0 {
            let chunk = remaining.min(32);
            remaining -= chunk;
            let bits = (value >> remaining) & ((1u64 << chunk) - 1);
            self.acc = (self.acc << chunk) | bits;
            self.pending += chunk;
            while self.pending >= 8 {
                self.pending -= 8;
                self.buf.push((self.acc >> self.pending) as u8);
            }
            self.acc &= (1u64 << self.pending) - 1;
        }
    }

    /// `count` one-bits followed by a zero.
    pub(crate) fn write_unary(&mut self, mut count: u64) {
        while count >= 32 {
            self.write_bits(u32::MAX as u64, 32);
            count -= 32;
        }
        self.write_bits(((1u64 << count) - 1) << 1, count as u32 + 1);
    }

    /// Pads the final byte with zeros.
    pub(crate) fn finish(mut self) -> Vec<u8> {
        if self.pending > 0 {
            self.buf.push((self.acc << (8 - self.pending)) as u8);
        }
        self.buf
    }
}

pub(crate) struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() * 8 - self.pos
    }

    pub(crate) fn read_bit(&mut self) -> Result<bool> {
        let byte = *self
            .data
            .get(self.pos / 8)
            .ok_or_else(|| CompressionError::Decode("bit stream exhausted".into()))?;
        let bit = (byte >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub(crate) fn read_bits(&mut self, count: u32) -> Result<u64> {
        if (count as usize) > self.remaining() {
            return Err(CompressionError::Decode("bit stream exhausted".into()));
        }
        let mut out = 0u64;
        for _ in 0..count {
            out = (out << 1) | self.read_bit()? as u64;
        }
        Ok(out)
    }

    /// Counts one-bits up to the terminating zero, failing past `limit`.
    pub(crate) fn read_unary(&mut self, limit: u64) -> Result<u64> {
        let mut count = 0u64;
        while self.read_bit()? {
            count += 1;
            if count > limit {
                return Err(CompressionError::Decode("unary run exceeds bound".into()));
            }
        }
        Ok(count)
    }

    /// Succeeds only if at most the zero padding of the final byte is left.
    pub(crate) fn expect_end(&self) -> Result<()> {
        let rest = self.remaining();
        if rest >= 8 {
            return Err(CompressionError::Decode(format!("{rest} trailing bits")));
        }
        if rest > 0 {
            let last = self.data[self.data.len() - 1];
            if last & ((1u8 << rest) - 1) != 0 {
                return Err(CompressionError::Decode("nonzero padding bits".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_round_trip() {
        let mut w = BitWriter::new();
        w.write_bits(0b101, 3);
        w.write_unary(40);
        w.write_bits(u64::MAX, 64);
        w.write_bit(true);
        w.write_unary(0);
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read_bits(3).unwrap(), 0b101);
        assert_eq!(r.read_unary(100).unwrap(), 40);
        assert_eq!(r.read_bits(64).unwrap(), u64::MAX);
        assert!(r.read_bit().unwrap());
        assert_eq!(r.read_unary(0).unwrap(), 0);
        r.expect_end().unwrap();
    }

    #[test]
    fn reader_detects_exhaustion_and_garbage() {
        let mut r = BitReader::new(&[0xff]);
        assert!(r.read_unary(100).is_err());
        let mut r = BitReader::new(&[0b1000_0001]);
        assert!(r.read_bit().unwrap());
        assert!(r.expect_end().is_err());
        assert!(BitReader::new(&[0, 0]).expect_end().is_err());
    }
}
