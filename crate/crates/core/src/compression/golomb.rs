//! Golomb coding of mask run lengths with a power-of-two modulus (Rice code).

use super::bits::{BitReader, BitWriter};
use super::{CompressionError, Result};

const MAX_RICE_BITS: u32 = 32;

/// `log2 M` for `M = 2^ceil(log2(ln 2 / -ln(1 - p)))`, clamped to `M >= 1`,
/// where `p` is the empirical fraction of set mask entries.
pub(crate) fn rice_parameter(ones: usize, len: usize) -> u32 {
    if len == 0 || ones >= len {
        return 0;
    }
    if ones == 0 {
        return MAX_RICE_BITS;
    }
    let p = ones as f64 / len as f64;
    let m = std::f64::consts::LN_2 / -(-p).ln_1p();
    if m <= 1.0 {
        0
    } else {
        (m.log2().ceil() as u32).min(MAX_RICE_BITS)
    }
}

fn write_rice(w: &mut BitWriter, value: u64, k: u32) {
    w.write_unary(value >> k);
    w.write_bits(value, k);
}

fn read_rice(r: &mut BitReader<'_>, k: u32, limit: u64) -> Result<u64> {
    let q = r.read_unary(limit >> k)?;
    let rem = r.read_bits(k)?;
    let value = (q << k) | rem;
    if value > limit {
        return Err(CompressionError::Decode("run length exceeds tensor".into()));
    }
    Ok(value)
}

/// Codes the zero-run before each set entry, then the trailing zero-run.
pub(crate) fn encode_mask(mask: &[bool], ones: usize) -> Vec<u8> {
    let k = rice_parameter(ones, mask.len());
    let mut w = BitWriter::new();
    let mut run = 0u64;
    for &m in mask {
        if m {
            write_rice(&mut w, run, k);
            run = 0;
        } else {
            run += 1;
        }
    }
    write_rice(&mut w, run, k);
    w.finish()
}

pub(crate) fn decode_mask(stream: &[u8], len: usize, ones: usize) -> Result<Vec<bool>> {
    let k = rice_parameter(ones, len);
    let zeros = (len - ones) as u64;
    let mut r = BitReader::new(stream);
    let mut mask = Vec::with_capacity(len);
    let mut zeros_left = zeros;
    for _ in 0..ones {
        let run = read_rice(&mut r, k, zeros_left)?;
        zeros_left -= run;
        mask.extend(std::iter::repeat_n(false, run as usize));
        mask.push(true);
    }
    let tail = read_rice(&mut r, k, zeros_left)?;
    if tail != zeros_left {
        return Err(CompressionError::Decode(format!(
            "mask runs cover {} of {len} entries",
            len as u64 - zeros_left + tail
        )));
    }
    mask.extend(std::iter::repeat_n(false, tail as usize));
    r.expect_end()?;
    Ok(mask)
}
