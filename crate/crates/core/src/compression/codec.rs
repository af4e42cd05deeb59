//! Self-describing blob framing.
//!
//! Byte layout (integers little-endian, floats IEEE-754 binary64):
//!
//! | field        | size                 |
//! |--------------|----------------------|
//! | magic `SFTC` | 4                    |
//! | version      | 1                    |
//! | rows, cols   | 4 + 4                |
//! | levels E     | 2 (0 = raw values)   |
//! | s_min, s_max | 8 + 8                |
//! | nnz          | 4 (sign-bit count)   |
//! | histogram    | 4 + 6 per entry      |
//! | mask stream  | 4 + bytes            |
//! | sign stream  | 4 + bytes            |
//! | value stream | 4 + bytes            |
//!
//! Histogram entries are `(level u16, count u32)` in increasing level order.
//! With `E = 0` the histogram is empty and each value is sent as the 31
//! magnitude bits of its f32 encoding.

use super::bits::{BitReader, BitWriter};
use super::golomb::{decode_mask, encode_mask};
use super::huffman::PrefixCode;
use super::{CompressionError, QuantizationGrid, Result, SparseTensor};

pub const BLOB_MAGIC: [u8; 4] = *b"SFTC";
pub const BLOB_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobHeader {
    pub rows: u32,
    pub cols: u32,
    pub levels: u16,
    pub s_min: f64,
    pub s_max: f64,
    pub nnz: u32,
    pub histogram: Vec<(u16, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlob {
    pub header: BlobHeader,
    pub mask_stream: Vec<u8>,
    pub sign_stream: Vec<u8>,
    pub value_stream: Vec<u8>,
}

impl CompressedBlob {
    pub fn byte_len(&self) -> usize {
        4 + 1 + 8 + 2 + 16 + 4
            + 4
            + 6 * self.header.histogram.len()
            + 12
            + self.mask_stream.len()
            + self.sign_stream.len()
            + self.value_stream.len()
    }

    pub fn bit_len(&self) -> usize {
        8 * self.byte_len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.extend_from_slice(&h.rows.to_le_bytes());
        out.extend_from_slice(&h.cols.to_le_bytes());
        out.extend_from_slice(&h.levels.to_le_bytes());
        out.extend_from_slice(&h.s_min.to_le_bytes());
        out.extend_from_slice(&h.s_max.to_le_bytes());
        out.extend_from_slice(&h.nnz.to_le_bytes());
        out.extend_from_slice(&(h.histogram.len() as u32).to_le_bytes());
        for &(symbol, count) in &h.histogram {
            out.extend_from_slice(&symbol.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
        for stream in [&self.mask_stream, &self.sign_stream, &self.value_stream] {
            out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
            out.extend_from_slice(stream);
        }
        debug_assert_eq!(out.len(), self.byte_len());
        out
    }

    /// Parses the framing only; stream contents are checked by [`decode`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != BLOB_MAGIC {
            return Err(CompressionError::Decode("bad magic".into()));
        }
        let version = cur.take(1)?[0];
        if version != BLOB_VERSION {
            return Err(CompressionError::Decode(format!("unsupported version {version}")));
        }
        let rows = cur.u32()?;
        let cols = cur.u32()?;
        let levels = u16::from_le_bytes(cur.array()?);
        let s_min = f64::from_le_bytes(cur.array()?);
        let s_max = f64::from_le_bytes(cur.array()?);
        let nnz = cur.u32()?;
        let entries = cur.u32()? as usize;
        if entries > cur.remaining() / 6 {
            return Err(CompressionError::Decode("histogram longer than blob".into()));
        }
        let mut histogram = Vec::with_capacity(entries);
        for _ in 0..entries {
            let symbol = u16::from_le_bytes(cur.array()?);
            histogram.push((symbol, cur.u32()?));
        }
        let mask_stream = cur.stream()?;
        let sign_stream = cur.stream()?;
        let value_stream = cur.stream()?;
        if cur.remaining() != 0 {
            return Err(CompressionError::Decode(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(CompressedBlob {
            header: BlobHeader { rows, cols, levels, s_min, s_max, nnz, histogram },
            mask_stream,
            sign_stream,
            value_stream,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(CompressionError::Decode("truncated blob".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn stream(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
}

fn shape_header(sparse: &SparseTensor) -> Result<(u32, u32, u32)> {
    let rows = u32::try_from(sparse.rows())
        .map_err(|_| CompressionError::InvalidTensor("rows exceed u32".into()))?;
    let cols = u32::try_from(sparse.cols())
        .map_err(|_| CompressionError::InvalidTensor("cols exceed u32".into()))?;
    let len = u32::try_from(sparse.len())
        .map_err(|_| CompressionError::InvalidTensor("element count exceeds u32".into()))?;
    Ok((rows, cols, len))
}

fn encode_signs(values: &[f32]) -> Vec<u8> {
    let mut w = BitWriter::new();
    for v in values {
        w.write_bit(v.is_sign_negative());
    }
    w.finish()
}

fn mask_stream(sparse: &SparseTensor) -> Vec<u8> {
    encode_mask(sparse.mask(), sparse.nnz())
}

/// Lossless coding of a quantized sparse tensor.
pub fn encode(sparse: &SparseTensor) -> Result<CompressedBlob> {
    let (rows, cols, _) = shape_header(sparse)?;
    let grid = sparse
        .grid()
        .ok_or_else(|| CompressionError::Unquantized("tensor carries no quantization grid".into()))?;
    let symbols = sparse
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            grid.level_of(v.abs()).ok_or_else(|| {
                CompressionError::Unquantized(format!("value {v} at position {i} is not a grid point"))
            })
        })
        .collect::<Result<Vec<u16>>>()?;

    let mut counts = vec![0u32; grid.levels() as usize + 1];
    for &s in &symbols {
        counts[s as usize] += 1;
    }
    let histogram: Vec<(u16, u32)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| (s as u16, c))
        .collect();
    let code = PrefixCode::from_histogram(&histogram)?;
    let mut w = BitWriter::new();
    for &s in &symbols {
        code.write(&mut w, s)?;
    }

    Ok(CompressedBlob {
        header: BlobHeader {
            rows,
            cols,
            levels: grid.levels(),
            s_min: grid.s_min(),
            s_max: grid.s_max(),
            nnz: sparse.nnz() as u32,
            histogram,
        },
        mask_stream: mask_stream(sparse),
        sign_stream: encode_signs(sparse.values()),
        value_stream: w.finish(),
    })
}

/// Lossless coding of retained values without quantization.
pub fn encode_raw(sparse: &SparseTensor) -> Result<CompressedBlob> {
    let (rows, cols, _) = shape_header(sparse)?;
    let mut w = BitWriter::new();
    for v in sparse.values() {
        w.write_bits(v.abs().to_bits() as u64, 31);
    }
    Ok(CompressedBlob {
        header: BlobHeader {
            rows,
            cols,
            levels: 0,
            s_min: 0.0,
            s_max: 0.0,
            nnz: sparse.nnz() as u32,
            histogram: Vec::new(),
        },
        mask_stream: mask_stream(sparse),
        sign_stream: encode_signs(sparse.values()),
        value_stream: w.finish(),
    })
}

pub fn decode(blob: &CompressedBlob) -> Result<SparseTensor> {
    let h = &blob.header;
    let rows = h.rows as usize;
    let cols = h.cols as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| CompressionError::Decode("shape overflows".into()))?;
    let nnz = h.nnz as usize;
    if nnz > len {
        return Err(CompressionError::Decode(format!("nnz {nnz} exceeds {len} entries")));
    }

    // A header-only blob stands for an all-zero tensor.
    let mask = if blob.mask_stream.is_empty() && nnz == 0 {
        vec![false; len]
    } else {
        decode_mask(&blob.mask_stream, len, nnz)?
    };

    let mut signs = BitReader::new(&blob.sign_stream);
    let negative = (0..nnz).map(|_| signs.read_bit()).collect::<Result<Vec<bool>>>()?;
    signs.expect_end()?;

    let mut reader = BitReader::new(&blob.value_stream);
    let (magnitudes, grid) = if h.levels == 0 {
        if !h.histogram.is_empty() {
            return Err(CompressionError::Decode("raw blob carries a histogram".into()));
        }
        let mags = (0..nnz)
            .map(|_| reader.read_bits(31).map(|b| f32::from_bits(b as u32)))
            .collect::<Result<Vec<f32>>>()?;
        (mags, None)
    } else {
        let grid = QuantizationGrid::new(h.levels, h.s_min, h.s_max)
            .map_err(|e| CompressionError::Decode(e.to_string()))?;
        check_histogram(&h.histogram, h.levels, nnz)?;
        let code = PrefixCode::from_histogram(&h.histogram)?;
        let mut counts: Vec<u32> = vec![0; h.levels as usize + 1];
        let mut mags = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let symbol = code.read(&mut reader)?;
            counts[symbol as usize] += 1;
            mags.push(grid.point(symbol));
        }
        if h.histogram.iter().any(|&(s, c)| counts[s as usize] != c) {
            return Err(CompressionError::Decode("symbol counts disagree with histogram".into()));
        }
        (mags, Some(grid))
    };
    reader.expect_end()?;

    let values = magnitudes
        .into_iter()
        .zip(negative)
        .map(|(m, neg)| if neg { -m } else { m })
        .collect();
    SparseTensor::with_grid(rows, cols, mask, values, grid)
        .map_err(|e| CompressionError::Decode(e.to_string()))
}

fn check_histogram(histogram: &[(u16, u32)], levels: u16, nnz: usize) -> Result<()> {
    let mut total = 0u64;
    let mut prev: Option<u16> = None;
    for &(symbol, count) in histogram {
        if symbol > levels || count == 0 || prev.is_some_and(|p| p >= symbol) {
            return Err(CompressionError::Decode(format!("malformed histogram entry ({symbol}, {count})")));
        }
        prev = Some(symbol);
        total += count as u64;
    }
    if total != nnz as u64 {
        return Err(CompressionError::Decode(format!("histogram counts {total} values, header {nnz}")));
    }
    Ok(())
}

impl CompressedBlob {
    pub fn decode_bytes(bytes: &[u8]) -> Result<SparseTensor> {
        decode(&CompressedBlob::from_bytes(bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{quantize_stochastic, topk_sparsify, ActivationTensor};
    use super::*;

    fn quantized(rows: usize, cols: usize, rho: f64, levels: u16, seed: u64) -> SparseTensor {
        let t = ActivationTensor::gaussian(rows, cols, seed);
        quantize_stochastic(&topk_sparsify(&t, rho).unwrap(), levels, seed).unwrap()
    }

    fn bits_equal(a: &SparseTensor, b: &SparseTensor) -> bool {
        a.rows() == b.rows()
            && a.cols() == b.cols()
            && a.mask() == b.mask()
            && a.grid() == b.grid()
            && a.values().iter().map(|v| v.to_bits()).eq(b.values().iter().map(|v| v.to_bits()))
    }

    #[test]
    fn quantized_round_trip_through_bytes() {
        let s = quantized(24, 16, 0.2, 8, 1);
        let blob = encode(&s).unwrap();
        let bytes = blob.to_bytes();
        assert_eq!(bytes.len(), blob.byte_len());
        assert_eq!(&bytes[..4], b"SFTC");
        let back = CompressedBlob::decode_bytes(&bytes).unwrap();
        assert!(bits_equal(&s, &back));
    }

    #[test]
    fn raw_round_trip_keeps_negative_zero() {
        let s = SparseTensor::new(1, 4, vec![true, true, false, true], vec![-0.0, 1.5, -3.25]).unwrap();
        let back = decode(&encode_raw(&s).unwrap()).unwrap();
        assert!(bits_equal(&s, &back));
    }

    #[test]
    fn all_zero_mask_has_one_run_and_no_values() {
        let s = SparseTensor::new(3, 3, vec![false; 9], vec![]).unwrap();
        let blob = encode_raw(&s).unwrap();
        assert!(!blob.mask_stream.is_empty());
        assert!(blob.value_stream.is_empty());
        assert!(bits_equal(&decode(&blob).unwrap(), &s));
    }

    #[test]
    fn header_only_blob_decodes_to_empty_tensor() {
        let blob = CompressedBlob {
            header: BlobHeader { rows: 2, cols: 5, levels: 0, s_min: 0.0, s_max: 0.0, nnz: 0, histogram: vec![] },
            mask_stream: vec![],
            sign_stream: vec![],
            value_stream: vec![],
        };
        let s = decode(&blob).unwrap();
        assert_eq!((s.rows(), s.cols(), s.nnz()), (2, 5, 0));
    }

    #[test]
    fn unquantized_input_is_rejected() {
        let s = SparseTensor::new(1, 2, vec![true, true], vec![0.3, 0.7]).unwrap();
        assert!(matches!(encode(&s), Err(CompressionError::Unquantized(_))));
        let q = quantized(4, 4, 0.5, 4, 2);
        let mut values = q.values().to_vec();
        values[0] += 1e-3;
        let tampered = SparseTensor::with_grid(4, 4, q.mask().to_vec(), values, q.grid().copied()).unwrap();
        assert!(matches!(encode(&tampered), Err(CompressionError::Unquantized(_))));
    }

    #[test]
    fn framing_errors() {
        let bytes = encode(&quantized(8, 8, 0.3, 4, 3)).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CompressedBlob::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(CompressedBlob::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(CompressedBlob::from_bytes(&bad).is_err());
        for cut in 0..bytes.len() {
            assert!(CompressedBlob::decode_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn inconsistent_header_fails_decode() {
        let mut blob = encode(&quantized(8, 8, 0.3, 4, 4)).unwrap();
        blob.header.nnz += 1;
        assert!(decode(&blob).is_err());
        let mut blob = encode(&quantized(8, 8, 0.3, 4, 4)).unwrap();
        blob.header.histogram[0].1 += 1;
        blob.header.histogram[1].1 -= 1;
        assert!(decode(&blob).is_err());
    }
}
