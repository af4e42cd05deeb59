//! Canonical prefix code built from a per-message symbol histogram.
//!
//! Only the histogram travels with the data; both sides derive identical code
//! lengths from it, then assign canonical codes in (length, symbol) order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::bits::{BitReader, BitWriter};
use super::{CompressionError, Result};

#[derive(Debug, Clone)]
pub(crate) struct PrefixCode {
    /// Symbols in canonical order.
    symbols: Vec<u16>,
    lengths: Vec<u32>,
    codes: Vec<u64>,
    /// Per-symbol index into the canonical tables, keyed by symbol value.
    lookup: Vec<Option<usize>>,
}

impl PrefixCode {
    /// `histogram` lists `(symbol, count)` with distinct symbols and nonzero counts.
    pub(crate) fn from_histogram(histogram: &[(u16, u32)]) -> Result<Self> {
        if histogram.is_empty() {
            return Ok(PrefixCode { symbols: vec![], lengths: vec![], codes: vec![], lookup: vec![] });
        }
        let lengths = code_lengths(histogram);
        let mut order: Vec<usize> = (0..histogram.len()).collect();
        order.sort_by_key(|&i| (lengths[i], histogram[i].0));

        let mut symbols = Vec::with_capacity(order.len());
        let mut sorted_lengths = Vec::with_capacity(order.len());
        let mut codes = Vec::with_capacity(order.len());
        let mut code = 0u64;
        let mut prev_len = lengths[order[0]];
        for (rank, &i) in order.iter().enumerate() {
            let len = lengths[i];
            if rank > 0 {
                code = (code + 1) << (len - prev_len);
            }
            prev_len = len;
            symbols.push(histogram[i].0);
            sorted_lengths.push(len);
            codes.push(code);
        }
        let max_symbol = *symbols.iter().max().expect("non-empty") as usize;
        let mut lookup = vec![None; max_symbol + 1];
        for (rank, &s) in symbols.iter().enumerate() {
            if lookup[s as usize].replace(rank).is_some() {
                return Err(CompressionError::Decode(format!("duplicate histogram symbol {s}")));
            }
        }
        Ok(PrefixCode { symbols, lengths: sorted_lengths, codes, lookup })
    }

    pub(crate) fn write(&self, w: &mut BitWriter, symbol: u16) -> Result<()> {
        let rank = self
            .lookup
            .get(symbol as usize)
            .copied()
            .flatten()
            .ok_or_else(|| CompressionError::Unquantized(format!("symbol {symbol} missing from histogram")))?;
        w.write_bits(self.codes[rank], self.lengths[rank]);
        Ok(())
    }

    pub(crate) fn read(&self, r: &mut BitReader<'_>) -> Result<u16> {
        if self.symbols.len() == 1 {
            return Ok(self.symbols[0]);
        }
        // Canonical codes of one length are consecutive integers starting at
        // the code of the first symbol with that length.
        let max_len = *self.lengths.last().unwrap_or(&0);
        let mut code = 0u64;
        let mut rank = 0usize;
        for len in 1..=max_len {
            code = (code << 1) | r.read_bit()? as u64;
            let first = rank;
            while rank < self.lengths.len() && self.lengths[rank] == len {
                rank += 1;
            }
            if rank > first {
                let offset = code.wrapping_sub(self.codes[first]);
                if offset < (rank - first) as u64 {
                    return Ok(self.symbols[first + offset as usize]);
                }
            }
        }
        Err(CompressionError::Decode("invalid prefix code".into()))
    }
}

// Huffman code lengths. A lone symbol gets length zero: it is implied by the
// histogram and costs no bits.
fn code_lengths(histogram: &[(u16, u32)]) -> Vec<u32> {
    let n = histogram.len();
    if n == 1 {
        return vec![0];
    }
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        histogram.iter().enumerate().map(|(i, &(_, c))| Reverse((c as u64, i))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("len > 1");
        let Reverse((wb, b)) = heap.pop().expect("len > 1");
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa + wb, next)));
        next += 1;
    }
    (0..n)
        .map(|leaf| {
            let mut depth = 0;
            let mut node = leaf;
            while parent[node] != usize::MAX {
                node = parent[node];
                depth += 1;
            }
            depth
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(histogram: &[(u16, u32)], message: &[u16]) -> usize {
        let code = PrefixCode::from_histogram(histogram).unwrap();
        let mut w = BitWriter::new();
        for &s in message {
            code.write(&mut w, s).unwrap();
        }
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        let decoded: Vec<u16> = message.iter().map(|_| code.read(&mut r).unwrap()).collect();
        assert_eq!(decoded, message);
        r.expect_end().unwrap();
        bytes.len()
    }

    #[test]
    fn skewed_histogram_round_trip() {
        let histogram = [(0, 50), (1, 25), (2, 12), (3, 6), (5, 3), (8, 1)];
        let message: Vec<u16> = histogram
            .iter()
            .flat_map(|&(s, c)| std::iter::repeat_n(s, c as usize))
            .collect();
        let bytes = round_trip(&histogram, &message);
        // Entropy is below two bits per symbol.
        assert!(bytes * 8 < 2 * message.len());
    }

    #[test]
    fn kraft_equality_holds() {
        let histogram: Vec<(u16, u32)> = (0..17).map(|s| (s, 1 + (s as u32 * 7919) % 101)).collect();
        let sum: f64 = code_lengths(&histogram).iter().map(|&l| 0.5f64.powi(l as i32)).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_symbol_costs_nothing() {
        assert_eq!(round_trip(&[(4, 9)], &[4; 9]), 0);
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        let code = PrefixCode::from_histogram(&[(1, 2), (2, 2)]).unwrap();
        assert!(code.write(&mut BitWriter::new(), 3).is_err());
    }
}
