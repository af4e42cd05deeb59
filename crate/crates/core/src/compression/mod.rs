//! Activation compression: Top-K sparsification, unbiased stochastic
//! quantization onto a uniform magnitude grid, and a lossless entropy stage
//! (Rice-coded mask runs, canonical prefix-coded levels, raw sign bits).
//!
//! The rate predictor and the accuracy surrogate used by the planner also live
//! here since both are calibrated from compression sweeps.

mod bits;
mod codec;
mod golomb;
mod huffman;
mod predictor;
mod surface;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::{decode, encode, encode_raw, BlobHeader, CompressedBlob, BLOB_MAGIC, BLOB_VERSION};
pub use predictor::{measure_rates, RatePredictor, RateSample};
pub use surface::{AccuracyObservation, AccuracySurface, SyntheticAccuracy, SURFACE_TERMS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("keep rate must lie in (0, 1], got {0}")]
    InvalidKeepRate(f64),
    #[error("empty selection: keep rate {keep_rate} retains no element of {len}")]
    EmptySelection { keep_rate: f64, len: usize },
    #[error("quantization levels must be at least 1")]
    InvalidLevels,
    #[error("quantization needs at least one nonzero retained value")]
    NoNonzero,
    #[error("unquantized input: {0}")]
    Unquantized(String),
    #[error("decode failure: {0}")]
    Decode(String),
    #[error("rate predictor: {0}")]
    Predictor(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
}

pub type Result<T> = std::result::Result<T, CompressionError>;

/// Dense cut-layer activation (or gradient) matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CompressionError::InvalidTensor(format!("empty shape {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(CompressionError::InvalidTensor(format!(
                "{} values for shape {rows}x{cols}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CompressionError::InvalidTensor(format!("non-finite value at {pos}")));
        }
        Ok(ActivationTensor { rows, cols, values })
    }

    /// Standard-normal entries from a seeded stream.
    pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        ActivationTensor { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Uniform magnitude grid `Q_e = s_min + e (s_max - s_min) / E`, `e = 0..=E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationGrid {
    levels: u16,
    s_min: f64,
    s_max: f64,
}

impl QuantizationGrid {
    pub fn new(levels: u16, s_min: f64, s_max: f64) -> Result<Self> {
        if levels == 0 {
            return Err(CompressionError::InvalidLevels);
        }
        if !(s_min.is_finite() && s_max.is_finite()) || s_min < 0.0 || s_max < s_min {
            return Err(CompressionError::InvalidTensor(format!(
                "grid bounds must satisfy 0 <= s_min <= s_max, got [{s_min}, {s_max}]"
            )));
        }
        Ok(QuantizationGrid { levels, s_min, s_max })
    }

    pub fn levels(&self) -> u16 {
        self.levels
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn spacing(&self) -> f64 {
        (self.s_max - self.s_min) / self.levels as f64
    }

    /// Grid point `e` as stored on the wire. The endpoints are pinned to the
    /// bounds so no rounding can move them.
    pub fn point(&self, e: u16) -> f32 {
        if e == 0 {
            self.s_min as f32
        } else if e >= self.levels {
            self.s_max as f32
        } else {
            (self.s_min + e as f64 * self.spacing()) as f32
        }
    }

    pub fn points(&self) -> Vec<f32> {
        (0..=self.levels).map(|e| self.point(e)).collect()
    }

    /// Smallest level whose point equals `magnitude` exactly.
    pub fn level_of(&self, magnitude: f32) -> Option<u16> {
        let spacing = self.spacing();
        let guess = if spacing > 0.0 {
            ((magnitude as f64 - self.s_min) / spacing).round().clamp(0.0, self.levels as f64) as i64
        } else {
            0
        };
        let lo = (guess - 1).max(0);
        let hi = (guess + 1).min(self.levels as i64);
        (lo..=hi).map(|e| e as u16).find(|&e| self.point(e) == magnitude)
    }
}

/// Top-K selection result: mask plus retained values in flat (row-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    values: Vec<f32>,
    grid: Option<QuantizationGrid>,
}

impl SparseTensor {
    pub fn new(rows: usize, cols: usize, mask: Vec<bool>, values: Vec<f32>) -> Result<Self> {
        Self::with_grid(rows, cols, mask, values, None)
    }

    pub(crate) fn with_grid(
        rows: usize,
        cols: usize,
        mask: Vec<bool>,
        values: Vec<f32>,
        grid: Option<QuantizationGrid>,
    ) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(CompressionError::InvalidTensor(format!(
                "mask of {} entries for shape {rows}x{cols}",
                mask.len()
            )));
        }
        let kept = mask.iter().filter(|&&m| m).count();
        if kept != values.len() {
            return Err(CompressionError::InvalidTensor(format!(
                "{kept} mask entries but {} values",
                values.len()
            )));
        }
        Ok(SparseTensor { rows, cols, mask, values, grid })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Grid the values were quantized onto, if any.
    pub fn grid(&self) -> Option<&QuantizationGrid> {
        self.grid.as_ref()
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.mask.len()];
        let mut kept = self.values.iter();
        for (slot, &m) in out.iter_mut().zip(&self.mask) {
            if m {
                *slot = *kept.next().expect("mask/value counts checked at construction");
            }
        }
        out
    }

    pub fn to_tensor(&self) -> ActivationTensor {
        ActivationTensor { rows: self.rows, cols: self.cols, values: self.to_dense() }
    }
}

/// Tunable compression knobs. `levels = None` skips quantization and sends
/// retained values as raw 32-bit floats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub keep_rate: f64,
    pub levels: Option<u16>,
}

impl CompressionConfig {
    pub fn new(keep_rate: f64, levels: u16) -> Self {
        CompressionConfig { keep_rate, levels: Some(levels) }
    }

    /// Identity pipeline: every value kept, no quantization.
    pub fn passthrough() -> Self {
        CompressionConfig { keep_rate: 1.0, levels: None }
    }
}

/// Keeps the `round(keep_rate * len)` largest-magnitude entries. Ties go to
/// the smaller flat index.
pub fn topk_sparsify(tensor: &ActivationTensor, keep_rate: f64) -> Result<SparseTensor> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(CompressionError::InvalidKeepRate(keep_rate));
    }
    let n = tensor.len();
    let k = (keep_rate * n as f64).round() as usize;
    if k == 0 {
        return Err(CompressionError::EmptySelection { keep_rate, len: n });
    }
    let values = tensor.values();
    let mask = if k >= n {
        vec![true; n]
    } else {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            values[b as usize]
                .abs()
                .total_cmp(&values[a as usize].abs())
                .then(a.cmp(&b))
        });
        let mut mask = vec![false; n];
        for &idx in &order[..k] {
            mask[idx as usize] = true;
        }
        mask
    };
    let kept = values.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    SparseTensor::with_grid(tensor.rows, tensor.cols, mask, kept, None)
}

/// Stochastic rounding of every nonzero retained magnitude onto the grid
/// spanned by the smallest and largest nonzero magnitudes. Signs are kept.
/// Retained exact zeros carry no information and are dropped from the mask.
pub fn quantize_stochastic(sparse: &SparseTensor, levels: u16, seed: u64) -> Result<SparseTensor> {
    if levels == 0 {
        return Err(CompressionError::InvalidLevels);
    }
    let (s_min, s_max) = sparse
        .values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| v.abs())
        .fold(None, |acc: Option<(f32, f32)>, m| match acc {
            None => Some((m, m)),
            Some((lo, hi)) => Some((lo.min(m), hi.max(m))),
        })
        .ok_or(CompressionError::NoNonzero)?;
    let grid = QuantizationGrid::new(levels, s_min as f64, s_max as f64)?;
    let points = grid.points();
    let spacing = grid.spacing();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut mask = sparse.mask.clone();
    let mut values = Vec::with_capacity(sparse.values.len());
    let mut kept = sparse.values.iter();
    for slot in mask.iter_mut().filter(|m| **m) {
        let v = *kept.next().expect("mask/value counts checked at construction");
        if v == 0.0 {
            *slot = false;
            continue;
        }
        let magnitude = v.abs();
        let q = stochastic_round(magnitude, &points, s_min as f64, spacing, &mut rng);
        values.push(q.copysign(v));
    }
    SparseTensor::with_grid(sparse.rows, sparse.cols, mask, values, Some(grid))
}

fn stochastic_round(magnitude: f32, points: &[f32], s_min: f64, spacing: f64, rng: &mut impl Rng) -> f32 {
    let top = points.len() - 2;
    let m = magnitude as f64;
    let mut e = if spacing > 0.0 {
        (((m - s_min) / spacing).floor().max(0.0) as usize).min(top)
    } else {
        0
    };
    while e > 0 && points[e] > magnitude {
        e -= 1;
    }
    while e < top && points[e + 1] < magnitude {
        e += 1;
    }
    let (lo, hi) = (points[e], points[e + 1]);
    if hi <= lo {
        return lo;
    }
    // Probabilities use the stored f32 points so the rounding is unbiased
    // with respect to what is actually transmitted.
    let p_low = (hi as f64 - m) / (hi as f64 - lo as f64);
    if rng.random::<f64>() < p_low {
        lo
    } else {
        hi
    }
}

/// Full pipeline for one tensor.
pub fn compress(tensor: &ActivationTensor, config: &CompressionConfig, seed: u64) -> Result<CompressedBlob> {
    let sparse = topk_sparsify(tensor, config.keep_rate)?;
    match config.levels {
        Some(levels) => match quantize_stochastic(&sparse, levels, seed) {
            Ok(quantized) => encode(&quantized),
            // Nothing nonzero survived selection; an all-zero tensor needs no grid.
            Err(CompressionError::NoNonzero) => encode_raw(&SparseTensor::new(
                sparse.rows,
                sparse.cols,
                vec![false; sparse.len()],
                Vec::new(),
            )?),
            Err(e) => Err(e),
        },
        None => encode_raw(&sparse),
    }
}

/// Reconstructs the dense tensor a receiver sees.
pub fn decompress(blob: &CompressedBlob) -> Result<ActivationTensor> {
    Ok(decode(blob)?.to_tensor())
}

/// Transmitted bits over the uncompressed payload bits.
pub fn compression_ratio(blob: &CompressedBlob, original: &ActivationTensor, bytes_per_param: u64) -> f64 {
    blob.bit_len() as f64 / (original.len() as f64 * 8.0 * bytes_per_param as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize, values: &[f32]) -> ActivationTensor {
        ActivationTensor::new(rows, cols, values.to_vec()).unwrap()
    }

    #[test]
    fn topk_keeps_largest_magnitudes() {
        let t = tensor(2, 2, &[1.0, -4.0, 3.0, 2.0]);
        let s = topk_sparsify(&t, 0.5).unwrap();
        assert_eq!(s.mask(), &[false, true, true, false]);
        assert_eq!(s.values(), &[-4.0, 3.0]);
        assert_eq!(s.to_dense(), vec![0.0, -4.0, 3.0, 0.0]);
    }

    #[test]
    fn topk_full_rate_is_identity() {
        let t = ActivationTensor::gaussian(7, 5, 3);
        let s = topk_sparsify(&t, 1.0).unwrap();
        assert_eq!(s.to_dense(), t.values());
    }

    #[test]
    fn topk_ties_prefer_smaller_index() {
        let t = tensor(1, 4, &[2.0, -2.0, 2.0, 1.0]);
        let s = topk_sparsify(&t, 0.5).unwrap();
        assert_eq!(s.mask(), &[true, true, false, false]);
    }

    #[test]
    fn topk_rejects_empty_selection_and_bad_rates() {
        let t = ActivationTensor::gaussian(3, 3, 1);
        assert!(matches!(topk_sparsify(&t, 0.01), Err(CompressionError::EmptySelection { .. })));
        assert!(matches!(topk_sparsify(&t, 0.0), Err(CompressionError::InvalidKeepRate(_))));
        assert!(matches!(topk_sparsify(&t, 1.5), Err(CompressionError::InvalidKeepRate(_))));
    }

    #[test]
    fn topk_against_sort_oracle() {
        let t = ActivationTensor::gaussian(10, 10, 42);
        let s = topk_sparsify(&t, 0.3).unwrap();
        assert_eq!(s.nnz(), 30);
        let dense = s.to_dense();
        let kept_min = s.values().iter().map(|v| v.abs()).fold(f32::INFINITY, f32::min);
        let dropped_max = t
            .values()
            .iter()
            .zip(s.mask())
            .filter(|(_, &m)| !m)
            .map(|(v, _)| v.abs())
            .fold(0.0, f32::max);
        assert!(kept_min >= dropped_max);
        let mut mags: Vec<f32> = t.values().iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        let best: f32 = mags[..30].iter().sum();
        let got: f32 = dense.iter().map(|v| v.abs()).sum();
        assert!((best - got).abs() < 1e-4);
    }

    #[test]
    fn tensor_validation() {
        assert!(ActivationTensor::new(0, 3, vec![]).is_err());
        assert!(ActivationTensor::new(1, 2, vec![1.0]).is_err());
        assert!(ActivationTensor::new(1, 1, vec![f32::NAN]).is_err());
        assert!(SparseTensor::new(1, 2, vec![true, false], vec![]).is_err());
    }

    #[test]
    fn grid_points_and_lookup() {
        let g = QuantizationGrid::new(4, 1.0, 3.0).unwrap();
        assert_eq!(g.points(), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(g.spacing(), 0.5);
        assert_eq!(g.level_of(2.5), Some(3));
        assert_eq!(g.level_of(2.4), None);
        let flat = QuantizationGrid::new(3, 2.0, 2.0).unwrap();
        assert_eq!(flat.level_of(2.0), Some(0));
        assert!(QuantizationGrid::new(0, 0.0, 1.0).is_err());
        assert!(QuantizationGrid::new(2, 1.0, 0.5).is_err());
    }

    #[test]
    fn quantized_values_lie_on_grid_with_sign() {
        let t = ActivationTensor::gaussian(20, 20, 9);
        let s = topk_sparsify(&t, 0.4).unwrap();
        let q = quantize_stochastic(&s, 8, 1).unwrap();
        let grid = *q.grid().unwrap();
        assert_eq!(grid.s_min() as f32, s.values().iter().map(|v| v.abs()).fold(f32::MAX, f32::min));
        for (orig, quant) in s.values().iter().zip(q.values()) {
            assert_eq!(orig.is_sign_negative(), quant.is_sign_negative());
            let level = grid.level_of(quant.abs()).expect("on grid");
            let lo = grid.point(level.saturating_sub(1));
            let hi = grid.point((level + 1).min(8));
            assert!(orig.abs() >= lo && orig.abs() <= hi);
        }
        assert_eq!(quantize_stochastic(&s, 8, 1).unwrap(), q);
    }

    #[test]
    fn grid_points_are_fixed_points_of_quantization() {
        let s = SparseTensor::new(1, 3, vec![true; 3], vec![1.0, -2.0, 3.0]).unwrap();
        for seed in 0..20 {
            let q = quantize_stochastic(&s, 2, seed).unwrap();
            assert_eq!(q.values(), &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn degenerate_grid_maps_to_single_magnitude() {
        let s = SparseTensor::new(1, 3, vec![true; 3], vec![0.5, -0.5, 0.5]).unwrap();
        let q = quantize_stochastic(&s, 4, 0).unwrap();
        assert_eq!(q.values(), &[0.5, -0.5, 0.5]);
    }

    #[test]
    fn midpoint_rounds_each_way_half_the_time() {
        let s = SparseTensor::new(1, 3, vec![true; 3], vec![1.0, 1.5, 2.0]).unwrap();
        let draws = 20_000;
        let mut high = 0usize;
        for seed in 0..draws {
            let q = quantize_stochastic(&s, 1, seed).unwrap();
            if q.values()[1] == 2.0 {
                high += 1;
            }
        }
        let sd = (draws as f64 * 0.25).sqrt();
        assert!((high as f64 - draws as f64 / 2.0).abs() < 3.0 * sd, "{high}");
    }

    #[test]
    fn quantize_requires_nonzero_input() {
        let s = SparseTensor::new(1, 2, vec![true, false], vec![0.0]).unwrap();
        assert_eq!(quantize_stochastic(&s, 4, 0), Err(CompressionError::NoNonzero));
        let s = SparseTensor::new(1, 2, vec![true, true], vec![0.0, 1.0]).unwrap();
        let q = quantize_stochastic(&s, 4, 0).unwrap();
        assert_eq!(q.mask(), &[false, true]);
        assert!(quantize_stochastic(&s, 0, 0).is_err());
    }

    #[test]
    fn passthrough_pipeline_is_lossless() {
        let t = ActivationTensor::gaussian(16, 12, 5);
        let blob = compress(&t, &CompressionConfig::passthrough(), 0).unwrap();
        assert_eq!(decompress(&blob).unwrap(), t);
        let beta = compression_ratio(&blob, &t, 4);
        assert!(beta > 1.0 && beta < 1.1, "{beta}");
    }

    #[test]
    fn reconstruction_error_shrinks_with_more_levels() {
        let t = ActivationTensor::gaussian(40, 40, 11);
        let err = |levels| {
            let blob = compress(&t, &CompressionConfig::new(0.5, levels), 3).unwrap();
            let r = decompress(&blob).unwrap();
            r.values().iter().zip(t.values()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
        };
        assert!(err(32) < err(4));
        assert!(err(4) < err(1));
    }
}
