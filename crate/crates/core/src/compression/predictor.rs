//! Piecewise-bilinear map from `(keep_rate, levels)` to the measured
//! compression rate, built from an offline sweep.

use serde::{Deserialize, Serialize};

use super::{compress, compression_ratio, ActivationTensor, CompressionConfig, CompressionError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSample {
    pub keep_rate: f64,
    pub levels: u16,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePredictor {
    keep_rates: Vec<f64>,
    levels: Vec<f64>,
    // Row-major over (keep_rate, levels).
    table: Vec<f64>,
}

impl RatePredictor {
    /// Requires a complete rectilinear grid with at least two nodes per axis.
    pub fn calibrate(samples: &[RateSample]) -> Result<Self> {
        let mut keep_rates: Vec<f64> = samples.iter().map(|s| s.keep_rate).collect();
        let mut levels: Vec<f64> = samples.iter().map(|s| s.levels as f64).collect();
        for axis in [&mut keep_rates, &mut levels] {
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }
        if keep_rates.len() < 2 || levels.len() < 2 {
            return Err(CompressionError::Predictor(format!(
                "need at least two grid points per axis, got {}x{}",
                keep_rates.len(),
                levels.len()
            )));
        }
        if samples.iter().any(|s| !s.beta.is_finite()) {
            return Err(CompressionError::Predictor("non-finite rate sample".into()));
        }
        let mut table = vec![f64::NAN; keep_rates.len() * levels.len()];
        for s in samples {
            let i = keep_rates.iter().position(|&r| r == s.keep_rate).expect("axis built from samples");
            let j = levels.iter().position(|&e| e == s.levels as f64).expect("axis built from samples");
            let slot = &mut table[i * levels.len() + j];
            if !slot.is_nan() && *slot != s.beta {
                return Err(CompressionError::Predictor(format!(
                    "conflicting samples at rho={}, E={}: {} vs {}",
                    s.keep_rate, s.levels, slot, s.beta
                )));
            }
            *slot = s.beta;
        }
        if let Some(missing) = table.iter().position(|v| v.is_nan()) {
            return Err(CompressionError::Predictor(format!(
                "grid node rho={}, E={} has no sample",
                keep_rates[missing / levels.len()],
                levels[missing % levels.len()]
            )));
        }
        Ok(RatePredictor { keep_rates, levels, table })
    }

    pub fn keep_rates(&self) -> &[f64] {
        &self.keep_rates
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn samples(&self) -> Vec<RateSample> {
        let mut out = Vec::with_capacity(self.table.len());
        for (i, &keep_rate) in self.keep_rates.iter().enumerate() {
            for (j, &levels) in self.levels.iter().enumerate() {
                out.push(RateSample { keep_rate, levels: levels as u16, beta: self.table[i * self.levels.len() + j] });
            }
        }
        out
    }

    /// Bilinear interpolation; queries outside the grid are clamped to it.
    pub fn predict(&self, keep_rate: f64, levels: f64) -> f64 {
        let (i, tx) = bracket(&self.keep_rates, keep_rate);
        let (j, ty) = bracket(&self.levels, levels);
        let w = self.levels.len();
        let at = |a: usize, b: usize| self.table[a * w + b];
        let low = at(i, j) * (1.0 - ty) + at(i, j + 1) * ty;
        let high = at(i + 1, j) * (1.0 - ty) + at(i + 1, j + 1) * ty;
        low * (1.0 - tx) + high * tx
    }
}

// Cell index and fractional position of `x` along a sorted axis.
fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let last = axis.len() - 1;
    if x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[last] {
        return (last - 1, 1.0);
    }
    let hi = axis.partition_point(|&a| a <= x).min(last);
    let lo = hi - 1;
    (lo, (x - axis[lo]) / (axis[hi] - axis[lo]))
}

/// Measures the rate of every grid configuration on one tensor.
pub fn measure_rates(
    tensor: &ActivationTensor,
    keep_rates: &[f64],
    levels: &[u16],
    bytes_per_param: u64,
    seed: u64,
) -> Result<Vec<RateSample>> {
    let mut out = Vec::with_capacity(keep_rates.len() * levels.len());
    for &keep_rate in keep_rates {
        for &e in levels {
            let blob = compress(tensor, &CompressionConfig::new(keep_rate, e), seed)?;
            out.push(RateSample { keep_rate, levels: e, beta: compression_ratio(&blob, tensor, bytes_per_param) });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(keep_rate: f64, levels: u16, beta: f64) -> RateSample {
        RateSample { keep_rate, levels, beta }
    }

    fn unit_cell() -> RatePredictor {
        RatePredictor::calibrate(&[
            sample(0.1, 2, 0.01),
            sample(0.1, 4, 0.02),
            sample(0.5, 2, 0.05),
            sample(0.5, 4, 0.08),
        ])
        .unwrap()
    }

    #[test]
    fn corners_and_midpoint() {
        let p = unit_cell();
        assert_eq!(p.predict(0.1, 2.0), 0.01);
        assert_eq!(p.predict(0.5, 4.0), 0.08);
        assert!((p.predict(0.3, 3.0) - (0.01 + 0.02 + 0.05 + 0.08) / 4.0).abs() < 1e-15);
        assert_eq!(p.predict(0.0, 1.0), 0.01);
        assert_eq!(p.predict(1.0, 9.0), 0.08);
    }

    #[test]
    fn exact_on_bilinear_data() {
        let f = |r: f64, e: f64| 0.3 * r + 0.01 * e + 0.02 * r * e + 0.001;
        let mut samples = Vec::new();
        for r in [0.1, 0.2, 0.4, 0.8] {
            for e in [2u16, 4, 8] {
                samples.push(sample(r, e, f(r, e as f64)));
            }
        }
        let p = RatePredictor::calibrate(&samples).unwrap();
        for (r, e) in [(0.15, 3.0), (0.5, 7.5), (0.79, 2.1)] {
            assert!((p.predict(r, e) - f(r, e)).abs() < 1e-12);
        }
        assert_eq!(p.samples().len(), 12);
    }

    #[test]
    fn grid_errors() {
        assert!(RatePredictor::calibrate(&[sample(0.1, 2, 0.1), sample(0.2, 2, 0.2)]).is_err());
        let mut samples = unit_cell().samples();
        samples.push(sample(0.1, 2, 0.5));
        assert!(RatePredictor::calibrate(&samples).is_err());
        let mut samples = unit_cell().samples();
        samples.push(sample(0.1, 2, 0.01));
        assert!(RatePredictor::calibrate(&samples).is_ok());
        let mut samples = unit_cell().samples();
        samples.pop();
        assert!(RatePredictor::calibrate(&samples).is_err());
    }
}
