//! Cubic accuracy surrogate `A(rho, E) = sum c_ij rho^i E^j`, `i + j <= 3`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CompressionError, Result};

/// Exponents `(i, j)` of `rho^i E^j`, in coefficient order.
pub const SURFACE_TERMS: [(i32, i32); 10] =
    [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];

// Singular values below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyObservation {
    pub keep_rate: f64,
    pub levels: u16,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySurface {
    coefficients: [f64; 10],
    /// Mean squared residual on the fitted observations, in squared percentage points.
    fit_mse: f64,
}

fn monomials(rho: f64, levels: f64) -> [f64; 10] {
    SURFACE_TERMS.map(|(i, j)| rho.powi(i) * levels.powi(j))
}

impl AccuracySurface {
    pub fn from_coefficients(coefficients: [f64; 10]) -> Self {
        AccuracySurface { coefficients, fit_mse: 0.0 }
    }

    /// Least-squares fit via SVD of the column-scaled design matrix.
    pub fn fit(observations: &[AccuracyObservation]) -> Result<Self> {
        let n = observations.len();
        if n < SURFACE_TERMS.len() {
            return Err(CompressionError::DegenerateDesign(format!(
                "{n} observations for {} coefficients",
                SURFACE_TERMS.len()
            )));
        }
        if let Some(o) = observations
            .iter()
            .find(|o| !(o.keep_rate.is_finite() && o.accuracy.is_finite()))
        {
            return Err(CompressionError::DegenerateDesign(format!("non-finite observation {o:?}")));
        }
        let mut design = DMatrix::from_fn(n, SURFACE_TERMS.len(), |r, c| {
            let o = &observations[r];
            monomials(o.keep_rate, o.levels as f64)[c]
        });
        let scales: Vec<f64> = (0..design.ncols())
            .map(|c| {
                let norm = design.column(c).norm();
                if norm > 0.0 {
                    norm
                } else {
                    1.0
                }
            })
            .collect();
        for (c, s) in scales.iter().enumerate() {
            design.column_mut(c).unscale_mut(*s);
        }
        let target = DVector::from_iterator(n, observations.iter().map(|o| o.accuracy));

        let svd = design.clone().svd(true, true);
        let largest = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > RANK_TOLERANCE * largest).count();
        if rank < SURFACE_TERMS.len() {
            return Err(CompressionError::DegenerateDesign(format!(
                "design matrix has rank {rank} < {}",
                SURFACE_TERMS.len()
            )));
        }
        let scaled = svd
            .solve(&target, RANK_TOLERANCE * largest)
            .map_err(|e| CompressionError::DegenerateDesign(e.to_string()))?;

        let mut coefficients = [0.0; 10];
        for (c, s) in scales.iter().enumerate() {
            coefficients[c] = scaled[c] / s;
        }
        let mut surface = AccuracySurface { coefficients, fit_mse: 0.0 };
        surface.fit_mse = observations
            .iter()
            .map(|o| (surface.predict(o.keep_rate, o.levels as f64) - o.accuracy).powi(2))
            .sum::<f64>()
            / n as f64;
        Ok(surface)
    }

    pub fn coefficients(&self) -> &[f64; 10] {
        &self.coefficients
    }

    pub fn fit_mse(&self) -> f64 {
        self.fit_mse
    }

    pub fn predict(&self, keep_rate: f64, levels: f64) -> f64 {
        monomials(keep_rate, levels).iter().zip(&self.coefficients).map(|(m, c)| m * c).sum()
    }

    /// Partial derivative in `keep_rate`.
    pub fn d_rho(&self, keep_rate: f64, levels: f64) -> f64 {
        SURFACE_TERMS
            .iter()
            .zip(&self.coefficients)
            .filter(|((i, _), _)| *i > 0)
            .map(|(&(i, j), c)| c * i as f64 * keep_rate.powi(i - 1) * levels.powi(j))
            .sum()
    }
}

/// Test-data generator with a flat plateau at high keep rates and a sharp
/// drop as the keep rate approaches `knee`. Coarser quantization costs a
/// fixed penalty scaled by `2 / E`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAccuracy {
    pub plateau: f64,
    pub drop: f64,
    pub knee: f64,
    pub width: f64,
    pub level_penalty: f64,
    pub noise_sd: f64,
}

impl Default for SyntheticAccuracy {
    fn default() -> Self {
        SyntheticAccuracy { plateau: 88.0, drop: 6.0, knee: 0.05, width: 0.08, level_penalty: 3.0, noise_sd: 0.0 }
    }
}

impl SyntheticAccuracy {
    pub fn mean(&self, keep_rate: f64, levels: f64) -> f64 {
        self.plateau
            - self.drop * (-(keep_rate - self.knee) / self.width).exp()
            - self.level_penalty * 2.0 / levels
    }

    pub fn observations(&self, keep_rates: &[f64], levels: &[u16], seed: u64) -> Vec<AccuracyObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise_sd.max(0.0)).expect("finite sd");
        let mut out = Vec::with_capacity(keep_rates.len() * levels.len());
        for &keep_rate in keep_rates {
            for &e in levels {
                let eps = if self.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                out.push(AccuracyObservation { keep_rate, levels: e, accuracy: self.mean(keep_rate, e as f64) + eps });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> (Vec<f64>, Vec<u16>) {
        ((1..=20).map(|i| i as f64 * 0.05).collect(), vec![2, 4, 8, 16, 32])
    }

    fn cubic_observations(coefficients: [f64; 10]) -> Vec<AccuracyObservation> {
        let truth = AccuracySurface::from_coefficients(coefficients);
        let (rhos, levels) = grid();
        rhos.iter()
            .flat_map(|&r| levels.iter().map(move |&e| (r, e)))
            .map(|(r, e)| AccuracyObservation { keep_rate: r, levels: e, accuracy: truth.predict(r, e as f64) })
            .collect()
    }

    #[test]
    fn recovers_known_cubic() {
        let truth = [70.0, 25.0, 0.4, -18.0, 0.05, -0.01, 4.0, -0.3, 0.02, 1e-4];
        let fit = AccuracySurface::fit(&cubic_observations(truth)).unwrap();
        for (got, want) in fit.coefficients().iter().zip(truth) {
            assert!((got - want).abs() <= 1e-9 * want.abs(), "{got} vs {want}");
        }
        assert!(fit.fit_mse() < 1e-18);
    }

    #[test]
    fn constant_data_gives_constant_surface() {
        let mut c = [0.0; 10];
        c[0] = 81.5;
        let fit = AccuracySurface::fit(&cubic_observations(c)).unwrap();
        assert!((fit.coefficients()[0] - 81.5).abs() < 1e-9);
        assert!(fit.coefficients()[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let s = AccuracySurface::from_coefficients([1.0, 2.0, 3.0, -4.0, 0.5, 0.1, 2.5, -0.2, 0.03, 0.001]);
        let h = 1e-6;
        for (r, e) in [(0.1, 2.0), (0.5, 8.0), (0.9, 32.0)] {
            let fd = (s.predict(r + h, e) - s.predict(r - h, e)) / (2.0 * h);
            assert!((fd - s.d_rho(r, e)).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_designs_are_rejected() {
        let few: Vec<_> = (0..9)
            .map(|i| AccuracyObservation { keep_rate: 0.1 * i as f64, levels: 2 + i, accuracy: 80.0 })
            .collect();
        assert!(matches!(AccuracySurface::fit(&few), Err(CompressionError::DegenerateDesign(_))));
        let one_level: Vec<_> = (1..=20)
            .map(|i| AccuracyObservation { keep_rate: 0.05 * i as f64, levels: 8, accuracy: 80.0 })
            .collect();
        assert!(matches!(AccuracySurface::fit(&one_level), Err(CompressionError::DegenerateDesign(_))));
    }

    #[test]
    fn synthetic_shape_fits_within_tolerance() {
        let (rhos, levels) = grid();
        let obs = SyntheticAccuracy::default().observations(&rhos, &levels, 0);
        let fit = AccuracySurface::fit(&obs).unwrap();
        assert!(fit.fit_mse() <= 0.26, "{}", fit.fit_mse());
        let gen = SyntheticAccuracy::default();
        assert!(gen.mean(0.05, 32.0) < gen.mean(0.5, 32.0) - 5.0);
        assert!((gen.mean(0.9, 32.0) - gen.mean(1.0, 32.0)).abs() < 0.01);
    }
}
