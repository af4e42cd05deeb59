//! Scenario files: strict TOML schema, validation and context building.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sft_core::compression::{
    measure_rates, AccuracySurface, ActivationTensor, RatePredictor, RateSample, SyntheticAccuracy,
};
use sft_core::model_profile::{ModelProfile, SplitConfig};
use sft_core::planner::{ConfigBounds, PlannerSettings, PlanningContext, SearchGrid};
use sft_core::simulator::SimulationSettings;
use sft_core::stream_seed;
use sft_core::wireless::{DeviceProfile, ServerProfile};

const TAG_RATE_SWEEP: u64 = 101;
const TAG_SURFACE: u64 = 102;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("calibration data: {0}")]
    Calibration(String),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), reason: reason.into() }
}

/// Batch, epochs and rounds, plus the range of admissible cut layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Training {
    pub batch_size: u64,
    pub local_epochs: u64,
    pub rounds: u64,
    pub cut_layer_min: u64,
    pub cut_layer_max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionBounds {
    pub keep_rate_min: f64,
    pub keep_rate_max: f64,
    pub keep_rate_step: f64,
    /// Candidate quantization interval counts, ascending.
    pub levels: Vec<u16>,
}

/// How the accuracy floor is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    Absolute { percent: f64 },
    /// Best surface value on the search grid minus a margin.
    BelowBest { margin_pp: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceSource {
    /// Fit to noise-free samples of a plateau-and-knee curve on the search grid.
    Synthetic { plateau: f64, drop: f64, knee: f64, width: f64, level_penalty: f64, noise_sd: f64 },
    Coefficients { coefficients: [f64; 10] },
    /// JSON written by `calibrate`, relative to the scenario file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracySpec {
    pub threshold: ThresholdPolicy,
    pub surface: SurfaceSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateSource {
    /// Compress a Gaussian `sample_rows x embed_dim` tensor at every node.
    Measured { sample_rows: usize, keep_rates: Vec<f64>, levels: Vec<u16> },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSettings {
    /// Cut layer of the reference row in the memory table.
    pub reference_cut_layer: u64,
    /// Server bandwidths for the delay sweep; values above the combined
    /// device cap are skipped.
    pub bandwidth_sweep_hz: Vec<f64>,
    pub random_trials: usize,
    /// Fixed compression point of the reference overhead row.
    pub reference_keep_rate: f64,
    pub reference_levels: u16,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            reference_cut_layer: 5,
            bandwidth_sweep_hz: vec![10e6, 20e6, 30e6, 40e6, 60e6, 80e6],
            random_trials: 20,
            reference_keep_rate: 0.2,
            reference_levels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub memory_cap_bytes: u64,
    pub model: ModelProfile,
    pub training: Training,
    pub compression: CompressionBounds,
    pub accuracy: AccuracySpec,
    pub rates: RateSource,
    pub server: ServerProfile,
    pub devices: Vec<DeviceProfile>,
    #[serde(default)]
    pub planner: PlannerSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub report: ReportSettings,
}

/// Predictor file contents: the calibration samples themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorFile {
    pub samples: Vec<RateSample>,
}

/// A validated scenario turned into planner inputs.
#[derive(Debug, Clone)]
pub struct Built {
    pub context: PlanningContext,
    pub grid: SearchGrid,
    pub rate_samples: Vec<RateSample>,
}

impl Scenario {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Scenario::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario fields are TOML-representable")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        let t = &self.training;
        let l = self.model.num_layers;
        if t.cut_layer_min == 0 || t.cut_layer_min > t.cut_layer_max || t.cut_layer_max >= l {
            return Err(invalid(
                "training.cut_layer_min",
                format!("need 1 <= cut_layer_min <= cut_layer_max < {l}, got {}..={}", t.cut_layer_min, t.cut_layer_max),
            ));
        }
        self.split().validate(&self.model).map_err(|e| invalid("training", e.to_string()))?;

        let c = &self.compression;
        if !(c.keep_rate_min > 0.0 && c.keep_rate_min <= c.keep_rate_max && c.keep_rate_max <= 1.0) {
            return Err(invalid("compression.keep_rate_min", "need 0 < keep_rate_min <= keep_rate_max <= 1"));
        }
        if !(c.keep_rate_step > 0.0 && c.keep_rate_step.is_finite()) {
            return Err(invalid("compression.keep_rate_step", "must be positive"));
        }
        check_levels("compression.levels", &c.levels)?;

        match &self.accuracy.threshold {
            ThresholdPolicy::Absolute { percent } if !percent.is_finite() => {
                return Err(invalid("accuracy.threshold.percent", "must be finite"));
            }
            ThresholdPolicy::BelowBest { margin_pp } if !(margin_pp.is_finite() && *margin_pp >= 0.0) => {
                return Err(invalid("accuracy.threshold.margin_pp", "must be a non-negative number"));
            }
            _ => {}
        }
        if let RateSource::Measured { sample_rows, keep_rates, levels } = &self.rates {
            if *sample_rows == 0 {
                return Err(invalid("rates.sample_rows", "must be at least 1"));
            }
            if keep_rates.len() < 2 || keep_rates.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
                return Err(invalid("rates.keep_rates", "need at least two values in (0, 1]"));
            }
            check_levels("rates.levels", levels)?;
            if levels.len() < 2 {
                return Err(invalid("rates.levels", "need at least two values"));
            }
        }

        if self.memory_cap_bytes == 0 {
            return Err(invalid("memory_cap_bytes", "must be positive"));
        }
        if self.devices.is_empty() {
            return Err(invalid("devices", "at least one device is required"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            d.validate().map_err(|e| invalid(format!("devices[{i}]"), e.to_string()))?;
            if self.devices[..i].iter().any(|o| o.id == d.id) {
                return Err(invalid(format!("devices[{i}].id"), format!("duplicate id {}", d.id)));
            }
        }
        self.server.validate().map_err(|e| invalid("server", e.to_string()))?;
        let capacity: f64 = self.devices.iter().map(|d| d.max_bandwidth_hz).sum();
        if self.server.total_bandwidth_hz > capacity * (1.0 + 1e-12) {
            return Err(invalid(
                "server.total_bandwidth_hz",
                format!("{} Hz exceeds the devices' combined cap of {capacity} Hz", self.server.total_bandwidth_hz),
            ));
        }
        self.planner.validate().map_err(|e| invalid("planner", e.to_string()))?;
        let r = &self.report;
        if r.reference_cut_layer == 0 || r.reference_cut_layer > l {
            return Err(invalid("report.reference_cut_layer", format!("must be in 1..={l}")));
        }
        if !(r.reference_keep_rate > 0.0 && r.reference_keep_rate <= 1.0) || r.reference_levels == 0 {
            return Err(invalid("report.reference_keep_rate", "need a keep rate in (0, 1] and positive levels"));
        }
        if r.bandwidth_sweep_hz.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(invalid("report.bandwidth_sweep_hz", "bandwidths must be positive"));
        }
        let s = &self.simulation;
        if !(s.lr_device.is_finite() && s.lr_server.is_finite() && s.init_sd.is_finite() && s.init_sd >= 0.0) {
            return Err(invalid("simulation", "learning rates and init_sd must be finite"));
        }
        if s.task_rows == 0 || s.sample_rows == Some(0) {
            return Err(invalid("simulation.task_rows", "row counts must be positive"));
        }
        Ok(())
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            cut_layer: self.training.cut_layer_min,
            batch_size: self.training.batch_size,
            local_epochs: self.training.local_epochs,
            rounds: self.training.rounds,
        }
    }

    pub fn bounds(&self) -> ConfigBounds {
        let levels = &self.compression.levels;
        ConfigBounds {
            keep_rate_min: self.compression.keep_rate_min,
            keep_rate_max: self.compression.keep_rate_max,
            levels_min: levels[0],
            levels_max: *levels.last().expect("validated non-empty"),
        }
    }

    pub fn grid(&self) -> SearchGrid {
        SearchGrid::regular(
            &self.bounds(),
            self.compression.keep_rate_step,
            self.compression.levels.clone(),
            (self.training.cut_layer_min..=self.training.cut_layer_max).collect(),
        )
    }

    /// Applies `--rounds` and `--devices`. Keeping the first `n` devices
    /// clamps the server bandwidth to their combined cap.
    pub fn apply_overrides(&mut self, rounds: Option<u64>, devices: Option<usize>) -> Result<(), ScenarioError> {
        if let Some(r) = rounds {
            self.training.rounds = r;
        }
        if let Some(n) = devices {
            if n == 0 || n > self.devices.len() {
                return Err(invalid("--devices", format!("must be in 1..={}, got {n}", self.devices.len())));
            }
            self.devices.truncate(n);
            let capacity: f64 = self.devices.iter().map(|d| d.max_bandwidth_hz).sum();
            self.server.total_bandwidth_hz = self.server.total_bandwidth_hz.min(capacity);
        }
        self.validate()
    }

    /// Calibrates the predictor, fits the surface and resolves the threshold.
    /// Relative file paths are taken from `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Built, ScenarioError> {
        let rate_samples = match &self.rates {
            RateSource::Measured { sample_rows, keep_rates, levels } => {
                let tensor = ActivationTensor::gaussian(
                    *sample_rows,
                    self.model.embed_dim as usize,
                    stream_seed(self.seed, &[TAG_RATE_SWEEP, 0]),
                );
                measure_rates(&tensor, keep_rates, levels, self.model.bytes_per_param, stream_seed(self.seed, &[TAG_RATE_SWEEP, 1]))
                    .map_err(|e| ScenarioError::Calibration(e.to_string()))?
            }
            RateSource::File { path } => read_json::<PredictorFile>(&base_dir.join(path))?.samples,
        };
        let predictor = RatePredictor::calibrate(&rate_samples).map_err(|e| ScenarioError::Calibration(e.to_string()))?;

        let grid = self.grid();
        let surface = match &self.accuracy.surface {
            SurfaceSource::Synthetic { plateau, drop, knee, width, level_penalty, noise_sd } => {
                let generator = SyntheticAccuracy {
                    plateau: *plateau,
                    drop: *drop,
                    knee: *knee,
                    width: *width,
                    level_penalty: *level_penalty,
                    noise_sd: *noise_sd,
                };
                let obs = generator.observations(&grid.keep_rates, &grid.levels, stream_seed(self.seed, &[TAG_SURFACE]));
                AccuracySurface::fit(&obs).map_err(|e| ScenarioError::Calibration(e.to_string()))?
            }
            SurfaceSource::Coefficients { coefficients } => AccuracySurface::from_coefficients(*coefficients),
            SurfaceSource::File { path } => read_json::<AccuracySurface>(&base_dir.join(path))?,
        };

        let accuracy_threshold = match self.accuracy.threshold {
            ThresholdPolicy::Absolute { percent } => percent,
            ThresholdPolicy::BelowBest { margin_pp } => {
                best_on_grid(&surface, &grid.keep_rates, &grid.levels) - margin_pp
            }
        };

        let context = PlanningContext {
            profile: self.model.clone(),
            split: self.split(),
            devices: self.devices.clone(),
            server: self.server.clone(),
            predictor,
            surface,
            accuracy_threshold,
            memory_cap_bytes: self.memory_cap_bytes,
            bounds: self.bounds(),
        };
        Ok(Built { context, grid, rate_samples })
    }
}

fn check_levels(field: &str, levels: &[u16]) -> Result<(), ScenarioError> {
    if levels.is_empty() || levels[0] == 0 || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(field, "need a non-empty, strictly ascending list of positive counts"));
    }
    Ok(())
}

fn best_on_grid(surface: &AccuracySurface, keep_rates: &[f64], levels: &[u16]) -> f64 {
    keep_rates
        .iter()
        .flat_map(|&r| levels.iter().map(move |&e| surface.predict(r, e as f64)))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BUNDLED: &str = include_str!("../../../scenarios/vit_base_8dev.toml");

    fn bundled() -> Scenario {
        Scenario::from_toml(BUNDLED, Path::new("vit_base_8dev.toml")).unwrap()
    }

    #[test]
    fn bundled_scenario_is_valid() {
        let s = bundled();
        assert_eq!(s.devices.len(), 8);
        assert_eq!(s.training.batch_size, 64);
        assert_eq!(s.model.lora_rank, 16);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = bundled();
        let back = Scenario::from_toml(&s.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_field_is_named() {
        let text = BUNDLED.replacen("memory_cap_bytes", "# memory_cap_bytes", 1);
        let err = Scenario::from_toml(&text, Path::new("s.toml")).unwrap_err().to_string();
        assert!(err.contains("memory_cap_bytes"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = BUNDLED.replacen("[model]", "[model]\nbandwidth = 3", 1);
        let err = Scenario::from_toml(&text, Path::new("s.toml")).unwrap_err().to_string();
        assert!(err.contains("bandwidth") && err.contains("line"), "{err}");
    }

    #[test]
    fn bad_values_name_their_field() {
        let mut s = bundled();
        s.training.cut_layer_max = s.model.num_layers;
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid { field, .. }) if field == "training.cut_layer_min"));
        let mut s = bundled();
        s.devices[3].id = s.devices[0].id;
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid { field, .. }) if field == "devices[3].id"));
        let mut s = bundled();
        s.server.total_bandwidth_hz = 1e9;
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid { field, .. }) if field == "server.total_bandwidth_hz"));
    }

    #[test]
    fn device_override_clamps_bandwidth() {
        let mut s = bundled();
        s.apply_overrides(Some(1), Some(1)).unwrap();
        assert_eq!(s.devices.len(), 1);
        assert_eq!(s.training.rounds, 1);
        assert_eq!(s.server.total_bandwidth_hz, s.devices[0].max_bandwidth_hz);
        assert!(s.clone().apply_overrides(None, Some(9)).is_err());
    }

    #[test]
    fn below_best_threshold_tracks_the_surface() {
        let mut s = bundled();
        s.rates = RateSource::Measured { sample_rows: 8, keep_rates: vec![0.1, 1.0], levels: vec![2, 32] };
        let built = s.build(Path::new(".")).unwrap();
        let best = best_on_grid(&built.context.surface, &built.grid.keep_rates, &built.grid.levels);
        let ThresholdPolicy::BelowBest { margin_pp } = s.accuracy.threshold else { panic!("bundled policy") };
        assert!((built.context.accuracy_threshold - (best - margin_pp)).abs() < 1e-12);
    }
}
