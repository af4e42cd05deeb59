//! The four subcommands. Each returns the paths it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sft_core::compression::{
    compress, compression_ratio, AccuracyObservation, AccuracySurface, ActivationTensor, CompressionConfig,
    RatePredictor, RateSample,
};
use sft_core::model_profile::{memory_block, payload_sizes, ModelProfile, SplitConfig};
use sft_core::planner::{
    self, brute_force_config, max_delay, random_allocation, solve_bandwidth, uniform_allocation, ConfigChoice,
    Plan, PlanningContext, CONSTRAINT_NAMES,
};
use sft_core::simulator::{run_plan, run_session, SessionConfig, SessionReport};
use sft_core::stream_seed;
use sft_core::wireless::{link_costs, round_delay, ChannelState, LinkPlan};

use crate::output::{write_csv, write_json};
use crate::scenario::{Built, PredictorFile, Scenario};

const TAG_RANDOM_ALLOCATION: u64 = 201;
const TAG_REPORT_TENSOR: u64 = 202;

/// Relative gap allowed between the optimizer and the exhaustive oracle.
pub const ORACLE_TOLERANCE: f64 = 0.02;

/// Relative slack in the optimized-versus-baseline delay comparison. The
/// random column is a mean, so equal allocations can differ in the last ulp.
pub const DOMINANCE_TOLERANCE: f64 = 1e-12;

/// Options shared by every scenario-driven subcommand.
#[derive(Debug, Clone)]
pub struct ScenarioArgs {
    pub scenario: PathBuf,
    pub seed: Option<u64>,
    pub rounds: Option<u64>,
    pub devices: Option<usize>,
}

impl ScenarioArgs {
    pub fn new(scenario: impl Into<PathBuf>) -> Self {
        ScenarioArgs { scenario: scenario.into(), seed: None, rounds: None, devices: None }
    }

    pub fn load(&self) -> Result<(Scenario, Built)> {
        let mut scenario = Scenario::load(&self.scenario)?;
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        scenario.apply_overrides(self.rounds, self.devices)?;
        let base = self.scenario.parent().unwrap_or(Path::new("."));
        let built = scenario.build(base)?;
        Ok((scenario, built))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub cut_layer: u64,
    pub keep_rate: f64,
    pub levels: u16,
    pub objective_s: f64,
    pub feasible: bool,
    /// `(optimizer - oracle) / oracle`.
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub plan: Plan,
    pub accuracy_threshold_percent: f64,
    pub predicted_accuracy_percent: f64,
    pub device_memory_bytes: u64,
    pub memory_cap_bytes: u64,
    /// Largest cut whose device memory fits the cap, if any.
    pub memory_feasible_max_cut: Option<u64>,
    pub residuals: Vec<ConstraintResidual>,
    pub oracle: Option<OracleCheck>,
}

#[derive(Debug, Serialize)]
struct TraceCsvRow {
    iteration: usize,
    cut_layer: u64,
    keep_rate: f64,
    levels: u16,
    objective_s: f64,
    lagrangian: f64,
    lambda_accuracy: f64,
    lambda_memory: f64,
    lambda_keep_rate_min: f64,
    lambda_keep_rate_max: f64,
    lambda_levels_min: f64,
    lambda_levels_max: f64,
    lambda_cut_min: f64,
    lambda_cut_max: f64,
    max_violation: f64,
}

fn trace_rows(config: &ConfigChoice) -> Vec<TraceCsvRow> {
    config
        .trace
        .iter()
        .map(|r| {
            let l = r.lambda;
            TraceCsvRow {
                iteration: r.iteration,
                cut_layer: r.cut_layer,
                keep_rate: r.keep_rate,
                levels: r.levels,
                objective_s: r.objective_s,
                lagrangian: r.lagrangian,
                lambda_accuracy: l[0],
                lambda_memory: l[1],
                lambda_keep_rate_min: l[2],
                lambda_keep_rate_max: l[3],
                lambda_levels_min: l[4],
                lambda_levels_max: l[5],
                lambda_cut_min: l[6],
                lambda_cut_max: l[7],
                max_violation: r.violations.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect()
}

fn memory_feasible_max_cut(ctx: &PlanningContext) -> Option<u64> {
    (1..ctx.profile.num_layers)
        .filter(|&l| ctx.memory(l) <= ctx.memory_cap_bytes)
        .max()
}

fn residual_list(residuals: &[f64; 8]) -> Vec<ConstraintResidual> {
    CONSTRAINT_NAMES.iter().zip(residuals).map(|(n, v)| ConstraintResidual { name: n.to_string(), value: *v }).collect()
}

/// Plans the scenario. Writes `plan.json` and `plan_trace.csv`, and fails
/// after writing them if the plan is infeasible or the oracle disagrees.
pub fn cmd_plan(args: &ScenarioArgs, out: &Path, oracle: bool) -> Result<(PlanFile, Vec<PathBuf>)> {
    let (scenario, built) = args.load()?;
    let ctx = &built.context;
    let (plan, config) = planner::plan(ctx, &built.grid, &scenario.planner)?;
    let oracle = if oracle {
        let brute = brute_force_config(ctx, &built.grid)?;
        Some(OracleCheck {
            cut_layer: brute.cut_layer,
            keep_rate: brute.keep_rate,
            levels: brute.levels,
            objective_s: brute.objective_s,
            feasible: brute.feasible,
            relative_gap: (config.objective_s - brute.objective_s) / brute.objective_s,
        })
    } else {
        None
    };
    let file = PlanFile {
        accuracy_threshold_percent: ctx.accuracy_threshold,
        predicted_accuracy_percent: ctx.surface.predict(plan.keep_rate, plan.levels as f64),
        device_memory_bytes: ctx.memory(plan.cut_layer),
        memory_cap_bytes: ctx.memory_cap_bytes,
        memory_feasible_max_cut: memory_feasible_max_cut(ctx),
        residuals: residual_list(&plan.residuals),
        oracle,
        plan,
    };
    let paths = vec![out.join("plan.json"), out.join("plan_trace.csv")];
    write_json(&paths[0], &file)?;
    write_csv(&paths[1], &trace_rows(&config))?;

    if !file.plan.feasible {
        let violated: Vec<String> =
            config.violations().iter().map(|(n, v)| format!("{n} violated by {v:.6}")).collect();
        bail!("no feasible configuration: {}", violated.join("; "));
    }
    if let Some(o) = &file.oracle {
        if o.feasible && o.relative_gap > ORACLE_TOLERANCE {
            bail!("optimizer objective is {:.2}% above the exhaustive optimum", 100.0 * o.relative_gap);
        }
    }
    Ok((file, paths))
}

#[derive(Debug, Serialize)]
struct RoundCsvRow {
    round: u64,
    device_id: u32,
    bandwidth_hz: f64,
    beta_up: f64,
    beta_down: f64,
    td_s: f64,
    cc_s: f64,
    it_s: f64,
    sc_s: f64,
    gt_s: f64,
    du_s: f64,
    lt_s: f64,
    device_total_s: f64,
    round_delay_s: f64,
    bytes_up_activation: u64,
    bytes_up_lora: u64,
    bytes_down_gradient: u64,
    bytes_down_broadcast: u64,
    device_loss: f64,
    round_loss: f64,
}

fn round_rows(report: &SessionReport) -> Vec<RoundCsvRow> {
    report
        .rounds
        .iter()
        .flat_map(|r| {
            r.devices.iter().map(move |d| RoundCsvRow {
                round: r.round,
                device_id: d.id,
                bandwidth_hz: d.bandwidth_hz,
                beta_up: d.beta_up,
                beta_down: d.beta_down,
                td_s: d.delay.td,
                cc_s: d.delay.cc,
                it_s: d.delay.it,
                sc_s: d.delay.sc,
                gt_s: d.delay.gt,
                du_s: d.delay.du,
                lt_s: d.delay.lt,
                device_total_s: d.delay.total,
                round_delay_s: r.delay_s,
                bytes_up_activation: d.bytes_up_activation,
                bytes_up_lora: d.bytes_up_lora,
                bytes_down_gradient: d.bytes_down_gradient,
                bytes_down_broadcast: r.bytes_down_broadcast,
                device_loss: d.loss,
                round_loss: r.loss,
            })
        })
        .collect()
}

/// Runs a session, planning first unless `plan` names a `plan.json`.
/// Writes `report.json` and `rounds.csv`.
pub fn cmd_simulate(args: &ScenarioArgs, plan: Option<&Path>, out: &Path) -> Result<(SessionReport, Vec<PathBuf>)> {
    let (scenario, built) = args.load()?;
    let config = SessionConfig {
        grid: built.grid.clone(),
        planner: scenario.planner.clone(),
        simulation: scenario.simulation.clone(),
        compression_override: None,
        seed: scenario.seed,
    };
    let report = match plan {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: PlanFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if file.plan.bandwidths_hz.len() != built.context.devices.len() {
                bail!(
                    "plan covers {} devices but the scenario has {}",
                    file.plan.bandwidths_hz.len(),
                    built.context.devices.len()
                );
            }
            if !file.plan.feasible {
                bail!("plan in {} is marked infeasible", path.display());
            }
            run_plan(&built.context, &file.plan, &config)?
        }
        None => run_session(&built.context, &config)?,
    };
    let paths = vec![out.join("report.json"), out.join("rounds.csv")];
    write_json(&paths[0], &report)?;
    write_csv(&paths[1], &round_rows(&report))?;
    Ok((report, paths))
}

#[derive(Debug, Deserialize)]
struct MeasurementRow {
    #[serde(alias = "rho")]
    keep_rate: f64,
    #[serde(alias = "E")]
    levels: u16,
    #[serde(default)]
    accuracy: Option<f64>,
    #[serde(default)]
    beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub predictor: Option<PredictorFile>,
    pub surface: Option<AccuracySurface>,
}

/// Reads `keep_rate,levels[,accuracy][,beta]` rows (`rho` and `E` are
/// accepted as header aliases). Writes `predictor.json` from the `beta`
/// column and `surface.json` from the `accuracy` column.
pub fn cmd_calibrate(measurements: &Path, out: &Path) -> Result<(Calibration, Vec<PathBuf>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(measurements)
        .with_context(|| format!("opening {}", measurements.display()))?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<MeasurementRow>().enumerate() {
        rows.push(row.with_context(|| format!("{} record {}", measurements.display(), i + 1))?);
    }
    if rows.is_empty() {
        bail!("{} has no measurements", measurements.display());
    }
    let column = |name: &str, present: usize| -> Result<bool> {
        match present {
            0 => Ok(false),
            n if n == rows.len() => Ok(true),
            n => Err(anyhow!("column `{name}` is filled in {n} of {} rows", rows.len())),
        }
    };
    let has_beta = column("beta", rows.iter().filter(|r| r.beta.is_some()).count())?;
    let has_accuracy = column("accuracy", rows.iter().filter(|r| r.accuracy.is_some()).count())?;
    if !has_beta && !has_accuracy {
        bail!("{} has neither a beta nor an accuracy column", measurements.display());
    }

    let mut paths = Vec::new();
    let predictor = if has_beta {
        let samples: Vec<RateSample> = rows
            .iter()
            .map(|r| RateSample { keep_rate: r.keep_rate, levels: r.levels, beta: r.beta.expect("column checked") })
            .collect();
        RatePredictor::calibrate(&samples)?;
        let file = PredictorFile { samples };
        let path = out.join("predictor.json");
        write_json(&path, &file)?;
        paths.push(path);
        Some(file)
    } else {
        None
    };
    let surface = if has_accuracy {
        let obs: Vec<AccuracyObservation> = rows
            .iter()
            .map(|r| AccuracyObservation {
                keep_rate: r.keep_rate,
                levels: r.levels,
                accuracy: r.accuracy.expect("column checked"),
            })
            .collect();
        let surface = AccuracySurface::fit(&obs)?;
        let path = out.join("surface.json");
        write_json(&path, &surface)?;
        paths.push(path);
        Some(surface)
    } else {
        None
    };
    Ok((Calibration { predictor, surface }, paths))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub scheme: String,
    pub cut_layer: u64,
    pub model_bytes_per_block: u64,
    pub optimizer_bytes_per_block: u64,
    pub gradient_bytes_per_block: u64,
    pub activation_bytes_per_block: u64,
    pub device_total_bytes: u64,
    /// Baseline device memory divided by this row's.
    pub baseline_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub total_bandwidth_hz: f64,
    pub uniform_round_s: f64,
    pub random_round_s: f64,
    pub optimized_round_s: f64,
    pub sequential_baseline_round_s: f64,
    pub reduction_vs_uniform_pct: f64,
    pub reduction_vs_random_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub scheme: String,
    pub keep_rate: f64,
    pub levels: u16,
    pub beta: f64,
    /// Per device and round.
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    pub adapter_bytes: u64,
    pub broadcast_bytes: u64,
    pub total_bytes: u64,
    /// Uncompressed activation plus gradient bytes divided by this row's.
    pub cut_traffic_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub file: String,
    pub rounds: usize,
    pub total_delay_s: f64,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub final_loss: f64,
    pub final_device_adapter_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cut_layer: u64,
    pub keep_rate: f64,
    pub levels: u16,
    pub feasible: bool,
    pub memory: Vec<MemoryRow>,
    pub delay: Vec<DelayRow>,
    pub overhead: Vec<OverheadRow>,
    pub sessions: Vec<SessionRow>,
    pub best_reduction_vs_uniform_pct: f64,
    pub optimized_never_worse: bool,
}

fn memory_row(scheme: &str, profile: &ModelProfile, split: &SplitConfig, baseline: u64) -> MemoryRow {
    let m = memory_block(profile, split);
    MemoryRow {
        scheme: scheme.to_string(),
        cut_layer: split.cut_layer,
        model_bytes_per_block: m.model,
        optimizer_bytes_per_block: m.optimizer,
        gradient_bytes_per_block: m.gradient,
        activation_bytes_per_block: m.activation,
        device_total_bytes: m.device_total,
        baseline_ratio: baseline as f64 / m.device_total as f64,
    }
}

fn measured_beta(scenario: &Scenario, split: &SplitConfig, config: CompressionConfig) -> Result<f64> {
    let rows = (split.batch_size * scenario.model.num_tokens) as usize;
    let tensor =
        ActivationTensor::gaussian(rows, scenario.model.embed_dim as usize, stream_seed(scenario.seed, &[TAG_REPORT_TENSOR]));
    let blob = compress(&tensor, &config, stream_seed(scenario.seed, &[TAG_REPORT_TENSOR, 1]))?;
    Ok(compression_ratio(&blob, &tensor, scenario.model.bytes_per_param))
}

fn overhead_row(scheme: &str, split: &SplitConfig, profile: &ModelProfile, beta: f64, cfg: (f64, u16)) -> OverheadRow {
    let p = payload_sizes(profile, split);
    let k = split.local_epochs;
    let scale = |bytes: u64| (beta * bytes as f64).ceil() as u64;
    let activation_bytes = k * scale(p.activation);
    let gradient_bytes = k * scale(p.gradient);
    let raw_cut = k * (p.activation + p.gradient);
    OverheadRow {
        scheme: scheme.to_string(),
        keep_rate: cfg.0,
        levels: cfg.1,
        beta,
        activation_bytes,
        gradient_bytes,
        adapter_bytes: p.lora_dist,
        broadcast_bytes: p.lora_dist,
        total_bytes: activation_bytes + gradient_bytes + 2 * p.lora_dist,
        cut_traffic_ratio: raw_cut as f64 / (activation_bytes + gradient_bytes).max(1) as f64,
    }
}

/// Comparison tables for the planned configuration: memory against full
/// on-device fine-tuning, per-round delay for several bandwidth policies and
/// per-device traffic with and without compression. `sessions` are earlier
/// `report.json` files to summarize. Writes `memory.csv`, `delay.csv`,
/// `overhead.csv`, `comparison.json` and, given sessions, `sessions.csv`.
pub fn cmd_report(args: &ScenarioArgs, sessions: &[PathBuf], out: &Path) -> Result<(Report, Vec<PathBuf>)> {
    let (scenario, built) = args.load()?;
    let ctx = &built.context;
    let settings = &scenario.report;
    let config = planner::optimize_config(ctx, &built.grid, &scenario.planner)?;
    let profile = &ctx.profile;
    let planned = ctx.split.with_cut(config.cut_layer);

    let full = ctx.split.with_cut(profile.num_layers);
    let baseline = memory_block(profile, &full).device_total;
    let mut memory = vec![memory_row("full_on_device", profile, &full, baseline)];
    if settings.reference_cut_layer != config.cut_layer {
        memory.push(memory_row("split_reference", profile, &ctx.split.with_cut(settings.reference_cut_layer), baseline));
    }
    memory.push(memory_row("split_planned", profile, &planned, baseline));

    let channel = ChannelState::nominal(&ctx.devices, 2);
    let capacity: f64 = ctx.devices.iter().map(|d| d.max_bandwidth_hz).sum();
    let caps: Vec<f64> = ctx.devices.iter().map(|d| d.max_bandwidth_hz).collect();
    let mut delay = Vec::new();
    for (i, &total) in settings.bandwidth_sweep_hz.iter().enumerate() {
        if total > capacity {
            continue;
        }
        let mut server = ctx.server.clone();
        server.total_bandwidth_hz = total;
        let costs = link_costs(&ctx.devices, (config.beta, config.beta), profile, &planned, &channel, &server)?;
        let uniform = max_delay(&costs, &uniform_allocation(&caps, total)?);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario.seed, &[TAG_RANDOM_ALLOCATION, i as u64]));
        let mut random = 0.0;
        for _ in 0..settings.random_trials.max(1) {
            random += max_delay(&costs, &random_allocation(&caps, total, &mut rng)?);
        }
        random /= settings.random_trials.max(1) as f64;
        let optimized = solve_bandwidth(&costs, total, &scenario.planner)?.objective_s;

        // Devices served one at a time with the whole server and as much
        // spectrum as their radio takes, without compression.
        let mut sequential = 0.0;
        for (j, d) in ctx.devices.iter().enumerate() {
            let link = LinkPlan { beta_up: 1.0, beta_down: 1.0, bandwidth_hz: d.max_bandwidth_hz.min(total) };
            sequential += round_delay(d, j, &link, profile, &planned, &channel, &server, 1)?.total;
        }
        delay.push(DelayRow {
            total_bandwidth_hz: total,
            uniform_round_s: uniform,
            random_round_s: random,
            optimized_round_s: optimized,
            sequential_baseline_round_s: sequential,
            reduction_vs_uniform_pct: 100.0 * (1.0 - optimized / uniform),
            reduction_vs_random_pct: 100.0 * (1.0 - optimized / random),
        });
    }

    let reference = (settings.reference_keep_rate, settings.reference_levels);
    let planned_cfg = (config.keep_rate, config.levels);
    let overhead = vec![
        overhead_row("uncompressed", &planned, profile, 1.0, (1.0, 0)),
        overhead_row(
            "compressed_reference",
            &planned,
            profile,
            measured_beta(&scenario, &planned, CompressionConfig::new(reference.0, reference.1))?,
            reference,
        ),
        overhead_row(
            "compressed_planned",
            &planned,
            profile,
            measured_beta(&scenario, &planned, CompressionConfig::new(planned_cfg.0, planned_cfg.1))?,
            planned_cfg,
        ),
    ];

    let mut session_rows = Vec::new();
    for path in sessions {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: SessionReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        session_rows.push(SessionRow {
            file: path.display().to_string(),
            rounds: r.rounds.len(),
            total_delay_s: r.total_delay_s,
            total_bytes_up: r.total_bytes_up,
            total_bytes_down: r.total_bytes_down,
            final_loss: r.loss_trace.last().copied().unwrap_or(f64::NAN),
            final_device_adapter_checksum: r.final_device_adapter_checksum,
        });
    }

    let report = Report {
        cut_layer: config.cut_layer,
        keep_rate: config.keep_rate,
        levels: config.levels,
        feasible: config.feasible,
        best_reduction_vs_uniform_pct: delay.iter().map(|r| r.reduction_vs_uniform_pct).fold(f64::NEG_INFINITY, f64::max),
        optimized_never_worse: delay
            .iter()
            .all(|r| {
                let slack = 1.0 + DOMINANCE_TOLERANCE;
                r.optimized_round_s <= r.uniform_round_s * slack && r.optimized_round_s <= r.random_round_s * slack
            }),
        memory,
        delay,
        overhead,
        sessions: session_rows,
    };
    let mut paths = vec![out.join("memory.csv"), out.join("delay.csv"), out.join("overhead.csv"), out.join("comparison.json")];
    write_csv(&paths[0], &report.memory)?;
    write_csv(&paths[1], &report.delay)?;
    write_csv(&paths[2], &report.overhead)?;
    write_json(&paths[3], &report)?;
    if !report.sessions.is_empty() {
        let path = out.join("sessions.csv");
        write_csv(&path, &report.sessions)?;
        paths.push(path);
    }
    Ok((report, paths))
}
