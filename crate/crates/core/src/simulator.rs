//! Round-level execution of the split fine-tuning protocol.
//!
//! Two data paths run side by side:
//!
//! * the compression path pushes Gaussian cut-layer activations and
//!   gradients of the scenario's full size (or a row sample of it) through
//!   the codec to measure the achieved rate and transmitted bytes;
//! * the learning path trains real LoRA matrices on a per-device synthetic
//!   least-squares task, `Y = X (I + W*)` with low-rank `W*`. The device
//!   computes `H = X (I + sum_i A_i B_i)` over its blocks, `H` is compressed
//!   on the way up, the server computes `Z = H~ (I + sum_j A_j B_j)` over the
//!   remaining blocks, and the gradient of `H` is compressed on the way down.
//!
//! Per-block gradients are formed from `D x r` and `r x D` products only.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compression::{compress, decompress, ActivationTensor, CompressionConfig, CompressionError};
use crate::model_profile::{payload_sizes, ModelProfile, SplitConfig};
use crate::planner::{self, PlanningContext, PlannerError, PlannerSettings, SearchGrid};
use crate::stream_seed;
use crate::wireless::{
    link_costs, round_delays, round_max, ChannelState, DelayBreakdown, DeviceProfile, LinkPlan, ServerProfile,
    WirelessError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Wireless(#[from] WirelessError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("adapter shape mismatch: {0}")]
    Shape(String),
    #[error("invalid aggregation weights: {0}")]
    Weights(String),
    #[error("infeasible plan: {0}")]
    Infeasible(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

const CHECKPOINT_MAGIC: [u8; 4] = *b"SFTA";

// Stream tags for `stream_seed`.
const TAG_TASK: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_ACT: u64 = 3;
const TAG_GRAD: u64 = 4;
const TAG_QUANT_H: u64 = 5;
const TAG_QUANT_G: u64 = 6;

/// LoRA matrices `A (D x r)`, `B (r x D)` for a contiguous range of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    first_block: usize,
    a: Vec<Array2<f32>>,
    b: Vec<Array2<f32>>,
}

impl LoraAdapter {
    /// `A ~ N(0, sd^2)`, `B = 0`.
    pub fn init(first_block: usize, blocks: usize, dim: usize, rank: usize, sd: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, sd).expect("finite sd");
        let a = (0..blocks).map(|_| Array2::from_shape_fn((dim, rank), |_| normal.sample(&mut rng))).collect();
        let b = (0..blocks).map(|_| Array2::zeros((rank, dim))).collect();
        LoraAdapter { first_block, a, b }
    }

    pub fn from_parts(first_block: usize, a: Vec<Array2<f32>>, b: Vec<Array2<f32>>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(SimulationError::Shape(format!("{} A blocks, {} B blocks", a.len(), b.len())));
        }
        if let Some(a0) = a.first() {
            let (d, r) = a0.dim();
            for (ai, bi) in a.iter().zip(&b) {
                if ai.dim() != (d, r) || bi.dim() != (r, d) {
                    return Err(SimulationError::Shape("blocks disagree on (D, r)".into()));
                }
            }
        }
        Ok(LoraAdapter { first_block, a, b })
    }

    pub fn first_block(&self) -> usize {
        self.first_block
    }

    pub fn blocks(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.a.first().map_or(0, |a| a.nrows())
    }

    pub fn rank(&self) -> usize {
        self.a.first().map_or(0, |a| a.ncols())
    }

    pub fn a(&self) -> &[Array2<f32>] {
        &self.a
    }

    pub fn b(&self) -> &[Array2<f32>] {
        &self.b
    }

    fn same_shape(&self, other: &LoraAdapter) -> bool {
        self.first_block == other.first_block
            && self.blocks() == other.blocks()
            && self.a.iter().zip(&other.a).all(|(x, y)| x.dim() == y.dim())
            && self.b.iter().zip(&other.b).all(|(x, y)| x.dim() == y.dim())
    }

    /// `input (I + sum_i A_i B_i)`.
    fn apply(&self, input: &Array2<f32>) -> Array2<f32> {
        let mut out = input.clone();
        for (a, b) in self.a.iter().zip(&self.b) {
            out += &input.dot(a).dot(b);
        }
        out
    }

    /// Gradient step for loss with output gradient `grad_out` at `input`;
    /// returns the gradient with respect to `input` at the pre-step weights.
    fn backward_step(&mut self, input: &Array2<f32>, grad_out: &Array2<f32>, lr: f32, want_input_grad: bool) -> Option<Array2<f32>> {
        let mut grad_in = want_input_grad.then(|| grad_out.clone());
        for (a, b) in self.a.iter_mut().zip(self.b.iter_mut()) {
            let gb_t = grad_out.dot(&b.t());
            if let Some(g) = grad_in.as_mut() {
                *g += &gb_t.dot(&a.t());
            }
            let da = input.t().dot(&gb_t);
            let db = input.dot(&*a).t().dot(grad_out);
            a.scaled_add(-lr, &da);
            b.scaled_add(-lr, &db);
        }
        grad_in
    }

    /// Raw little-endian checkpoint: magic, version, then `u32` first block,
    /// block count, D and r, then each block's `A` and `B` in row-major f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(1);
        for v in [self.first_block, self.blocks(), self.dim(), self.rank()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (a, b) in self.a.iter().zip(&self.b) {
            for v in a.iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SimulationError::Checkpoint(m.to_string());
        if bytes.len() < 21 || bytes[..4] != CHECKPOINT_MAGIC || bytes[4] != 1 {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (first_block, blocks, dim, rank) = (word(0), word(1), word(2), word(3));
        let per_block = 2 * dim.checked_mul(rank).ok_or_else(|| bad("shape overflows"))?;
        let expected = blocks.checked_mul(per_block).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("shape overflows"))?;
        if bytes.len() - 21 != expected {
            return Err(bad("payload length disagrees with shape"));
        }
        let mut floats = bytes[21..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut a = Vec::with_capacity(blocks);
        let mut b = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            a.push(Array2::from_shape_simple_fn((dim, rank), || floats.next().expect("length checked")));
            b.push(Array2::from_shape_simple_fn((rank, dim), || floats.next().expect("length checked")));
        }
        Ok(LoraAdapter { first_block, a, b })
    }

    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Element-wise weighted mean. Accumulates in f64 as `sum w x / sum w`.
pub fn aggregate_fedavg(adapters: &[&LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    let first = *adapters.first().ok_or_else(|| SimulationError::Weights("no adapters".into()))?;
    if weights.len() != adapters.len() {
        return Err(SimulationError::Weights(format!("{} weights for {} adapters", weights.len(), adapters.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(SimulationError::Weights("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(SimulationError::Weights("weights sum to zero".into()));
    }
    if let Some(bad) = adapters.iter().position(|a| !a.same_shape(first)) {
        return Err(SimulationError::Shape(format!("adapter {bad} differs from adapter 0")));
    }
    let mean = |pick: &dyn Fn(&LoraAdapter) -> &Vec<Array2<f32>>| -> Vec<Array2<f32>> {
        (0..first.blocks())
            .map(|blk| {
                let mut acc = pick(first)[blk].mapv(|_| 0.0f64);
                for (ad, &w) in adapters.iter().zip(weights) {
                    acc.zip_mut_with(&pick(ad)[blk], |s, &v| *s += w * v as f64);
                }
                acc.mapv(|s| (s / total) as f32)
            })
            .collect()
    };
    Ok(LoraAdapter { first_block: first.first_block, a: mean(&|x| &x.a), b: mean(&|x| &x.b) })
}

/// Knobs of the synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub lr_device: f32,
    pub lr_server: f32,
    pub init_sd: f32,
    /// Rows of each device's least-squares design matrix.
    pub task_rows: usize,
    pub target_rank: usize,
    pub target_scale: f32,
    /// Rows of the Gaussian tensors pushed through the codec; `None` uses
    /// the full `B * N_tok`. Bytes are scaled to the full payload.
    pub sample_rows: Option<usize>,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            lr_device: 0.01,
            lr_server: 0.01,
            init_sd: 0.02,
            task_rows: 64,
            target_rank: 4,
            target_scale: 0.05,
            sample_rows: None,
        }
    }
}

/// One device's local task and adapter copy.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: u32,
    pub dataset_size: u64,
    pub adapter: LoraAdapter,
    x: Array2<f32>,
    y: Array2<f32>,
}

impl DeviceState {
    pub fn new(device: &DeviceProfile, dim: usize, settings: &SimulationSettings, adapter: LoraAdapter, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_TASK, device.id as u64]));
        let mut gauss = |rows: usize, cols: usize, scale: f32| {
            Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f32, _>(StandardNormal))
        };
        let x = gauss(settings.task_rows, dim, 1.0);
        let u = gauss(dim, settings.target_rank, settings.target_scale);
        let v = gauss(settings.target_rank, dim, 1.0 / (dim as f32).sqrt());
        let y = &x + &x.dot(&u).dot(&v);
        DeviceState { id: device.id, dataset_size: device.dataset_size, adapter, x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRoundLog {
    pub id: u32,
    pub bandwidth_hz: f64,
    pub delay: DelayBreakdown,
    pub beta_up: f64,
    pub beta_down: f64,
    pub bytes_up_activation: u64,
    pub bytes_up_lora: u64,
    pub bytes_down_gradient: u64,
    /// Loss of the last local epoch, before that epoch's update.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub devices: Vec<DeviceRoundLog>,
    pub delay_s: f64,
    pub bytes_down_broadcast: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Dataset-weighted loss.
    pub loss: f64,
    pub device_adapter_checksum: String,
    pub server_adapter_checksum: String,
}

/// Server adapter plus the per-device states.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub global_adapter: LoraAdapter,
    pub server_adapter: LoraAdapter,
    pub devices: Vec<DeviceState>,
}

impl SessionState {
    pub fn new(
        devices: &[DeviceProfile],
        profile: &ModelProfile,
        split: &SplitConfig,
        settings: &SimulationSettings,
        seed: u64,
    ) -> Self {
        let (dim, rank) = (profile.embed_dim as usize, profile.lora_rank as usize);
        let cut = split.cut_layer as usize;
        let blocks = profile.num_layers as usize;
        let global_adapter = LoraAdapter::init(1, cut, dim, rank, settings.init_sd, stream_seed(seed, &[TAG_INIT, 0]));
        let server_adapter =
            LoraAdapter::init(cut + 1, blocks - cut, dim, rank, settings.init_sd, stream_seed(seed, &[TAG_INIT, 1]));
        let devices =
            devices.iter().map(|d| DeviceState::new(d, dim, settings, global_adapter.clone(), seed)).collect();
        SessionState { global_adapter, server_adapter, devices }
    }
}

fn to_tensor(m: &Array2<f32>) -> Result<ActivationTensor> {
    let (rows, cols) = m.dim();
    Ok(ActivationTensor::new(rows, cols, m.iter().copied().collect())?)
}

fn roundtrip(m: &Array2<f32>, config: Option<&CompressionConfig>, seed: u64) -> Result<Array2<f32>> {
    match config {
        None => Ok(m.clone()),
        Some(c) => {
            let blob = compress(&to_tensor(m)?, c, seed)?;
            let back = decompress(&blob)?;
            Ok(Array2::from_shape_vec(m.dim(), back.into_values()).expect("shape preserved"))
        }
    }
}

// Rate and full-payload bytes of one Gaussian tensor through the codec.
fn measure(
    config: Option<&CompressionConfig>,
    rows: usize,
    cols: usize,
    payload_bytes: u64,
    bytes_per_param: u64,
    seed: u64,
) -> Result<(f64, u64)> {
    let Some(c) = config else {
        return Ok((1.0, payload_bytes));
    };
    let tensor = ActivationTensor::gaussian(rows, cols, seed);
    let blob = compress(&tensor, c, seed)?;
    let raw = rows as u128 * cols as u128 * bytes_per_param as u128;
    let bytes = (blob.byte_len() as u128 * payload_bytes as u128).div_ceil(raw) as u64;
    Ok((blob.bit_len() as f64 / (raw as f64 * 8.0), bytes))
}

// Reconstructed activations plus (beta, bytes) for the uplink and downlink.
type Uplink = (Array2<f32>, (f64, u64), (f64, u64));

struct EpochTraffic {
    beta_up: f64,
    beta_down: f64,
    bytes_up: u64,
    bytes_down: u64,
}

/// Inputs of one round that stay fixed across it.
pub struct RoundInputs<'a> {
    pub profiles: &'a [DeviceProfile],
    pub server: &'a ServerProfile,
    pub profile: &'a ModelProfile,
    pub split: &'a SplitConfig,
    pub compression: Option<&'a CompressionConfig>,
    pub settings: &'a SimulationSettings,
    pub seed: u64,
}

/// One protocol round: broadcast, `K_ep` local epochs of device forward,
/// compressed uplink, server step, compressed downlink and device step,
/// then adapter upload and dataset-weighted aggregation.
pub fn run_round(
    state: &mut SessionState,
    inputs: &RoundInputs<'_>,
    channel: &ChannelState,
    bandwidths_hz: &[f64],
) -> Result<RoundLog> {
    let t = channel.round;
    let profile = inputs.profile;
    let payload = payload_sizes(profile, inputs.split);
    let rows = inputs
        .settings
        .sample_rows
        .unwrap_or((inputs.split.batch_size * profile.num_tokens) as usize);
    let cols = profile.embed_dim as usize;
    let alpha = profile.bytes_per_param;
    let n = state.devices.len();
    if bandwidths_hz.len() != n || inputs.profiles.len() != n {
        return Err(SimulationError::Shape(format!("{} bandwidths for {n} devices", bandwidths_hz.len())));
    }

    for d in &mut state.devices {
        d.adapter = state.global_adapter.clone();
    }
    let mut traffic: Vec<Vec<EpochTraffic>> = (0..n).map(|_| Vec::new()).collect();
    let mut losses = vec![0.0f64; n];

    for epoch in 0..inputs.split.local_epochs {
        // Device forward and uplink compression run per device in parallel.
        let uplinks = state
            .devices
            .par_iter()
            .map(|d| -> Result<Uplink> {
                let key = |tag| stream_seed(inputs.seed, &[tag, d.id as u64, t, epoch]);
                let h = d.adapter.apply(&d.x);
                let h_hat = roundtrip(&h, inputs.compression, key(TAG_QUANT_H))?;
                let up = measure(inputs.compression, rows, cols, payload.activation, alpha, key(TAG_ACT))?;
                let down = measure(inputs.compression, rows, cols, payload.gradient, alpha, key(TAG_GRAD))?;
                Ok((h_hat, up, down))
            })
            .collect::<Result<Vec<_>>>()?;

        // The server serves devices in index order with one shared adapter.
        let mut grads = Vec::with_capacity(n);
        for (i, (d, (h_hat, up, down))) in state.devices.iter().zip(uplinks).enumerate() {
            let z = state.server_adapter.apply(&h_hat);
            let resid = &z - &d.y;
            let m = d.x.nrows() as f32;
            losses[i] = resid.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / (2.0 * m as f64);
            let grad_z = resid / m;
            let grad_h = state
                .server_adapter
                .backward_step(&h_hat, &grad_z, inputs.settings.lr_server, true)
                .expect("input gradient requested");
            grads.push(grad_h);
            traffic[i].push(EpochTraffic { beta_up: up.0, beta_down: down.0, bytes_up: up.1, bytes_down: down.1 });
        }

        state
            .devices
            .par_iter_mut()
            .zip(grads)
            .map(|(d, g)| -> Result<()> {
                let g_hat = roundtrip(&g, inputs.compression, stream_seed(inputs.seed, &[TAG_QUANT_G, d.id as u64, t, epoch]))?;
                let x = d.x.clone();
                d.adapter.backward_step(&x, &g_hat, inputs.settings.lr_device, false);
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;
    }

    let weights: Vec<f64> = state.devices.iter().map(|d| d.dataset_size as f64).collect();
    let adapters: Vec<&LoraAdapter> = state.devices.iter().map(|d| &d.adapter).collect();
    state.global_adapter = aggregate_fedavg(&adapters, &weights)?;

    let k = inputs.split.local_epochs as f64;
    let links: Vec<LinkPlan> = traffic
        .iter()
        .zip(bandwidths_hz)
        .map(|(tr, &b)| LinkPlan {
            beta_up: tr.iter().map(|e| e.beta_up).sum::<f64>() / k,
            beta_down: tr.iter().map(|e| e.beta_down).sum::<f64>() / k,
            bandwidth_hz: b,
        })
        .collect();
    let delays = round_delays(inputs.profiles, &links, profile, inputs.split, channel, inputs.server)?;

    let devices: Vec<DeviceRoundLog> = state
        .devices
        .iter()
        .enumerate()
        .map(|(i, d)| DeviceRoundLog {
            id: d.id,
            bandwidth_hz: bandwidths_hz[i],
            delay: delays[i],
            beta_up: links[i].beta_up,
            beta_down: links[i].beta_down,
            bytes_up_activation: traffic[i].iter().map(|e| e.bytes_up).sum(),
            bytes_up_lora: payload.lora_dist,
            bytes_down_gradient: traffic[i].iter().map(|e| e.bytes_down).sum(),
            loss: losses[i],
        })
        .collect();
    let bytes_down_broadcast = if t <= 1 { payload.block_dist } else { payload.lora_dist };
    let total_weight: f64 = weights.iter().sum();
    Ok(RoundLog {
        round: t,
        delay_s: round_max(&delays),
        bytes_down_broadcast,
        bytes_up: devices.iter().map(|d| d.bytes_up_activation + d.bytes_up_lora).sum(),
        bytes_down: bytes_down_broadcast + devices.iter().map(|d| d.bytes_down_gradient).sum::<u64>(),
        loss: losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / total_weight,
        devices,
        device_adapter_checksum: state.global_adapter.checksum(),
        server_adapter_checksum: state.server_adapter.checksum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub plan: planner::Plan,
    pub rounds: Vec<RoundLog>,
    pub total_delay_s: f64,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub loss_trace: Vec<f64>,
    pub final_device_adapter_checksum: String,
    pub final_server_adapter_checksum: String,
}

/// Everything a session needs besides the planning context.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub grid: SearchGrid,
    pub planner: PlannerSettings,
    pub simulation: SimulationSettings,
    /// Replaces the planner's `(rho, E)` choice; `Some(None)` disables
    /// compression altogether.
    pub compression_override: Option<Option<CompressionConfig>>,
    pub seed: u64,
}

/// Plans once, then per round draws the channel, allocates bandwidth for
/// the predicted rate and runs the round.
pub fn run_session(ctx: &PlanningContext, config: &SessionConfig) -> Result<SessionReport> {
    let (plan, _) = planner::plan(ctx, &config.grid, &config.planner)?;
    if !plan.feasible {
        let names: Vec<String> = planner::CONSTRAINT_NAMES
            .iter()
            .zip(plan.residuals)
            .filter(|(_, g)| *g < 0.0)
            .map(|(n, g)| format!("{n} short by {}", -g))
            .collect();
        return Err(SimulationError::Infeasible(names.join(", ")));
    }
    run_plan(ctx, &plan, config)
}

/// Executes a given plan.
pub fn run_plan(ctx: &PlanningContext, plan: &planner::Plan, config: &SessionConfig) -> Result<SessionReport> {
    let split = ctx.split.with_cut(plan.cut_layer);
    let planned = CompressionConfig::new(plan.keep_rate, plan.levels);
    let compression = match &config.compression_override {
        Some(c) => *c,
        None => Some(planned),
    };
    let beta = match compression {
        Some(CompressionConfig { keep_rate, levels: Some(e) }) => ctx.beta(keep_rate, e as f64),
        _ => 1.0,
    };
    let mut state = SessionState::new(&ctx.devices, &ctx.profile, &split, &config.simulation, config.seed);
    let inputs = RoundInputs {
        profiles: &ctx.devices,
        server: &ctx.server,
        profile: &ctx.profile,
        split: &split,
        compression: compression.as_ref(),
        settings: &config.simulation,
        seed: config.seed,
    };

    let mut rounds = Vec::with_capacity(split.rounds as usize);
    for t in 1..=split.rounds {
        let channel = ChannelState::draw(&ctx.devices, config.seed, t);
        let costs = link_costs(&ctx.devices, (beta, beta), &ctx.profile, &split, &channel, &ctx.server)?;
        let bw = planner::solve_bandwidth(&costs, ctx.server.total_bandwidth_hz, &config.planner)?;
        rounds.push(run_round(&mut state, &inputs, &channel, &bw.bandwidths_hz)?);
    }
    Ok(SessionReport {
        plan: plan.clone(),
        total_delay_s: rounds.iter().map(|r| r.delay_s).sum(),
        total_bytes_up: rounds.iter().map(|r| r.bytes_up).sum(),
        total_bytes_down: rounds.iter().map(|r| r.bytes_down).sum(),
        loss_trace: rounds.iter().map(|r| r.loss).collect(),
        final_device_adapter_checksum: state.global_adapter.checksum(),
        final_server_adapter_checksum: state.server_adapter.checksum(),
        rounds,
    })
}
