//! Shannon-rate links and the seven-phase round delay of one device.
//!
//! Phases, in protocol order: block/adapter broadcast (`td`), device forward
//! pass (`cc`), activation uplink (`it`), server forward and backward pass
//! (`sc`), gradient downlink (`gt`), device backward pass (`du`), adapter
//! uplink (`lt`). `cc` through `du` repeat once per local epoch; `td` and
//! `lt` happen once per round. Payloads are bytes; rates are bits per second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_profile::{
    flops_device_bp, flops_device_fp, flops_server_bp, flops_server_fp, payload_sizes, ModelProfile,
    SplitConfig,
};
use crate::stream_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WirelessError {
    #[error("invalid device {id}: {reason}")]
    InvalidDevice { id: u32, reason: String },
    #[error("invalid server: {0}")]
    InvalidServer(String),
    #[error("unreachable device {id}: zero {phase} rate with a nonzero payload")]
    Unreachable { id: u32, phase: &'static str },
    #[error("device {id} bandwidth {bandwidth_hz} Hz outside [0, {max_hz}]")]
    BandwidthCap { id: u32, bandwidth_hz: f64, max_hz: f64 },
    #[error("channel state mismatch: {0}")]
    Channel(String),
}

pub type Result<T> = std::result::Result<T, WirelessError>;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Per-round SNR law: uniform in dB over `[min_db, max_db]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnrModel {
    pub nominal_db: f64,
    pub min_db: f64,
    pub max_db: f64,
}

impl SnrModel {
    pub fn fixed(db: f64) -> Self {
        SnrModel { nominal_db: db, min_db: db, max_db: db }
    }

    pub fn nominal(&self) -> f64 {
        db_to_linear(self.nominal_db)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.max_db > self.min_db {
            db_to_linear(rng.random_range(self.min_db..=self.max_db))
        } else {
            db_to_linear(self.min_db)
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let finite = self.nominal_db.is_finite() && self.min_db.is_finite() && self.max_db.is_finite();
        if !finite || self.min_db > self.max_db {
            return Err(format!("snr range [{}, {}] dB is invalid", self.min_db, self.max_db));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub id: u32,
    pub gpu_freq_hz: f64,
    pub cores: u64,
    pub flops_per_cycle: u64,
    pub max_bandwidth_hz: f64,
    pub snr: SnrModel,
    pub dataset_size: u64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(WirelessError::InvalidDevice { id: self.id, reason });
        if !(self.gpu_freq_hz.is_finite() && self.gpu_freq_hz > 0.0) {
            return bad(format!("gpu_freq_hz must be positive, got {}", self.gpu_freq_hz));
        }
        if self.cores == 0 || self.flops_per_cycle == 0 {
            return bad("cores and flops_per_cycle must be positive".into());
        }
        if !(self.max_bandwidth_hz.is_finite() && self.max_bandwidth_hz > 0.0) {
            return bad(format!("max_bandwidth_hz must be positive, got {}", self.max_bandwidth_hz));
        }
        self.snr.check().or_else(bad)
    }

    pub fn throughput(&self) -> f64 {
        self.gpu_freq_hz * self.cores as f64 * self.flops_per_cycle as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharePolicy {
    /// Each active device gets `f_s / N` of the server clock.
    EqualShare,
    /// Full clock, one device at a time in arrival order.
    SequentialQueue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerProfile {
    pub gpu_freq_hz: f64,
    pub cores: u64,
    pub flops_per_cycle: u64,
    pub total_bandwidth_hz: f64,
    pub broadcast_bandwidth_hz: f64,
    pub broadcast_snr_db: f64,
    pub share_policy: SharePolicy,
}

impl ServerProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gpu_freq_hz", self.gpu_freq_hz),
            ("total_bandwidth_hz", self.total_bandwidth_hz),
            ("broadcast_bandwidth_hz", self.broadcast_bandwidth_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(WirelessError::InvalidServer(format!("{name} must be positive, got {v}")));
            }
        }
        if self.cores == 0 || self.flops_per_cycle == 0 {
            return Err(WirelessError::InvalidServer("cores and flops_per_cycle must be positive".into()));
        }
        if !self.broadcast_snr_db.is_finite() {
            return Err(WirelessError::InvalidServer("broadcast_snr_db must be finite".into()));
        }
        Ok(())
    }

    pub fn throughput(&self) -> f64 {
        self.gpu_freq_hz * self.cores as f64 * self.flops_per_cycle as f64
    }

    pub fn broadcast_rate(&self) -> f64 {
        link_rate(self.broadcast_bandwidth_hz, db_to_linear(self.broadcast_snr_db))
    }
}

/// Linear SNR of every device in one round. `round` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub round: u64,
    pub snr_up: Vec<f64>,
    pub snr_down: Vec<f64>,
}

impl ChannelState {
    pub fn nominal(devices: &[DeviceProfile], round: u64) -> Self {
        let snr: Vec<f64> = devices.iter().map(|d| d.snr.nominal()).collect();
        ChannelState { round, snr_up: snr.clone(), snr_down: snr }
    }

    /// Independent draws per device, seeded from `(seed, device id, round)`.
    pub fn draw(devices: &[DeviceProfile], seed: u64, round: u64) -> Self {
        let (snr_up, snr_down) = devices
            .iter()
            .map(|d| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[0x636861, d.id as u64, round]));
                (d.snr.draw(&mut rng), d.snr.draw(&mut rng))
            })
            .unzip();
        ChannelState { round, snr_up, snr_down }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub td: f64,
    pub cc: f64,
    pub it: f64,
    pub sc: f64,
    pub gt: f64,
    pub du: f64,
    pub lt: f64,
    pub total: f64,
}

impl DelayBreakdown {
    pub const PHASES: [&'static str; 7] = ["td", "cc", "it", "sc", "gt", "du", "lt"];

    pub fn from_phases(p: [f64; 7]) -> Self {
        let [td, cc, it, sc, gt, du, lt] = p;
        DelayBreakdown { td, cc, it, sc, gt, du, lt, total: p.iter().sum() }
    }

    pub fn phases(&self) -> [f64; 7] {
        [self.td, self.cc, self.it, self.sc, self.gt, self.du, self.lt]
    }
}

/// Per-device transmission settings for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPlan {
    pub beta_up: f64,
    pub beta_down: f64,
    pub bandwidth_hz: f64,
}

pub fn link_rate(bandwidth_hz: f64, snr: f64) -> f64 {
    bandwidth_hz * (1.0 + snr).log2()
}

pub fn compute_delay(flops: f64, freq_hz: f64, cores: u64, flops_per_cycle: u64) -> f64 {
    if flops == 0.0 {
        return 0.0;
    }
    flops / (freq_hz * cores as f64 * flops_per_cycle as f64)
}

fn transfer(id: u32, phase: &'static str, bits: f64, rate: f64) -> Result<f64> {
    if bits == 0.0 {
        Ok(0.0)
    } else if rate > 0.0 {
        Ok(bits / rate)
    } else {
        Err(WirelessError::Unreachable { id, phase })
    }
}

// Per-epoch pieces before the server queue is resolved.
struct DevicePhases {
    td: f64,
    cc: f64,
    it: f64,
    service: f64,
    gt: f64,
    du: f64,
    lt: f64,
}

#[allow(clippy::too_many_arguments)]
fn device_phases(
    device: &DeviceProfile,
    index: usize,
    link: &LinkPlan,
    profile: &ModelProfile,
    split: &SplitConfig,
    channel: &ChannelState,
    server: &ServerProfile,
    server_throughput: f64,
) -> Result<DevicePhases> {
    let id = device.id;
    if !(link.bandwidth_hz >= 0.0 && link.bandwidth_hz <= device.max_bandwidth_hz * (1.0 + 1e-12)) {
        return Err(WirelessError::BandwidthCap {
            id,
            bandwidth_hz: link.bandwidth_hz,
            max_hz: device.max_bandwidth_hz,
        });
    }
    let (snr_up, snr_down) = match (channel.snr_up.get(index), channel.snr_down.get(index)) {
        (Some(&u), Some(&d)) => (u, d),
        _ => return Err(WirelessError::Channel(format!("no SNR for device index {index}"))),
    };
    let payload = payload_sizes(profile, split);
    let broadcast = if channel.round <= 1 { payload.block_dist } else { payload.lora_dist };
    let up_rate = link_rate(link.bandwidth_hz, snr_up);
    let down_rate = link_rate(link.bandwidth_hz, snr_down);
    let server_flops = flops_server_fp(profile, split) + flops_server_bp(profile, split);
    Ok(DevicePhases {
        td: transfer(id, "broadcast", broadcast as f64 * 8.0, server.broadcast_rate())?,
        cc: compute_delay(flops_device_fp(profile, split), device.gpu_freq_hz, device.cores, device.flops_per_cycle),
        it: transfer(id, "uplink", link.beta_up * payload.activation as f64 * 8.0, up_rate)?,
        service: if server_flops == 0.0 { 0.0 } else { server_flops / server_throughput },
        gt: transfer(id, "downlink", link.beta_down * payload.gradient as f64 * 8.0, down_rate)?,
        du: compute_delay(flops_device_bp(profile, split), device.gpu_freq_hz, device.cores, device.flops_per_cycle),
        lt: transfer(id, "uplink", payload.lora_dist as f64 * 8.0, up_rate)?,
    })
}

/// Round delay of one device when the server clock is split evenly among
/// `active_devices` (or used whole under [`SharePolicy::SequentialQueue`],
/// where queueing waits are not included; see [`round_delays`]).
#[allow(clippy::too_many_arguments)]
pub fn round_delay(
    device: &DeviceProfile,
    index: usize,
    link: &LinkPlan,
    profile: &ModelProfile,
    split: &SplitConfig,
    channel: &ChannelState,
    server: &ServerProfile,
    active_devices: usize,
) -> Result<DelayBreakdown> {
    let share = match server.share_policy {
        SharePolicy::EqualShare => active_devices.max(1) as f64,
        SharePolicy::SequentialQueue => 1.0,
    };
    let p = device_phases(device, index, link, profile, split, channel, server, server.throughput() / share)?;
    let k = split.local_epochs as f64;
    Ok(DelayBreakdown::from_phases([p.td, k * p.cc, k * p.it, k * p.service, k * p.gt, k * p.du, p.lt]))
}

/// Round delays of all devices. Under `SequentialQueue` the server serves
/// forward/backward requests one at a time in arrival order (ties by index)
/// and each device's `sc` includes its queueing wait.
pub fn round_delays(
    devices: &[DeviceProfile],
    links: &[LinkPlan],
    profile: &ModelProfile,
    split: &SplitConfig,
    channel: &ChannelState,
    server: &ServerProfile,
) -> Result<Vec<DelayBreakdown>> {
    if links.len() != devices.len() {
        return Err(WirelessError::Channel(format!("{} links for {} devices", links.len(), devices.len())));
    }
    if server.share_policy == SharePolicy::EqualShare {
        return devices
            .iter()
            .zip(links)
            .enumerate()
            .map(|(i, (d, l))| round_delay(d, i, l, profile, split, channel, server, devices.len()))
            .collect();
    }

    let phases = devices
        .iter()
        .zip(links)
        .enumerate()
        .map(|(i, (d, l))| device_phases(d, i, l, profile, split, channel, server, server.throughput()))
        .collect::<Result<Vec<_>>>()?;
    let mut ready: Vec<f64> = phases.iter().map(|p| p.td).collect();
    let mut server_time = vec![0.0; devices.len()];
    let mut server_free = 0.0f64;
    for _ in 0..split.local_epochs {
        let arrivals: Vec<f64> = phases.iter().zip(&ready).map(|(p, r)| r + p.cc + p.it).collect();
        let mut order: Vec<usize> = (0..devices.len()).collect();
        order.sort_by(|&a, &b| arrivals[a].total_cmp(&arrivals[b]).then(a.cmp(&b)));
        for n in order {
            let finish = server_free.max(arrivals[n]) + phases[n].service;
            server_free = finish;
            server_time[n] += finish - arrivals[n];
            ready[n] = finish + phases[n].gt + phases[n].du;
        }
    }
    let k = split.local_epochs as f64;
    Ok(phases
        .iter()
        .zip(server_time)
        .map(|(p, sc)| DelayBreakdown::from_phases([p.td, k * p.cc, k * p.it, sc, k * p.gt, k * p.du, p.lt]))
        .collect())
}

/// Round delay: the slowest device.
pub fn round_max(delays: &[DelayBreakdown]) -> f64 {
    delays.iter().map(|d| d.total).fold(0.0, f64::max)
}

/// Sum over rounds of the per-round maximum.
pub fn session_delay(rounds: &[Vec<DelayBreakdown>]) -> f64 {
    rounds.iter().map(|r| round_max(r)).sum()
}

/// `tau(b) = fixed + (bits_up / se_up + bits_down / se_down) / b` for one
/// device, with `se` the spectral efficiency `log2(1 + snr)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCost {
    pub fixed_s: f64,
    pub bits_up: f64,
    pub se_up: f64,
    pub bits_down: f64,
    pub se_down: f64,
    pub max_bandwidth_hz: f64,
}

impl LinkCost {
    /// Transmission work in Hz-seconds.
    pub fn load(&self) -> f64 {
        let part = |bits: f64, se: f64| if bits == 0.0 { 0.0 } else { bits / se };
        part(self.bits_up, self.se_up) + part(self.bits_down, self.se_down)
    }

    pub fn delay(&self, bandwidth_hz: f64) -> f64 {
        let load = self.load();
        if load == 0.0 {
            self.fixed_s
        } else {
            self.fixed_s + load / bandwidth_hz
        }
    }

    pub fn gradient(&self, bandwidth_hz: f64) -> f64 {
        -self.load() / (bandwidth_hz * bandwidth_hz)
    }
}

/// Bandwidth-dependent cost of each device, matching [`round_delay`] at any
/// bandwidth. Under `SequentialQueue` the server term is the unqueued
/// full-clock service time.
pub fn link_costs(
    devices: &[DeviceProfile],
    betas: (f64, f64),
    profile: &ModelProfile,
    split: &SplitConfig,
    channel: &ChannelState,
    server: &ServerProfile,
) -> Result<Vec<LinkCost>> {
    let payload = payload_sizes(profile, split);
    let k = split.local_epochs as f64;
    devices
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let link = LinkPlan { beta_up: betas.0, beta_down: betas.1, bandwidth_hz: d.max_bandwidth_hz };
            let at_cap = round_delay(d, i, &link, profile, split, channel, server, devices.len())?;
            let fixed = at_cap.td + at_cap.cc + at_cap.sc + at_cap.du;
            let se_up = (1.0 + channel.snr_up[i]).log2();
            let se_down = (1.0 + channel.snr_down[i]).log2();
            let bits_up = k * betas.0 * payload.activation as f64 * 8.0 + payload.lora_dist as f64 * 8.0;
            let bits_down = k * betas.1 * payload.gradient as f64 * 8.0;
            if (bits_up > 0.0 && se_up <= 0.0) || (bits_down > 0.0 && se_down <= 0.0) {
                return Err(WirelessError::Unreachable { id: d.id, phase: "link" });
            }
            Ok(LinkCost { fixed_s: fixed, bits_up, se_up, bits_down, se_down, max_bandwidth_hz: d.max_bandwidth_hz })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn jetson(id: u32, freq_ghz: f64) -> DeviceProfile {
        DeviceProfile {
            id,
            gpu_freq_hz: freq_ghz * 1e9,
            cores: 256,
            flops_per_cycle: 4,
            max_bandwidth_hz: 10e6,
            snr: SnrModel { nominal_db: 17.0, min_db: 10.0, max_db: 20.0 },
            dataset_size: 6250,
        }
    }

    fn server() -> ServerProfile {
        ServerProfile {
            gpu_freq_hz: 3e9,
            cores: 2048,
            flops_per_cycle: 4,
            total_bandwidth_hz: 30e6,
            broadcast_bandwidth_hz: 30e6,
            broadcast_snr_db: 17.0,
            share_policy: SharePolicy::EqualShare,
        }
    }

    fn split(cut: u64) -> SplitConfig {
        SplitConfig { cut_layer: cut, batch_size: 64, local_epochs: 1, rounds: 20 }
    }

    fn link(b: f64) -> LinkPlan {
        LinkPlan { beta_up: 0.05, beta_down: 0.05, bandwidth_hz: b }
    }

    #[test]
    fn rates_and_compute() {
        assert_eq!(link_rate(1.0, 1.0), 1.0);
        assert_eq!(link_rate(5.0, 0.0), 0.0);
        assert_eq!(link_rate(10e6, 15.0), 40e6);
        assert_eq!(compute_delay(0.0, 1e9, 1, 1), 0.0);
        assert_eq!(compute_delay(1e9, 1e9, 1, 1), 1.0);
        assert!((db_to_linear(10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_matches_hand_evaluation() {
        let profile = ModelProfile::vit_base(16);
        let s = split(5);
        let dev = jetson(0, 1.0);
        let devices = vec![dev.clone(); 4];
        let ch = ChannelState::nominal(&devices, 2);
        let d = round_delay(&dev, 0, &link(5e6), &profile, &s, &ch, &server(), 4).unwrap();
        let snr = 10f64.powf(1.7);
        let up = 5e6 * (1.0 + snr).log2();
        let act_bits = 4.0 * 64.0 * 197.0 * 768.0 * 8.0;
        let lora_bits = 4.0 * 2.0 * 5.0 * 64.0 * 768.0 * 16.0 * 8.0;
        assert!((d.it - 0.05 * act_bits / up).abs() < 1e-12 * d.it);
        assert!((d.gt - d.it).abs() < 1e-12 * d.it);
        assert!((d.lt - lora_bits / up).abs() < 1e-12 * d.lt);
        assert!((d.td - lora_bits / (30e6 * (1.0 + snr).log2())).abs() < 1e-12 * d.td);
        assert!((d.cc - flops_device_fp(&profile, &s) / (1e9 * 1024.0)).abs() < 1e-12 * d.cc);
        let server_flops = flops_server_fp(&profile, &s) + flops_server_bp(&profile, &s);
        assert!((d.sc - server_flops / (3e9 / 4.0 * 2048.0 * 4.0)).abs() < 1e-12 * d.sc);
        assert!((d.total - d.phases().iter().sum::<f64>()).abs() < 1e-12 * d.total);

        let first = ChannelState::nominal(&devices, 1);
        let d1 = round_delay(&dev, 0, &link(5e6), &profile, &s, &first, &server(), 4).unwrap();
        assert!(d1.td > 100.0 * d.td);
    }

    #[test]
    fn local_epochs_scale_inner_phases_only() {
        let profile = ModelProfile::vit_base(16);
        let dev = jetson(0, 1.2);
        let ch = ChannelState::nominal(std::slice::from_ref(&dev), 3);
        let one = round_delay(&dev, 0, &link(4e6), &profile, &split(4), &ch, &server(), 1).unwrap();
        let mut s3 = split(4);
        s3.local_epochs = 3;
        let three = round_delay(&dev, 0, &link(4e6), &profile, &s3, &ch, &server(), 1).unwrap();
        assert_eq!(three.td, one.td);
        assert_eq!(three.lt, one.lt);
        for (a, b) in [(one.cc, three.cc), (one.it, three.it), (one.sc, three.sc), (one.gt, three.gt), (one.du, three.du)] {
            assert!((3.0 * a - b).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn zero_rate_is_unreachable() {
        let profile = ModelProfile::vit_base(16);
        let dev = jetson(7, 1.0);
        let ch = ChannelState::nominal(std::slice::from_ref(&dev), 2);
        let err = round_delay(&dev, 0, &link(0.0), &profile, &split(5), &ch, &server(), 1).unwrap_err();
        assert!(matches!(err, WirelessError::Unreachable { id: 7, .. }));
        assert!(round_delay(&dev, 0, &link(11e6), &profile, &split(5), &ch, &server(), 1).is_err());
    }

    #[test]
    fn link_cost_reproduces_round_delay() {
        let profile = ModelProfile::vit_base(16);
        let devices: Vec<_> = (0..3).map(|i| jetson(i, 0.6 + 0.3 * i as f64)).collect();
        let ch = ChannelState::draw(&devices, 11, 4);
        let costs = link_costs(&devices, (0.07, 0.05), &profile, &split(6), &ch, &server()).unwrap();
        for (i, (d, c)) in devices.iter().zip(&costs).enumerate() {
            for b in [1e6, 3.3e6, 9e6] {
                let l = LinkPlan { beta_up: 0.07, beta_down: 0.05, bandwidth_hz: b };
                let want = round_delay(d, i, &l, &profile, &split(6), &ch, &server(), 3).unwrap().total;
                assert!((c.delay(b) - want).abs() < 1e-9 * want);
            }
        }
    }

    #[test]
    fn sequential_queue_serializes_server() {
        let profile = ModelProfile::vit_base(16);
        let devices: Vec<_> = (0..3).map(|i| jetson(i, 1.0)).collect();
        let ch = ChannelState::nominal(&devices, 2);
        let mut srv = server();
        srv.share_policy = SharePolicy::SequentialQueue;
        let links = vec![link(5e6); 3];
        let delays = round_delays(&devices, &links, &profile, &split(5), &ch, &srv).unwrap();
        let service = (flops_server_fp(&profile, &split(5)) + flops_server_bp(&profile, &split(5))) / srv.throughput();
        for (n, d) in delays.iter().enumerate() {
            assert!((d.sc - (n + 1) as f64 * service).abs() < 1e-9 * d.sc);
        }
    }

    #[test]
    fn channel_draws_are_seeded_and_in_range() {
        let devices: Vec<_> = (0..5).map(|i| jetson(i, 1.0)).collect();
        let a = ChannelState::draw(&devices, 3, 2);
        assert_eq!(a, ChannelState::draw(&devices, 3, 2));
        assert_ne!(a, ChannelState::draw(&devices, 3, 3));
        for s in a.snr_up.iter().chain(&a.snr_down) {
            assert!(*s >= 10.0 - 1e-9 && *s <= 100.0 + 1e-9);
        }
    }
}
