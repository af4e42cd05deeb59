//! End-to-end runs of the `sft` binary and the command functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use sft_cli::commands::{PlanFile, Report};
use sft_cli::scenario::{RateSource, ThresholdPolicy};
use sft_cli::{cmd_calibrate, cmd_plan, cmd_report, cmd_simulate, Scenario, ScenarioArgs};
use sft_core::simulator::SessionReport;
use sft_core::wireless::ChannelState;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/vit_base_8dev.toml")
}

fn sft(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sft")).args(args).output().expect("binary runs")
}

fn write_scenario(dir: &Path, edit: impl FnOnce(&mut Scenario)) -> PathBuf {
    let mut s = Scenario::load(&bundled()).unwrap();
    edit(&mut s);
    let path = dir.join("scenario.toml");
    fs::write(&path, s.to_toml()).unwrap();
    path
}

fn fast(s: &mut Scenario) {
    s.rates = RateSource::Measured { sample_rows: 64, keep_rates: vec![0.05, 0.2, 0.5, 1.0], levels: vec![2, 8, 32] };
    s.simulation.sample_rows = Some(32);
}

#[test]
fn plan_on_bundled_scenario_is_feasible_and_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = sft(&["plan", "--scenario", bundled().to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--oracle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let file: PlanFile = serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert!(file.plan.feasible);
    assert!(file.plan.cut_layer <= file.memory_feasible_max_cut.unwrap());
    assert!(file.device_memory_bytes <= file.memory_cap_bytes);
    let oracle = file.oracle.unwrap();
    assert!(oracle.relative_gap.abs() <= 0.02, "gap {}", oracle.relative_gap);
    let trace = fs::read_to_string(dir.path().join("plan_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,cut_layer,keep_rate,levels,objective_s,lagrangian,lambda_accuracy"));
    assert_eq!(trace.lines().count(), file.plan.iterations + 1);
}

#[test]
fn missing_field_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(bundled()).unwrap().replacen("batch_size = 64\n", "", 1);
    let path = dir.path().join("broken.toml");
    fs::write(&path, text).unwrap();
    let out = sft(&["plan", "--scenario", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_size"), "{err}");
    assert!(!dir.path().join("plan.json").exists());
}

#[test]
fn infeasible_plan_reports_violations_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), |s| {
        fast(s);
        s.memory_cap_bytes = 1 << 20;
    });
    let out = sft(&["plan", "--scenario", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("memory violated"), "{err}");
    let file: PlanFile = serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    assert!(!file.plan.feasible);
    assert_eq!(file.memory_feasible_max_cut, None);
}

#[test]
fn smoke_simulation_and_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), fast);
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = sft(&[
            "simulate", "--scenario", scenario.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
            "--rounds", "1", "--devices", "1", "--seed", seed,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Sha256::digest(fs::read(out_dir.join("report.json")).unwrap())
    };
    assert_eq!(run("a", "5"), run("b", "5"));
    assert_ne!(run("a", "5"), run("c", "6"));
}

#[test]
fn single_device_single_round_equals_one_round_delay() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = ScenarioArgs::new(write_scenario(dir.path(), fast));
    args.rounds = Some(1);
    args.devices = Some(1);
    let (report, _) = cmd_simulate(&args, None, dir.path()).unwrap();
    assert_eq!(report.rounds.len(), 1);
    assert_eq!(report.total_delay_s, report.rounds[0].devices[0].delay.total);
}

// Independent accounting of one session from the per-device log entries:
// every phase from the closed-form cost model, every byte from the payload
// formulas.
mod accounting {
    use super::*;

    pub fn check(s: &Scenario, report: &SessionReport) {
        let m = &s.model;
        let (b, n, d, r, k) = (s.training.batch_size as f64, m.num_tokens as f64, m.embed_dim as f64, m.lora_rank as f64, m.num_classes as f64);
        let (alpha, layers) = (m.bytes_per_param as f64, m.num_layers as f64);
        let l = report.plan.cut_layer as f64;
        let epochs = s.training.local_epochs as f64;
        let block_flops = 24.0 * b * n * d * d + 4.0 * b * n * n * d;
        let cls = b * n * d * k;
        let block_params = 12.0 * d * d + 18.0 * d * r;
        let embed_params = ((m.patch_size * m.patch_size * m.img_channels) as f64 + n + 3.0) * d;
        let psi_init = alpha * b * l * (block_params + embed_params);
        let psi_lora = alpha * 2.0 * l * b * d * r;
        let psi_act = alpha * b * n * d;
        let server_rate = s.server.gpu_freq_hz * (s.server.cores * s.server.flops_per_cycle) as f64 / s.devices.len() as f64;
        let broadcast = s.server.broadcast_bandwidth_hz * (1.0 + 10f64.powf(s.server.broadcast_snr_db / 10.0)).log2();

        let mut session = 0.0;
        let (mut up, mut down) = (0u64, 0u64);
        for round in &report.rounds {
            let ch = ChannelState::draw(&s.devices, s.seed, round.round);
            let mut worst: f64 = 0.0;
            let broadcast_bytes = if round.round == 1 { psi_init } else { psi_lora };
            assert_eq!(round.bytes_down_broadcast as f64, broadcast_bytes);
            down += broadcast_bytes as u64;
            for (i, (log, dev)) in round.devices.iter().zip(&s.devices).enumerate() {
                let dev_rate = dev.gpu_freq_hz * (dev.cores * dev.flops_per_cycle) as f64;
                let se_up = (1.0 + ch.snr_up[i]).log2();
                let se_down = (1.0 + ch.snr_down[i]).log2();
                let bw = log.bandwidth_hz;
                let phases = [
                    broadcast_bytes * 8.0 / broadcast,
                    epochs * (l * block_flops + 2.0 * cls) / dev_rate,
                    epochs * log.beta_up * psi_act * 8.0 / (bw * se_up),
                    epochs * (3.0 * (layers - l) * block_flops + 4.0 * cls) / server_rate,
                    epochs * log.beta_down * psi_act * 8.0 / (bw * se_down),
                    epochs * (2.0 * l * block_flops + 4.0 * cls) / dev_rate,
                    psi_lora * 8.0 / (bw * se_up),
                ];
                let total: f64 = phases.iter().sum();
                assert!((total - log.delay.total).abs() <= 1e-9 * total, "device {i}: {total} vs {}", log.delay.total);
                worst = worst.max(total);

                // Sampled tensors are scaled to the full payload, rounded up.
                for (bytes, beta) in [(log.bytes_up_activation, log.beta_up), (log.bytes_down_gradient, log.beta_down)] {
                    assert!((bytes as f64 - epochs * beta * psi_act).abs() <= epochs + 1e-6 * bytes as f64);
                }
                assert_eq!(log.bytes_up_lora as f64, psi_lora);
                up += log.bytes_up_activation + log.bytes_up_lora;
                down += log.bytes_down_gradient;
            }
            assert!((worst - round.delay_s).abs() <= 1e-9 * worst);
            session += worst;
        }
        assert!((session - report.total_delay_s).abs() <= 1e-9 * session);
        assert_eq!(up, report.total_bytes_up);
        assert_eq!(down, report.total_bytes_down);
    }
}

#[test]
fn eight_device_session_matches_independent_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), |s| {
        fast(s);
        s.training.rounds = 3;
        s.training.local_epochs = 2;
    });
    let scenario = Scenario::load(&path).unwrap();
    let (report, paths) = cmd_simulate(&ScenarioArgs::new(&path), None, dir.path()).unwrap();
    assert_eq!(report.rounds[0].devices.len(), 8);
    accounting::check(&scenario, &report);
    let csv = fs::read_to_string(&paths[1]).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 8);
}

#[test]
fn simulate_reuses_a_written_plan() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), |s| {
        fast(s);
        s.training.rounds = 2;
    });
    let args = ScenarioArgs::new(&path);
    let (plan, plan_paths) = cmd_plan(&args, dir.path(), false).unwrap();
    let (from_file, _) = cmd_simulate(&args, Some(&plan_paths[0]), &dir.path().join("a")).unwrap();
    let (fresh, _) = cmd_simulate(&args, None, &dir.path().join("b")).unwrap();
    assert_eq!(from_file.plan, plan.plan);
    assert_eq!(from_file, fresh);
}

#[test]
fn calibrate_fits_noiseless_cubic_and_interpolates_corners() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("rho,E,accuracy\n");
    for i in 1..=10 {
        for e in [2u16, 4, 8, 16, 32] {
            let (r, q) = (i as f64 * 0.1, e as f64);
            let a = 60.0 + 30.0 * r - 12.0 * r * r + 0.3 * q - 0.004 * q * q + 1.5 * r * r * r + 0.01 * r * q;
            csv.push_str(&format!("{r},{e},{a}\n"));
        }
    }
    let path = dir.path().join("cubic.csv");
    fs::write(&path, csv).unwrap();
    let (cal, paths) = cmd_calibrate(&path, dir.path()).unwrap();
    assert!(cal.predictor.is_none());
    assert!(cal.surface.unwrap().fit_mse() < 1e-12);
    assert_eq!(paths, vec![dir.path().join("surface.json")]);

    let corners = dir.path().join("corners.csv");
    fs::write(&corners, "keep_rate,levels,beta\n0.1,2,0.01\n0.1,32,0.03\n1.0,2,0.2\n1.0,32,0.5\n").unwrap();
    let (cal, _) = cmd_calibrate(&corners, dir.path()).unwrap();
    let samples = cal.predictor.unwrap().samples;
    let predictor = sft_core::compression::RatePredictor::calibrate(&samples).unwrap();
    for s in &samples {
        assert_eq!(predictor.predict(s.keep_rate, s.levels as f64), s.beta);
    }
}

#[test]
fn calibrated_files_feed_back_into_a_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let gen = sft_core::compression::SyntheticAccuracy::default();
    let mut csv = String::from("keep_rate,levels,accuracy,beta\n");
    for i in 1..=20 {
        for e in [2u16, 4, 8, 16, 32] {
            let r = i as f64 * 0.05;
            csv.push_str(&format!("{r},{e},{},{}\n", gen.mean(r, e as f64), r * (0.03 + 0.002 * e as f64)));
        }
    }
    let path = dir.path().join("m.csv");
    fs::write(&path, csv).unwrap();
    let (cal, _) = cmd_calibrate(&path, dir.path()).unwrap();
    assert!(cal.surface.unwrap().fit_mse() <= 0.26);

    let scenario = write_scenario(dir.path(), |s| {
        s.rates = RateSource::File { path: "predictor.json".into() };
        s.accuracy.surface = sft_cli::scenario::SurfaceSource::File { path: "surface.json".into() };
        s.accuracy.threshold = ThresholdPolicy::Absolute { percent: 84.0 };
    });
    let (plan, _) = cmd_plan(&ScenarioArgs::new(scenario), &dir.path().join("p"), true).unwrap();
    assert!(plan.plan.feasible);
    assert_eq!(plan.accuracy_threshold_percent, 84.0);
}

#[test]
fn calibrate_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "keep_rate,levels,beta\n0.1,2,0.01\n0.1,x,0.03\n").unwrap();
    let err = format!("{:#}", cmd_calibrate(&path, dir.path()).unwrap_err());
    assert!(err.contains("record 2"), "{err}");
    fs::write(&path, "keep_rate,levels,beta\n0.1,2,0.01\n0.5,2,\n").unwrap();
    assert!(cmd_calibrate(&path, dir.path()).is_err());
}

#[test]
fn report_tables_show_memory_ratio_compression_and_dominance() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), fast);
    let args = ScenarioArgs::new(&path);
    let (session, _) = cmd_simulate(&{
        let mut a = args.clone();
        a.rounds = Some(1);
        a
    }, None, &dir.path().join("sim"))
    .unwrap();
    let (report, paths) = cmd_report(&args, &[dir.path().join("sim/report.json")], dir.path()).unwrap();
    let reference = report.memory.iter().find(|r| r.cut_layer == 5).unwrap();
    assert!((reference.baseline_ratio - 2.39).abs() <= 0.15 * 2.39, "{}", reference.baseline_ratio);
    let compressed = report.overhead.iter().find(|r| r.scheme == "compressed_reference").unwrap();
    assert!(compressed.cut_traffic_ratio >= 10.0, "{}", compressed.cut_traffic_ratio);
    assert!(report.optimized_never_worse);
    assert!(!report.delay.is_empty());
    assert_eq!(report.sessions[0].total_delay_s, session.total_delay_s);
    let back: Report = serde_json::from_str(&fs::read_to_string(dir.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(paths.len(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenarios_round_trip_through_text(
        seed in any::<u64>(),
        cap in 1u64..u64::MAX / 2,
        freq in 1e8f64..5e9,
        snr in -5.0f64..40.0,
        rounds in 1u64..100,
        margin in 0.0f64..10.0,
        lr in 1e-6f32..1.0,
    ) {
        let mut s = Scenario::load(&bundled()).unwrap();
        s.seed = seed;
        s.memory_cap_bytes = cap;
        s.devices[2].gpu_freq_hz = freq;
        s.devices[5].snr.nominal_db = snr.clamp(s.devices[5].snr.min_db, s.devices[5].snr.max_db);
        s.training.rounds = rounds;
        s.accuracy.threshold = ThresholdPolicy::BelowBest { margin_pp: margin };
        s.simulation.lr_device = lr;
        s.simulation.sample_rows = if seed % 2 == 0 { None } else { Some(1 + (seed % 500) as usize) };
        let back = Scenario::from_toml(&s.to_toml(), Path::new("x.toml")).unwrap();
        prop_assert_eq!(back, s);
    }
}
