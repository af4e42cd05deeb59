use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sft_cli::{cmd_calibrate, cmd_plan, cmd_report, cmd_simulate, ScenarioArgs};

#[derive(Parser)]
#[command(name = "sft", version, about = "Plan and simulate split fine-tuning over a shared wireless uplink")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of training rounds.
    #[arg(long)]
    rounds: Option<u64>,
    /// Keeps only the first N devices.
    #[arg(long)]
    devices: Option<usize>,
}

impl Common {
    fn args(&self) -> ScenarioArgs {
        ScenarioArgs { scenario: self.scenario.clone(), seed: self.seed, rounds: self.rounds, devices: self.devices }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Choose cut layer, keep rate, quantization levels and bandwidth.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Cross-check against exhaustive search over the grid.
        #[arg(long)]
        oracle: bool,
    },
    /// Run a full session and write per-round logs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Use a plan.json from `plan` instead of planning again.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Fit the rate predictor and accuracy surface from measurements.
    Calibrate {
        /// CSV with keep_rate, levels and an accuracy and/or beta column.
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Memory, delay and traffic comparison tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Session reports from `simulate` to summarize.
        #[arg(long = "session")]
        sessions: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    Ok(match cli.command {
        Command::Plan { common, oracle } => {
            let (file, paths) = cmd_plan(&common.args(), &common.out, oracle)?;
            let p = &file.plan;
            eprintln!(
                "cut layer {}, keep rate {}, {} levels, beta {:.4}, session delay {:.2} s",
                p.cut_layer, p.keep_rate, p.levels, p.beta, p.objective_s
            );
            if let Some(o) = &file.oracle {
                eprintln!("exhaustive optimum {:.4} s, gap {:+.3}%", o.objective_s, 100.0 * o.relative_gap);
            }
            paths
        }
        Command::Simulate { common, plan } => {
            let (report, paths) = cmd_simulate(&common.args(), plan.as_deref(), &common.out)?;
            eprintln!(
                "{} rounds, {:.2} s, {} bytes up, {} bytes down",
                report.rounds.len(),
                report.total_delay_s,
                report.total_bytes_up,
                report.total_bytes_down
            );
            paths
        }
        Command::Calibrate { measurements, out } => {
            let (cal, paths) = cmd_calibrate(&measurements, &out)?;
            if let Some(s) = &cal.surface {
                eprintln!("surface fit mse {:.6} pp^2", s.fit_mse());
            }
            paths
        }
        Command::Report { common, sessions } => {
            let (report, paths) = cmd_report(&common.args(), &sessions, &common.out)?;
            eprintln!("best reduction against uniform bandwidth: {:.1}%", report.best_reduction_vs_uniform_pct);
            paths
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
