//! Scenario loading and the `plan`, `simulate`, `calibrate` and `report`
//! subcommands behind the `sft` binary.

pub mod commands;
pub mod output;
pub mod scenario;

pub use commands::{cmd_calibrate, cmd_plan, cmd_report, cmd_simulate, ScenarioArgs};
pub use scenario::{Scenario, ScenarioError};
