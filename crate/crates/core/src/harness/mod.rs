//! Scenario runner, feasibility matrix and reports.

pub mod config;
pub mod matrix;
pub mod report;
pub mod testbed;

pub use config::{run_scenario, ConfigError, ScenarioConfig};
pub use report::{FeasibilityReport, Format};
pub use testbed::{Mitigations, SecurityConfig, Testbed, TestbedConfig, ThreatModel};
