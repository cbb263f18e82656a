//! Scenario files (TOML) and the runner.

use std::path::Path;

use serde::Deserialize;

use crate::attacks::{run_attack, AttackId};
use crate::nvmeof::ClientProfile;
use crate::Widths;

use super::matrix::run_matrix;
use super::report::FeasibilityReport;
use super::{Mitigations, SecurityConfig, Testbed, TestbedConfig, ThreatModel};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown attack {0:?}")]
    UnknownAttack(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthProfile {
    #[default]
    Test,
    Paper,
}

impl WidthProfile {
    pub fn widths(self) -> Widths {
        match self {
            WidthProfile::Test => Widths::TEST,
            WidthProfile::Paper => Widths::PAPER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub profile: ClientProfile,
    pub max_qps: usize,
    pub eavesdrop: bool,
    pub rate_recovery: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            profile: ClientProfile::UserSpaceStyle,
            max_qps: 1024,
            eavesdrop: false,
            rate_recovery: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default)]
    pub widths: WidthProfile,
    #[serde(default = "default_security")]
    pub security: SecurityConfig,
    /// Both models when absent.
    #[serde(default)]
    pub threat_model: Option<ThreatModel>,
    /// Every attack when absent.
    #[serde(default)]
    pub attacks: Option<Vec<String>>,
    #[serde(default)]
    pub matrix: bool,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub mitigations: Mitigations,
}

fn default_security() -> SecurityConfig {
    SecurityConfig::None
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.attack_ids()?;
        if self.topology.max_qps == 0 {
            return Err(ConfigError::Invalid("topology.max_qps must be positive".into()));
        }
        if self.mitigations.per_user_quota == Some(0) {
            return Err(ConfigError::Invalid("mitigations.per_user_quota must be positive".into()));
        }
        Ok(())
    }

    pub fn attack_ids(&self) -> Result<Vec<AttackId>, ConfigError> {
        match &self.attacks {
            None => Ok(AttackId::ALL.to_vec()),
            Some(names) => names
                .iter()
                .map(|n| AttackId::from_name(n).ok_or_else(|| ConfigError::UnknownAttack(n.clone())))
                .collect(),
        }
    }

    pub fn models(&self) -> Vec<ThreatModel> {
        match self.threat_model {
            Some(m) => vec![m],
            None => ThreatModel::ALL.to_vec(),
        }
    }

    pub fn testbed_config(&self) -> TestbedConfig {
        let mut c = TestbedConfig::new(self.widths.widths(), self.seed);
        c.security = self.security;
        c.mitigations = self.mitigations;
        c.profile = self.topology.profile;
        c.max_qps = self.topology.max_qps;
        c.eavesdrop = self.topology.eavesdrop;
        c.rate_recovery = self.topology.rate_recovery;
        c
    }
}

/// Runs the scenario. Matrix mode ignores the attack, model and security
/// selections and covers the full grid.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<FeasibilityReport, ConfigError> {
    cfg.validate()?;
    let base = cfg.testbed_config();
    if cfg.matrix {
        return Ok(run_matrix(&base));
    }
    let mut rows = Vec::new();
    for a in cfg.attack_ids()? {
        for m in cfg.models() {
            let mut tb = Testbed::new(base.clone());
            rows.push(run_attack(&mut tb, a, m, true));
        }
    }
    Ok(FeasibilityReport {
        rows,
        footnotes: Vec::new(),
    })
}
