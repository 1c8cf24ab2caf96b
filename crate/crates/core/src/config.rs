//! TOML protocol configuration with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{LearnerConfig, LearnerKind};
use crate::error::{Error, Result};
use crate::evm::EvmHyperParams;
use crate::features::ClassId;
use crate::metrics::REJECT_ALL;
use crate::perceptron::TrainConfig;
use crate::protocol::{Mode, PhaseSchedule, RunSettings, Threshold, MIN_SAMPLES_PER_CLASS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerChoice {
    Ffil,
    Afil,
    Ffowl,
    Afowl,
}

impl LearnerChoice {
    pub fn kind(self) -> LearnerKind {
        match self {
            LearnerChoice::Ffil | LearnerChoice::Ffowl => LearnerKind::Evm,
            LearnerChoice::Afil | LearnerChoice::Afowl => LearnerKind::Perceptron,
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            LearnerChoice::Ffil | LearnerChoice::Afil => Mode::Incremental,
            LearnerChoice::Ffowl | LearnerChoice::Afowl => Mode::OpenWorld,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub new_classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub mode: Mode,
    pub learner: LearnerChoice,
    #[serde(default)]
    pub seed: u64,
    /// Fixed threshold. Wins over `target_uda` when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_uda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<PathBuf>,
    pub initial_classes: Vec<ClassId>,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub evm: EvmHyperParams,
    #[serde(default)]
    pub mlp: TrainConfig,
}

impl ProtocolConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides. Keys may be dotted
    /// (`evm.dm=0.5`); values are TOML literals, with bare words taken as strings.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ProtocolConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learner.mode() != self.mode {
            return Err(Error::Config(format!(
                "learner {:?} does not run in {:?} mode",
                self.learner, self.mode
            )));
        }
        if let Some(d) = self.delta {
            if !((0.0..=1.0).contains(&d) || d == REJECT_ALL) {
                return Err(Error::Config(format!("delta must lie in [0, 1], got {d}")));
            }
        }
        if let Some(t) = self.target_uda {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target_uda must lie in [0, 1], got {t}")));
            }
            if self.mode == Mode::Incremental {
                return Err(Error::Config("target_uda needs openworld mode".into()));
            }
        }
        if self.mode == Mode::OpenWorld && self.delta.is_none() && self.target_uda.is_none() {
            return Err(Error::Config("openworld mode needs delta or target_uda".into()));
        }
        self.evm.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mlp.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> PhaseSchedule {
        PhaseSchedule {
            initial_classes: self.initial_classes.clone(),
            phases: self.phases.iter().map(|p| p.new_classes.clone()).collect(),
            mode: self.mode,
        }
    }

    pub fn threshold(&self) -> Threshold {
        match (self.delta, self.target_uda) {
            (Some(d), _) => Threshold::Fixed(d),
            (None, Some(t)) => Threshold::TargetUda(t),
            (None, None) => Threshold::Fixed(0.0),
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        let mut mlp = self.mlp.clone();
        mlp.rng_seed = self.seed;
        LearnerConfig { evm: self.evm, mlp }
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            learner: self.learner.kind(),
            config: self.learner_config(),
            threshold: self.threshold(),
            seed: self.seed,
            min_samples_per_class: MIN_SAMPLES_PER_CLASS,
        }
    }

    /// Fully resolved config (defaults filled in) as TOML; stable for equal configs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {spec:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("bad override key {key:?}")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
