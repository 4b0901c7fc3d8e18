//! Experiment configuration: a TOML file merged over per-environment defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::arm::ArmConfig;
use crate::env::darkzone::DarkZoneConfig;
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterInit};
use crate::planner::{ConstraintSpec, PlannerConfig};
use crate::trackability::TrackTrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Darkzone,
    Arm,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "darkzone" => Ok(EnvKind::Darkzone),
            "arm" => Ok(EnvKind::Arm),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub env: EnvKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub darkzone: DarkZoneConfig,
    pub arm: ArmConfig,
}

/// Trackability data collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub n_rollouts: usize,
    pub length: usize,
    /// Planning horizon used while collecting.
    pub horizon: usize,
    /// Carry at the start of each rollout.
    pub filter_init: FilterInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_rollouts: usize,
    pub length: usize,
    /// Fixed start for the dark-zone task.
    pub start: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per axis of the terminal distance field.
    pub field_resolution: usize,
    /// Cells per axis of the tabulated trackability used by the planner.
    pub map_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvSection,
    pub filter: FilterConfig,
    pub planner: PlannerConfig,
    pub constraint: ConstraintSpec,
    pub collect: CollectConfig,
    pub eval: EvalConfig,
    pub train: TrackTrainConfig,
    pub grid: GridConfig,
}

impl ExperimentConfig {
    pub fn defaults(env: EnvKind) -> Self {
        let experiment = ExperimentSection { env, seed: 0 };
        let grid = GridConfig {
            field_resolution: 100,
            map_resolution: 200,
        };
        match env {
            EnvKind::Darkzone => ExperimentConfig {
                experiment,
                env: EnvSection::default(),
                filter: FilterConfig::darkzone(),
                planner: PlannerConfig::darkzone(),
                constraint: ConstraintSpec::darkzone(),
                collect: CollectConfig {
                    n_rollouts: 500,
                    length: 30,
                    horizon: PlannerConfig::darkzone_collect().horizon,
                    filter_init: FilterInit::Perfect,
                },
                eval: EvalConfig {
                    n_rollouts: 100,
                    length: 50,
                    start: [0.9, 0.5],
                },
                train: TrackTrainConfig::darkzone(),
                grid,
            },
            EnvKind::Arm => ExperimentConfig {
                experiment,
                env: EnvSection::default(),
                filter: FilterConfig::arm(),
                planner: PlannerConfig::arm(),
                constraint: ConstraintSpec::arm(),
                collect: CollectConfig {
                    n_rollouts: 5000,
                    length: 50,
                    horizon: PlannerConfig::arm().horizon,
                    filter_init: FilterInit::Perfect,
                },
                eval: EvalConfig {
                    n_rollouts: 100,
                    length: 200,
                    start: [0.0, 0.0],
                },
                train: TrackTrainConfig::arm(),
                grid: GridConfig {
                    field_resolution: 100,
                    map_resolution: 128,
                },
            },
        }
    }

    /// Parses TOML text over the defaults of the selected environment.
    /// `env_override` takes precedence over `[experiment] env`.
    pub fn from_toml(text: &str, env_override: Option<EnvKind>) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let env = match env_override {
            Some(e) => e,
            None => match user.get("experiment").and_then(|t| t.get("env")) {
                Some(v) => v
                    .as_str()
                    .ok_or_else(|| Error::Config("experiment.env must be a string".into()))?
                    .parse()?,
                None => EnvKind::Darkzone,
            },
        };
        let mut merged = toml::Table::try_from(Self::defaults(env))
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        merge(&mut merged, user);
        let mut cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.experiment.env = env;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, env_override: Option<EnvKind>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, env_override)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.darkzone.validate()?;
        self.env.arm.validate()?;
        self.filter.validate()?;
        self.planner.validate()?;
        self.constraint.validate()?;
        self.train.validate()?;
        if self.collect.horizon == 0 || self.collect.horizon < self.planner.replan_interval {
            return Err(Error::Config(
                "collect.horizon must be >= planner.replan_interval".into(),
            ));
        }
        if self.grid.field_resolution < 2 || self.grid.map_resolution < 2 {
            return Err(Error::Config("grid resolutions must be >= 2".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
