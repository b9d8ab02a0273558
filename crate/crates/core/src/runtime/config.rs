use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AprConfig;
use crate::ddpg::TrainConfig;
use crate::dsse::DsseConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::scenario::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Grid points for the oracle search over [−1, 1].
    pub oracle_points: usize,
    /// Held-out scenarios streamed through the online loop; 0 uses all.
    pub online_steps: usize,
    /// PV scaling applied to the online stream.
    pub online_pv_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            oracle_points: 201,
            online_steps: 0,
            online_pv_scale: 1.0,
        }
    }
}

/// Everything a pipeline command needs. Relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub feeder: PathBuf,
    pub seed: u64,
    pub train_fraction: f64,
    pub scenarios: GenConfig,
    pub dsse: DsseConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub apr: AprConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            feeder: PathBuf::from("feeders/synth34.json"),
            seed: 0,
            train_fraction: 0.8,
            scenarios: GenConfig::default(),
            dsse: DsseConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            apr: AprConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Stage tags mixed into the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Scenarios,
    Split,
    Pairs,
    Dsse,
    Agent,
    Eval,
    Online,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.feeder.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.feeder = dir.join(&cfg.feeder);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.eval.online_pv_scale >= 0.0) {
            return Err(Error::Config("online_pv_scale must be >= 0".into()));
        }
        self.scenarios.validate()?;
        self.dsse.validate()?;
        self.env.validate()?;
        self.train.validate()?;
        if self.train.horizon != self.env.horizon {
            return Err(Error::Config(format!(
                "train.horizon {} and env.horizon {} differ",
                self.train.horizon, self.env.horizon
            )));
        }
        Ok(())
    }

    /// Seed for one pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        splitmix(self.seed ^ splitmix(stage as u64 + 1))
    }

    /// DSSE config with its seed replaced by the stage seed.
    pub fn dsse_config(&self) -> DsseConfig {
        DsseConfig {
            seed: self.stage_seed(Stage::Dsse) ^ self.dsse.seed,
            ..self.dsse.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Agent) ^ self.train.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn nested_fields_are_addressable() {
        let cfg = RunConfig::from_toml_str(
            "seed = 7\n[train]\ntau = 0.01\nactor_hidden = [64, 32]\n[env.reward]\nv_max = 1.04\n[apr]\nwindow = 10\nreference_reward = -0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.tau, 0.01);
        assert_eq!(cfg.env.reward.v_max, 1.04);
        assert_eq!(cfg.apr.window, 10);
        assert_eq!(cfg.apr.reference_reward, Some(-0.5));
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("[train]\ntypo = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.stage_seed(Stage::Dsse), cfg.stage_seed(Stage::Agent));
        let other = RunConfig { seed: 1, ..cfg.clone() };
        assert_ne!(cfg.stage_seed(Stage::Dsse), other.stage_seed(Stage::Dsse));
    }
}
