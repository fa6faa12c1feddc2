//! Run configuration: JSON file, then `UWDT_SEED`, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uwdt_core::eval::DensityLevel;
use uwdt_core::mcts::SearchConfig;
use uwdt_core::nn::{ModelConfig, TrainConfig};
use uwdt_core::uwdt::{DEFAULT_RATIO, DEFAULT_W_MAX};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsSection {
    pub search: SearchConfig,
    pub episodes: usize,
}

impl Default for MctsSection {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            episodes: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UwdtSection {
    pub r: f64,
    pub w_max: f64,
    pub entropy_episodes: usize,
    pub init_from_teacher: bool,
}

impl Default for UwdtSection {
    fn default() -> Self {
        Self {
            r: DEFAULT_RATIO,
            w_max: DEFAULT_W_MAX,
            entropy_episodes: 50,
            init_from_teacher: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub densities: Vec<DensityLevel>,
    pub out_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 20,
            densities: vec![DensityLevel::Low, DensityLevel::Medium, DensityLevel::High],
            out_dir: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Density of the scenarios used for entropy measurement.
    pub density: DensityLevel,
    /// Offset separating entropy-measurement seeds from training seeds.
    pub entropy_seed_offset: u64,
    /// Offset of the evaluation seeds, kept apart from both of the above.
    pub eval_seed_offset: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            density: DensityLevel::Mixed,
            entropy_seed_offset: 1_000_000,
            eval_seed_offset: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub mcts: MctsSection,
    pub model: ModelSection,
    pub uwdt: UwdtSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var("UWDT_SEED") {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("UWDT_SEED={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: uwdt_core::Error| CliError::Config(e.to_string());
        self.mcts.search.validate().map_err(cfg)?;
        self.model.arch.validate().map_err(cfg)?;
        self.model.train.validate().map_err(cfg)?;
        if self.mcts.episodes == 0 || self.eval.episodes == 0 || self.uwdt.entropy_episodes == 0 {
            return Err(CliError::Config("episode counts must be positive".into()));
        }
        if !(self.uwdt.r > 1.0) || !(self.uwdt.w_max >= 1.0) {
            return Err(CliError::Config("uwdt.r must exceed 1 and uwdt.w_max must be at least 1".into()));
        }
        if self.eval.densities.is_empty() {
            return Err(CliError::Config("eval.densities is empty".into()));
        }
        Ok(())
    }

    /// Canonical JSON; the hash in every manifest is taken over these bytes.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.model.train.lr, 1e-5);
        assert_eq!(c.model.train.batch_size, 16);
        assert_eq!(c.model.arch.context, 20);
        assert_eq!(c.uwdt.r, 1.3);
        assert_eq!(c.uwdt.w_max, 1.5);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "model": {"train": {"epochs": 2}}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.train.epochs, 2);
        assert_eq!(c.model.train.lr, 1e-5);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"uwdt": {"ratio": 2}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
