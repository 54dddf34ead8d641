use std::path::{Path, PathBuf};

use fip_core::finetune_eval::FinetuneConfig;
use fip_core::fip_train::{FipConfig, TrainConfig};
use fip_core::model::ModelConfig;
use fip_core::storage::read_json;
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Everything a training run needs, as one JSON document.
///
/// Missing sections fall back to defaults; unknown keys anywhere are rejected.
/// A top-level `seed` overrides the seeds of the `train` and `finetune` sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub fip: FipConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            fip: FipConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            data: None,
            out: None,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                if !p.is_file() {
                    return Err(Usage(format!("--config: {} does not exist", p.display())).into());
                }
                read_json(p).map_err(|e| Usage(format!("--config: {e}")).into())
            }
        }
    }

    /// Applies the seed override, spells out uniform-mode values and validates.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.finetune.seed = s;
        }
        self.seed = Some(self.train.seed);
        self.model = self.fip.resolve_model(&self.model);
        self.fip = self.fip.resolved();
        let check = || -> fip_core::Result<()> {
            self.model.validate()?;
            self.fip.validate()?;
            self.train.validate()?;
            self.finetune.optimizer().validate()
        };
        check().map_err(|e| Usage(e.to_string()))?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fip_core::fip_train::Mode;

    #[test]
    fn sections_default_and_unknown_keys_fail() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(c.model, ModelConfig::desk());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fip": {"p_targt": 0.5}}"#).is_err());
    }

    #[test]
    fn uniform_resolution_equalizes() {
        let mut c = RunConfig::default();
        c.fip.mode = Mode::Uniform;
        let r = c.resolve().unwrap();
        assert_eq!(r.fip.p_target, r.fip.p_other);
        assert_eq!(r.fip.w_target, r.fip.w_other);
        let depths: Vec<usize> = r.model.decoder_layers.values().copied().collect();
        assert!(depths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn seed_override_reaches_both_sections() {
        let c = RunConfig {
            seed: Some(11),
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((c.train.seed, c.finetune.seed), (11, 11));
    }
}
