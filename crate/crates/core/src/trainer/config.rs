use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LoraConfig, Mode, ModelConfig};
use crate::synth::dataset::load_dataset;
use crate::synth::{Dataset, Profile};

/// Published optimiser settings for the full-scale system. The toy
/// defaults below differ; these stay as the reference point.
pub mod reference {
    pub const LR: f64 = 1e-4;
    pub const EPOCHS: usize = 20;
    pub const BATCH_SIZE: usize = 16;
    pub const LORA_RANK: usize = 64;
    pub const LORA_ALPHA: f64 = 16.0;
}

/// JSON schema of a run configuration file.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../../schemas/run_config.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak rate for encoder, projector and decoder during pretraining.
    pub lr_backbone: f64,
    pub lr_lora: f64,
    pub lr_cmrm: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Count the end-of-sequence prediction in the loss.
    pub include_eos: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_lora: 5e-3,
            lr_cmrm: 5e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            epochs: 15,
            batch_size: 32,
            include_eos: true,
        }
    }
}

/// Where data comes from. Paths win over in-memory generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<String>,
    pub eval: Option<String>,
    pub train_count: usize,
    pub eval_count: usize,
    pub train_profile: Profile,
    pub eval_profile: Profile,
    pub train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl DataConfig {
    /// Loads the split from its directory when one is configured, otherwise
    /// generates it in memory from count, seed and profile.
    pub fn dataset(&self, split: Split, model: &ModelConfig) -> Result<Dataset> {
        let (path, count, seed, profile) = match split {
            Split::Train => (
                &self.train,
                self.train_count,
                self.train_seed,
                self.train_profile,
            ),
            Split::Eval => (
                &self.eval,
                self.eval_count,
                self.eval_seed,
                self.eval_profile,
            ),
        };
        let ds = match path {
            Some(dir) => load_dataset(Path::new(dir))?.1,
            None => Dataset::generate(count, seed, profile, &model.layout())?,
        };
        if let Some(img) = ds
            .images
            .iter()
            .find(|i| i.height != model.image_height || i.width != model.image_width)
        {
            return Err(Error::Config(format!(
                "dataset images are {}x{} but the model expects {}x{}",
                img.height, img.width, model.image_height, model.image_width
            )));
        }
        Ok(ds)
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            train_count: 5000,
            eval_count: 1000,
            train_profile: Profile::EvalHard,
            eval_profile: Profile::EvalHard,
            train_seed: 1001,
            eval_seed: 2002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub mode: Mode,
    pub seed: u64,
}

impl RunConfig {
    /// Backbone pretraining on clean renders.
    pub fn pretrain() -> Self {
        Self {
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            optim: OptimConfig {
                lr_backbone: 2e-3,
                epochs: 12,
                ..OptimConfig::default()
            },
            data: DataConfig {
                train_count: 4000,
                eval_count: 2000,
                train_profile: Profile::Clean,
                eval_profile: Profile::Clean,
                train_seed: 11,
                eval_seed: 12,
                ..DataConfig::default()
            },
            mode: Mode::Pretrain,
            seed: 0,
        }
    }

    /// Adaptation of a pretrained backbone on degraded plates.
    pub fn adapt(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate(&self.model)?;
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&o.warmup_frac) {
            return Err(Error::Config("warmup fraction must lie in [0, 1]".into()));
        }
        let rates = [
            o.lr_backbone,
            o.lr_lora,
            o.lr_cmrm,
            o.lr_min,
            o.eps,
            o.weight_decay,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(
                "optimizer rates must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.mode.uses_cmrm() && self.model.cmrm_layers == 0 {
            return Err(Error::Config(format!(
                "mode {} needs at least one slot cross-attention layer",
                self.mode
            )));
        }
        Ok(())
    }

    /// Sorted-key JSON with no whitespace; the hashing input.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        serde_json::to_string(&v).expect("value serialises")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            mode: Mode::D,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_round_trips_and_sorts_keys() {
        let c = RunConfig::pretrain();
        let j = c.canonical_json();
        assert!(!j.contains(' ') && !j.contains('\n'));
        assert!(j.find("\"data\"").unwrap() < j.find("\"model\"").unwrap());
        let back = RunConfig::from_json(&j).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["bogus"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut c = RunConfig::default();
        c.model.cmrm_layers = 0;
        assert!(c.validate().is_err());
        c.mode = Mode::B;
        c.validate().unwrap();
    }

    #[test]
    fn toy_rank_keeps_the_reference_ratio() {
        let l = LoraConfig::default();
        assert_eq!(
            l.scale(),
            reference::LORA_ALPHA / reference::LORA_RANK as f64
        );
    }
}
