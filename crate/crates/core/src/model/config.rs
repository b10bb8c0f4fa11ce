use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::PlateLayout;

/// Architecture hyperparameters shared by every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub vision_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub plate_len: usize,
    pub cmrm_layers: usize,
    pub cmrm_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 96,
            patch: 8,
            vision_dim: 64,
            model_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            mlp_ratio: 2,
            plate_len: 7,
            cmrm_layers: 2,
            cmrm_heads: 4,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the end-to-end gradient check.
    pub fn micro() -> Self {
        Self {
            image_height: 8,
            image_width: 24,
            patch: 4,
            vision_dim: 16,
            model_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            plate_len: 3,
            cmrm_layers: 1,
            cmrm_heads: 2,
        }
    }

    /// Plate geometry matching the model's input size and plate length.
    pub fn layout(&self) -> PlateLayout {
        PlateLayout {
            height: self.image_height,
            width: self.image_width,
            len: self.plate_len,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch,
            self.image_width / self.patch,
        )
    }

    /// Visual token count `N`.
    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    /// Decoder input length: visual prefix, PROMPT, BOS and the label.
    pub fn seq_len(&self) -> usize {
        self.tokens() + 2 + self.plate_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0
            || !self.image_height.is_multiple_of(self.patch)
            || !self.image_width.is_multiple_of(self.patch)
        {
            return bad(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height,
                self.image_width,
                p = self.patch
            ));
        }
        if self.heads == 0
            || !self.vision_dim.is_multiple_of(self.heads)
            || !self.model_dim.is_multiple_of(self.heads)
        {
            return bad(format!(
                "{} heads do not divide vision dim {} and model dim {}",
                self.heads, self.vision_dim, self.model_dim
            ));
        }
        if self.cmrm_heads == 0 || !self.model_dim.is_multiple_of(self.cmrm_heads) {
            return bad(format!(
                "{} slot heads do not divide model dim {}",
                self.cmrm_heads, self.model_dim
            ));
        }
        if self.plate_len == 0 || self.mlp_ratio == 0 || self.vision_dim < 2 || self.model_dim < 2 {
            return bad("plate length, MLP ratio and widths must be positive".into());
        }
        Ok(())
    }
}

/// Decoder projections an adapter may wrap.
pub const LORA_PROJECTIONS: [&str; 6] = ["q", "k", "v", "o", "fc1", "fc2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 1.0,
            targets: ["q", "k", "v", "o"].map(String::from).to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 || self.rank >= model.model_dim {
            return Err(Error::Config(format!(
                "adapter rank {} must be in 1..{}",
                self.rank, model.model_dim
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        if let Some(t) = self
            .targets
            .iter()
            .find(|t| !LORA_PROJECTIONS.contains(&t.as_str()))
        {
            return Err(Error::Config(format!(
                "unknown adapter target {t:?}; expected one of {LORA_PROJECTIONS:?}"
            )));
        }
        Ok(())
    }
}
