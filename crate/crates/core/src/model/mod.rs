//! The recognition model: vision encoder, projector, optional slot module,
//! and the prefix decoder with optional adapters.

pub mod cmrm;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod lora;

pub use config::{LoraConfig, ModelConfig};
pub use layers::Graph;
pub use lora::Mode;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{derive_rng, streams};
use crate::synth::GrayImage;
use crate::tensor::{Tensor, Var};

/// Stream for slot-module initialisation, kept apart from the backbone so
/// adding the module never changes backbone weights.
const CMRM_INIT: u64 = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub lora: LoraConfig,
    pub params: ParamStore,
}

impl Model {
    /// Encoder, projector and decoder; no slot module, no adapters.
    pub fn backbone(config: ModelConfig, lora: LoraConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        lora.validate(&config)?;
        let mut rng = derive_rng(seed, streams::INIT);
        let mut params = ParamStore::new();
        encoder::init_encoder(&mut params, &config, &mut rng);
        decoder::init_decoder(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            lora,
            params,
        })
    }

    pub fn has_cmrm(&self) -> bool {
        self.params.contains(cmrm::SLOTS)
    }

    pub fn has_adapters(&self) -> bool {
        self.params.names().any(lora::is_lora_param)
    }

    pub fn add_cmrm(&mut self, seed: u64) -> Result<()> {
        if self.has_cmrm() {
            return Err(Error::Config("slot module is already present".into()));
        }
        cmrm::init_cmrm(
            &mut self.params,
            &self.config,
            &mut derive_rng(seed, CMRM_INIT),
        );
        Ok(())
    }

    pub fn attach_adapters(&mut self, seed: u64) -> Result<usize> {
        let mut rng = derive_rng(seed, streams::ADAPTER_INIT);
        lora::attach_adapters(&mut self.params, &self.config, &self.lora, &mut rng)
    }

    /// Adapter-free copy with every low-rank update folded into its weight.
    pub fn merged(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            lora: self.lora.clone(),
            params: lora::merge_adapters(&self.params, &self.config, &self.lora)?,
        })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params, self.lora.scale())
    }

    pub fn frozen_graph(&self) -> Graph<'_> {
        Graph::frozen(&self.params, self.lora.scale())
    }

    pub fn patchify(&self, images: &[&GrayImage]) -> Result<Tensor> {
        encoder::patchify(images, &self.config)
    }

    /// Projected visual tokens `H`, `[B·N × D]`.
    pub fn visual_tokens(&self, g: &mut Graph, patches: Tensor) -> Result<Var> {
        let batch = patches.rows() / self.config.tokens();
        let p = g.constant(patches);
        let v = encoder::encode(g, &self.config, p, batch)?;
        encoder::project(g, v)
    }

    /// `H'`: slot injection when the module is present, otherwise `H`.
    pub fn condition(&self, g: &mut Graph, h: Var) -> Result<Var> {
        if !self.has_cmrm() {
            return Ok(h);
        }
        let batch = g.value(h).rows() / self.config.tokens();
        cmrm::apply(g, &self.config, h, batch)
    }

    /// Teacher-forced loss given projected tokens.
    pub fn loss_from_tokens(
        &self,
        g: &mut Graph,
        h: Var,
        labels: &[Vec<usize>],
        include_eos: bool,
    ) -> Result<Var> {
        let hp = self.condition(g, h)?;
        let logits = decoder::forward_teacher_forced(g, &self.config, hp, labels)?;
        decoder::loss(g, logits, labels, include_eos)
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        images: &[&GrayImage],
        labels: &[Vec<usize>],
        include_eos: bool,
    ) -> Result<Var> {
        let h = self.visual_tokens(g, self.patchify(images)?)?;
        self.loss_from_tokens(g, h, labels, include_eos)
    }

    /// Teacher-forced logits for a batch, as plain values.
    pub fn logits(&self, images: &[&GrayImage], labels: &[Vec<usize>]) -> Result<Tensor> {
        let mut g = self.frozen_graph();
        let h = self.visual_tokens(&mut g, self.patchify(images)?)?;
        let hp = self.condition(&mut g, h)?;
        let l = decoder::forward_teacher_forced(&mut g, &self.config, hp, labels)?;
        Ok(g.value(l).clone())
    }

    /// Projected tokens for a batch, as plain values.
    pub fn tokens_of(&self, images: &[&GrayImage]) -> Result<Tensor> {
        let mut g = self.frozen_graph();
        let h = self.visual_tokens(&mut g, self.patchify(images)?)?;
        Ok(g.value(h).clone())
    }

    pub fn predict_from_tokens(&self, h: Tensor) -> Result<Vec<String>> {
        let batch = h.rows() / self.config.tokens();
        let mut g = self.frozen_graph();
        let h = g.constant(h);
        let hp = self.condition(&mut g, h)?;
        decoder::generate_greedy(&mut g, &self.config, hp, batch)
    }

    /// Greedy plate strings for a batch of images.
    pub fn predict(&self, images: &[&GrayImage]) -> Result<Vec<String>> {
        let mut g = self.frozen_graph();
        let h = self.visual_tokens(&mut g, self.patchify(images)?)?;
        let hp = self.condition(&mut g, h)?;
        decoder::generate_greedy(&mut g, &self.config, hp, images.len())
    }

    /// Final-layer slot attention maps of one image.
    pub fn slot_attention(&self, image: &GrayImage) -> Result<cmrm::AttentionExport> {
        if !self.has_cmrm() {
            return Err(Error::Config("model has no slot module".into()));
        }
        let mut g = self.frozen_graph();
        let h = self.visual_tokens(&mut g, self.patchify(&[image])?)?;
        let maps = cmrm::slot_attention(&mut g, &self.config, h, 1)?;
        Ok(cmrm::AttentionExport::new(
            maps.into_iter().next().expect("one image"),
            self.config.grid(),
        ))
    }
}
