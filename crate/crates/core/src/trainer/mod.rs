//! Backbone pretraining, per-mode adaptation and deterministic resumption.

pub mod checkpoint;
pub mod config;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{Checkpoint, Cursor, OptimizerState};
pub use config::{DataConfig, OptimConfig, RunConfig, Split, RUN_CONFIG_SCHEMA};

use crate::error::{Error, Result};
use crate::model::cmrm::is_cmrm_param;
use crate::model::decoder::Vocab;
use crate::model::lora::{apply_freeze, is_lora_param};
use crate::model::{Mode, Model};
use crate::rng::{derive_rng, derive_seed, streams};
use crate::synth::{Dataset, GrayImage};
use crate::tensor::optim::{AdamW, AdamWConfig, LrSchedule, ParamGroup};
use crate::tensor::{Tensor, TensorError};

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mode: Mode,
    pub wall_ms: f64,
}

impl StepLog {
    /// Everything except the wall-clock time, which is the only field
    /// that legitimately differs between identical runs.
    pub fn deterministic_part(&self) -> (u64, u64, u64, Mode) {
        (self.step, self.lr.to_bits(), self.loss.to_bits(), self.mode)
    }
}

/// Images with their encoded labels.
pub struct Samples<'a> {
    pub images: Vec<&'a GrayImage>,
    pub labels: Vec<Vec<usize>>,
}

impl<'a> Samples<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self> {
        Ok(Self {
            images: ds.images.iter().collect(),
            labels: ds
                .labels
                .iter()
                .map(|l| Vocab::encode(l))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size) as u64
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_rng(derive_seed(seed, streams::SHUFFLE), epoch));
    idx
}

fn param_groups(model: &Model, cfg: &RunConfig) -> Vec<ParamGroup> {
    let o = &cfg.optim;
    let trainable = model.params.trainable_names();
    let pick = |f: &dyn Fn(&str) -> bool| {
        trainable
            .iter()
            .filter(|n| f(n))
            .cloned()
            .collect::<Vec<_>>()
    };
    let groups = [
        (
            o.lr_backbone,
            pick(&|n| !is_lora_param(n) && !is_cmrm_param(n)),
        ),
        (o.lr_lora, pick(&|n| is_lora_param(n))),
        (o.lr_cmrm, pick(&|n| is_cmrm_param(n))),
    ];
    groups
        .into_iter()
        .filter(|(_, names)| !names.is_empty())
        .map(|(lr_peak, names)| ParamGroup {
            lr_peak,
            weight_decay: o.weight_decay,
            names,
        })
        .collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    optimizer: AdamW,
    cursor: Cursor,
    steps_per_epoch: u64,
    /// Projected tokens per sample when the encoder and projector are frozen.
    token_cache: Option<Vec<Tensor>>,
    pub metrics: std::collections::BTreeMap<String, serde_json::Value>,
}

impl Trainer {
    fn build(config: RunConfig, model: Model, train_len: usize) -> Result<Self> {
        config.validate()?;
        let steps_per_epoch = steps_per_epoch(train_len, config.optim.batch_size);
        let total = steps_per_epoch * config.optim.epochs as u64;
        let o = &config.optim;
        let adam = AdamWConfig {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            lr_min: o.lr_min,
            schedule: LrSchedule::from_fraction(total, o.warmup_frac),
        };
        let optimizer = AdamW::new(adam, param_groups(&model, &config), &model.params)?;
        Ok(Self {
            cursor: Cursor {
                seed: config.seed,
                ..Cursor::default()
            },
            config,
            model,
            optimizer,
            steps_per_epoch,
            token_cache: None,
            metrics: Default::default(),
        })
    }

    /// Fresh backbone, everything trainable.
    pub fn pretraining(config: RunConfig, train_len: usize) -> Result<Self> {
        if config.mode != Mode::Pretrain {
            return Err(Error::Config(format!(
                "pretraining needs mode pretrain, not {}",
                config.mode
            )));
        }
        let mut model = Model::backbone(config.model.clone(), config.lora.clone(), config.seed)?;
        apply_freeze(&mut model.params, Mode::Pretrain);
        Self::build(config, model, train_len)
    }

    /// Pretrained backbone plus the components `config.mode` adds, with the
    /// matching freeze policy.
    pub fn adaptation(config: RunConfig, base: &Checkpoint, train_len: usize) -> Result<Self> {
        let mode = config.mode;
        if mode == Mode::Pretrain {
            return Err(Error::Config("adaptation needs mode A, B, C or D".into()));
        }
        if base.config.model != config.model {
            return Err(Error::Config(
                "base checkpoint was trained with a different model architecture".into(),
            ));
        }
        let mut model = Model {
            config: config.model.clone(),
            lora: config.lora.clone(),
            params: base.params.clone(),
        };
        if model.has_adapters() || model.has_cmrm() {
            return Err(Error::Config(
                "base checkpoint already carries adapters or slot parameters".into(),
            ));
        }
        if mode.uses_lora() {
            model.attach_adapters(config.seed)?;
        }
        if mode.uses_cmrm() {
            model.add_cmrm(config.seed)?;
        }
        apply_freeze(&mut model.params, mode);
        let mut t = Self::build(config, model, train_len)?;
        t.metrics
            .insert("base_config_hash".into(), json!(base.config.hash_hex()));
        Ok(t)
    }

    /// Continues an interrupted run exactly where its checkpoint left off.
    pub fn resume(ckpt: Checkpoint, train_len: usize) -> Result<Self> {
        let model = Model {
            config: ckpt.config.model.clone(),
            lora: ckpt.config.lora.clone(),
            params: ckpt.params,
        };
        let mut t = Self::build(ckpt.config, model, train_len)?;
        if let Some(o) = ckpt.optimizer {
            t.optimizer.restore(o.step, o.moments)?;
        }
        t.cursor = ckpt.cursor;
        t.metrics = ckpt.metrics;
        Ok(t)
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.optim.epochs as u64
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config.clone(), self.model.params.clone());
        c.metrics = self.metrics.clone();
        c.metrics.insert("steps".into(), json!(self.step_count()));
        c.optimizer = Some(OptimizerState {
            step: self.optimizer.step_count(),
            moments: self.optimizer.moments().clone(),
        });
        c.cursor = self.cursor;
        c
    }

    fn encoder_frozen(&self) -> bool {
        ["enc.", "proj."].iter().all(|p| {
            self.model
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(p))
                .all(|(_, prm)| !prm.trainable)
        })
    }

    /// Projected tokens only depend on frozen weights in adaptation, so
    /// they are computed once per sample instead of once per step.
    fn ensure_token_cache(&mut self, data: &Samples) -> Result<()> {
        if self.token_cache.is_some() || !self.encoder_frozen() {
            return Ok(());
        }
        let n = self.model.config.tokens();
        let mut cache = Vec::with_capacity(data.len());
        for chunk in data.images.chunks(64) {
            let h = self.model.tokens_of(chunk)?;
            for rows in h.data().chunks(n * h.cols()) {
                cache.push(Tensor::new(vec![n, h.cols()], rows.to_vec())?);
            }
        }
        self.token_cache = Some(cache);
        Ok(())
    }

    /// Forward, backward and one optimizer update on the given samples.
    /// Returns `(loss, lr)`.
    pub fn training_step(&mut self, data: &Samples, batch: &[usize]) -> Result<(f64, f64)> {
        let step = self.optimizer.step_count() + 1;
        let labels: Vec<Vec<usize>> = batch.iter().map(|&i| data.labels[i].clone()).collect();
        let include_eos = self.config.optim.include_eos;
        let diverged = |e: Error| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged {
                step,
                loss: f64::NAN,
            },
            other => other,
        };
        let mut g = self.model.graph();
        let loss = match &self.token_cache {
            Some(cache) => {
                let rows: Vec<f64> = batch
                    .iter()
                    .flat_map(|&i| cache[i].data().iter().copied())
                    .collect();
                let h = Tensor::new(
                    vec![batch.len() * self.model.config.tokens(), cache[0].cols()],
                    rows,
                )?;
                let h = g.constant(h);
                self.model.loss_from_tokens(&mut g, h, &labels, include_eos)
            }
            None => {
                let imgs: Vec<&GrayImage> = batch.iter().map(|&i| data.images[i]).collect();
                self.model.loss(&mut g, &imgs, &labels, include_eos)
            }
        }
        .map_err(diverged)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = g.backward(loss).map_err(diverged)?;
        drop(g);
        let lr = self.optimizer.step(&mut self.model.params, &grads)?;
        Ok((value, lr))
    }

    /// Trains until the epoch budget is spent or `max_steps` optimizer
    /// updates have happened in total.
    pub fn run(
        &mut self,
        data: &Samples,
        max_steps: Option<u64>,
        log: &mut dyn FnMut(&StepLog),
    ) -> Result<()> {
        if self.optimizer.groups().is_empty() || data.is_empty() {
            return Ok(());
        }
        if steps_per_epoch(data.len(), self.config.optim.batch_size) != self.steps_per_epoch {
            return Err(Error::Config(
                "dataset size differs from the one the schedule was built for".into(),
            ));
        }
        self.ensure_token_cache(data)?;
        let bs = self.config.optim.batch_size;
        let limit = max_steps.unwrap_or(u64::MAX).min(self.total_steps());
        while self.optimizer.step_count() < limit {
            let order = epoch_order(self.cursor.seed, self.cursor.epoch, data.len());
            let start = self.cursor.batch as usize * bs;
            let batch: Vec<usize> = order[start..(start + bs).min(order.len())].to_vec();
            let t0 = Instant::now();
            let (loss, lr) = self.training_step(data, &batch)?;
            self.cursor.batch += 1;
            if self.cursor.batch == self.steps_per_epoch {
                self.cursor.batch = 0;
                self.cursor.epoch += 1;
            }
            log(&StepLog {
                step: self.optimizer.step_count(),
                lr,
                loss,
                mode: self.config.mode,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(())
    }
}

/// Trains the backbone on `train` and, when given, records its exact-match
/// accuracy on `eval` in the checkpoint.
pub fn pretrain_backbone(
    config: &RunConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    let samples = Samples::new(train)?;
    let mut t = Trainer::pretraining(config.clone(), samples.len())?;
    t.run(&samples, None, log)?;
    if let Some(ds) = eval {
        let report =
            crate::evaluator::evaluate(&t.model, ds, &crate::evaluator::EvalOptions::default())?;
        t.metrics
            .insert("clean_accuracy".into(), json!(report.accuracy));
        t.metrics
            .insert("clean_eval_samples".into(), json!(report.sample_count));
    }
    Ok(t.checkpoint())
}

/// Adapts a pretrained backbone in `config.mode`. Mode A performs no
/// updates and returns the base weights unchanged.
pub fn adapt(
    config: &RunConfig,
    base: &Checkpoint,
    train: &Dataset,
    log: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    let samples = Samples::new(train)?;
    let mut t = Trainer::adaptation(config.clone(), base, samples.len())?;
    t.run(&samples, None, log)?;
    Ok(t.checkpoint())
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Model {
    Model {
        config: ckpt.config.model.clone(),
        lora: ckpt.config.lora.clone(),
        params: ckpt.params.clone(),
    }
}

/// Outcome of memorising a small training set.
pub struct OverfitOutcome {
    /// Optimizer updates taken when training stopped.
    pub steps: u64,
    /// Exact match on the training set itself at that point.
    pub accuracy: f64,
    pub checkpoint: Checkpoint,
}

/// Adapts `base` on `train` in `config.mode`, measuring exact match on
/// `train` every `check_every` steps and stopping as soon as it reaches
/// `target` or the step budget of `config` runs out.
pub fn overfit(
    config: &RunConfig,
    base: &Checkpoint,
    train: &Dataset,
    check_every: u64,
    target: f64,
    log: &mut dyn FnMut(&StepLog),
) -> Result<OverfitOutcome> {
    let samples = Samples::new(train)?;
    let mut t = Trainer::adaptation(config.clone(), base, samples.len())?;
    let opts = crate::evaluator::EvalOptions::without_latency();
    let mut accuracy = crate::evaluator::evaluate(&t.model, train, &opts)?.accuracy;
    while accuracy < target && t.step_count() < t.total_steps() {
        t.run(&samples, Some(t.step_count() + check_every.max(1)), log)?;
        accuracy = crate::evaluator::evaluate(&t.model, train, &opts)?.accuracy;
    }
    t.metrics.insert("train_accuracy".into(), json!(accuracy));
    Ok(OverfitOutcome {
        steps: t.step_count(),
        accuracy,
        checkpoint: t.checkpoint(),
    })
}
