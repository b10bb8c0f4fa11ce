//! Deterministic fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotlpr_core::trainer::{RunConfig, Trainer};
use slotlpr_core::{Checkpoint, Dataset, Mode, Model, PlateLayout, Profile, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Degraded plates for the training-step benchmarks.
pub fn plates(count: usize) -> Dataset {
    Dataset::generate(count, 99, Profile::EvalHard, &PlateLayout::default())
        .expect("default layout renders")
}

/// A trainer for `mode` on `count` samples, built from an untrained backbone.
pub fn trainer(mode: Mode, count: usize, batch_size: usize) -> Trainer {
    let mut cfg = if mode == Mode::Pretrain {
        RunConfig::pretrain()
    } else {
        RunConfig::adapt(mode)
    };
    cfg.optim.batch_size = batch_size;
    cfg.optim.epochs = 1000;
    if mode == Mode::Pretrain {
        return Trainer::pretraining(cfg, count).expect("valid config");
    }
    let backbone = Model::backbone(cfg.model.clone(), cfg.lora.clone(), 0).expect("valid config");
    let base = Checkpoint::new(RunConfig::pretrain(), backbone.params);
    Trainer::adaptation(cfg, &base, count).expect("valid config")
}
