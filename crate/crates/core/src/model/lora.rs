//! Low-rank adapters on decoder projections and the per-mode freezing
//! policy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cmrm::is_cmrm_param;
use super::config::{LoraConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

pub const A_INIT_STD: f64 = 0.02;

/// A frozen weight `W0` with a trainable update `scale·B·A`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `[d_out × d_in]`
    pub w0: Tensor,
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(w0: Tensor, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let (d_out, d_in) = w0.dims2();
        let (r, a_in) = a.dims2();
        if a_in != d_in || b.dims2() != (d_out, r) {
            return Err(TensorError::Shape {
                op: "lora",
                lhs: w0.shape().to_vec(),
                rhs: [a.shape(), b.shape()].concat(),
            }
            .into());
        }
        Ok(Self { w0, a, b, scale })
    }

    /// `x·W0ᵀ + scale·(x·Aᵀ)·Bᵀ` for row vectors `x`, two thin products
    /// instead of the dense update.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.w0.cols() {
            return Err(TensorError::Shape {
                op: "lora_forward",
                lhs: x.shape().to_vec(),
                rhs: self.w0.shape().to_vec(),
            }
            .into());
        }
        let base = x.matmul(&self.w0.transpose())?;
        let low = x.matmul(&self.a.transpose())?.matmul(&self.b.transpose())?;
        let data = base
            .data()
            .iter()
            .zip(low.data())
            .map(|(y, d)| y + self.scale * d)
            .collect();
        Ok(Tensor::new(base.shape().to_vec(), data)?)
    }

    /// Dense `W0 + scale·B·A`.
    pub fn merged(&self) -> Result<Tensor> {
        let ba = self.b.matmul(&self.a)?;
        let data = self
            .w0
            .data()
            .iter()
            .zip(ba.data())
            .map(|(w, d)| w + self.scale * d)
            .collect();
        Ok(Tensor::new(self.w0.shape().to_vec(), data)?)
    }
}

pub fn is_lora_param(name: &str) -> bool {
    name.starts_with("lora.")
}

/// `(linear name, adapter prefix)` for every wrapped projection.
pub fn wrapped_projections(cfg: &ModelConfig, lora: &LoraConfig) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for l in 0..cfg.decoder_layers {
        for p in &lora.targets {
            let group = if p.starts_with("fc") { "mlp" } else { "attn" };
            out.push((format!("dec.{l}.{group}.{p}"), format!("lora.{l}.{p}")));
        }
    }
    out
}

/// Adds zero-effect adapters to the decoder projections and returns the
/// number of adapter parameters. Fails if adapters are already present.
pub fn attach_adapters<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    lora: &LoraConfig,
    rng: &mut R,
) -> Result<usize> {
    lora.validate(cfg)?;
    if store.names().any(is_lora_param) {
        return Err(TensorError::Contract("adapters are already attached".into()).into());
    }
    let mut count = 0;
    for (linear, prefix) in wrapped_projections(cfg, lora) {
        let (d_out, d_in) = store.get(&format!("{linear}.W"))?.dims2();
        store.insert(
            format!("{prefix}.A"),
            Tensor::randn(&[lora.rank, d_in], A_INIT_STD, rng),
        );
        store.insert(format!("{prefix}.B"), Tensor::zeros(&[d_out, lora.rank]));
        count += lora.rank * (d_in + d_out);
    }
    Ok(count)
}

/// Folds every adapter into its base weight and removes the adapter
/// tensors, giving an adapter-free parameter set.
pub fn merge_adapters(
    store: &ParamStore,
    cfg: &ModelConfig,
    lora: &LoraConfig,
) -> Result<ParamStore> {
    let mut out = store.clone();
    for (linear, prefix) in wrapped_projections(cfg, lora) {
        let a_name = format!("{prefix}.A");
        if !store.contains(&a_name) {
            continue;
        }
        let w_name = format!("{linear}.W");
        let adapter = LoraAdapter::new(
            store.get(&w_name)?.clone(),
            store.get(&a_name)?.clone(),
            store.get(&format!("{prefix}.B"))?.clone(),
            lora.scale(),
        )?;
        *out.get_mut(&w_name)? = adapter.merged()?;
    }
    out.remove_prefix("lora.");
    Ok(out)
}

/// Which parameters a run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "pretrain")]
    Pretrain,
    A,
    B,
    C,
    D,
}

impl Mode {
    pub const ADAPT: [Mode; 4] = [Mode::A, Mode::B, Mode::C, Mode::D];

    pub fn uses_lora(self) -> bool {
        matches!(self, Mode::B | Mode::D)
    }

    pub fn uses_cmrm(self) -> bool {
        matches!(self, Mode::C | Mode::D)
    }

    fn trains(self, name: &str) -> bool {
        match self {
            Mode::Pretrain => !is_lora_param(name) && !is_cmrm_param(name),
            Mode::A => false,
            Mode::B => is_lora_param(name),
            Mode::C => is_cmrm_param(name),
            Mode::D => is_lora_param(name) || is_cmrm_param(name),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pretrain => "pretrain",
            Mode::A => "A",
            Mode::B => "B",
            Mode::C => "C",
            Mode::D => "D",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "A" | "a" => Ok(Mode::A),
            "B" | "b" => Ok(Mode::B),
            "C" | "c" => Ok(Mode::C),
            "D" | "d" => Ok(Mode::D),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected pretrain, A, B, C or D)"
            ))),
        }
    }
}

/// Marks exactly the parameters `mode` trains as trainable and returns
/// their names; everything else is frozen.
pub fn apply_freeze(store: &mut ParamStore, mode: Mode) -> Vec<String> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        store
            .set_trainable(n, mode.trains(n))
            .expect("name from the store");
    }
    store.trainable_names()
}
