//! Parameter initialisation and the graph-building helpers shared by the
//! encoder, slot module and decoder.

use rand::Rng;

use crate::error::Result;
use crate::params::{Binder, Grads, ParamStore};
use crate::tensor::{AttnShape, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut R,
) {
    store.insert(format!("{name}.W"), Tensor::randn(&[d_out, d_in], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

/// Pre-norm transformer block: attention and a GELU MLP, each residual.
pub fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    rng: &mut R,
) {
    let std = 1.0 / (d as f64).sqrt();
    let hidden = d * mlp_ratio;
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    for p in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.attn.{p}"), d, d, std, rng);
    }
    init_linear(store, &format!("{prefix}.attn.o"), d, d, 0.5 * std, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, hidden, std, rng);
    init_linear(
        store,
        &format!("{prefix}.mlp.fc2"),
        hidden,
        d,
        0.5 / (hidden as f64).sqrt(),
        rng,
    );
}

/// Adapter parameter prefix for a wrapped decoder projection, if any:
/// `dec.{l}.attn.q` maps to `lora.{l}.q`, `dec.{l}.mlp.fc1` to `lora.{l}.fc1`.
pub fn adapter_name(linear: &str) -> Option<String> {
    let rest = linear.strip_prefix("dec.")?;
    let (layer, tail) = rest.split_once('.')?;
    let proj = tail
        .strip_prefix("attn.")
        .or_else(|| tail.strip_prefix("mlp."))?;
    layer.parse::<usize>().ok()?;
    Some(format!("lora.{layer}.{proj}"))
}

/// One forward pass: a tape plus the parameters bound onto it.
pub struct Graph<'s> {
    pub tape: Tape,
    binder: Binder<'s>,
    lora_scale: f64,
}

impl<'s> Graph<'s> {
    /// Trainable parameters of `store` will receive gradients.
    pub fn new(store: &'s ParamStore, lora_scale: f64) -> Self {
        Self {
            tape: Tape::new(),
            binder: Binder::new(store),
            lora_scale,
        }
    }

    /// Inference graph: nothing records backward state.
    pub fn frozen(store: &'s ParamStore, lora_scale: f64) -> Self {
        Self {
            tape: Tape::new(),
            binder: Binder::frozen(store),
            lora_scale,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.binder.store()
    }

    pub fn has(&self, name: &str) -> bool {
        self.binder.has(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        Ok(self.binder.var(&mut self.tape, name)?)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// `x·Wᵀ + b`, plus `scale·(x·Aᵀ)·Bᵀ` when an adapter wraps `name`.
    /// The low-rank update is never materialised as a dense matrix.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.W"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.tape.matmul_t(x, w, false, true)?;
        let mut y = self.tape.add_rows(y, b)?;
        if let Some(lora) = adapter_name(name) {
            let a_name = format!("{lora}.A");
            if self.has(&a_name) {
                let a = self.param(&a_name)?;
                let bm = self.param(&format!("{lora}.B"))?;
                let ax = self.tape.matmul_t(x, a, false, true)?;
                let bax = self.tape.matmul_t(ax, bm, false, true)?;
                let delta = self.tape.scale(bax, self.lora_scale)?;
                y = self.tape.add(y, delta)?;
            }
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    /// Multi-head attention with separate query/key/value inputs.
    pub fn attention(&mut self, prefix: &str, xq: Var, xkv: Var, shape: AttnShape) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), xq)?;
        let k = self.linear(&format!("{prefix}.k"), xkv)?;
        let v = self.linear(&format!("{prefix}.v"), xkv)?;
        let a = self.tape.attention(q, k, v, shape)?;
        self.linear(&format!("{prefix}.o"), a)
    }

    pub fn block(&mut self, prefix: &str, x: Var, shape: AttnShape) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let a = self.attention(&format!("{prefix}.attn"), h, h, shape)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
        let h = self.linear(&format!("{prefix}.mlp.fc1"), h)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(&format!("{prefix}.mlp.fc2"), h)?;
        Ok(self.tape.add(x, h)?)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        Ok(self.binder.grads(&self.tape))
    }

    /// Gradient of a bound parameter after [`backward`](Self::backward).
    pub fn param_grad(&mut self, name: &str) -> Result<Option<Tensor>> {
        let v = self.param(name)?;
        Ok(self.tape.grad(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapter_names() {
        assert_eq!(adapter_name("dec.0.attn.q").as_deref(), Some("lora.0.q"));
        assert_eq!(adapter_name("dec.1.mlp.fc2").as_deref(), Some("lora.1.fc2"));
        assert_eq!(adapter_name("enc.0.attn.q"), None);
        assert_eq!(adapter_name("dec.head"), None);
        assert_eq!(adapter_name("cmrm.0.attn.k"), None);
    }
}
