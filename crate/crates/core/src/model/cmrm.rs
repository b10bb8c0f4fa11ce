//! Character slot module: `K` learned slot queries read the visual tokens
//! through iterated cross-attention, their mean is injected into every
//! visual token, and the token count never changes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{init_layer_norm, init_linear, Graph};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synth::GrayImage;
use crate::tensor::{softmax_row, AttnShape, Mask, Tensor, TensorError, Var};

pub const SLOT_INIT_STD: f64 = 0.02;
pub const ALPHA_INIT: f64 = 0.1;
pub const SLOTS: &str = "cmrm.slots";
pub const ALPHA: &str = "cmrm.alpha";

pub fn init_cmrm<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.model_dim;
    let std = 1.0 / (d as f64).sqrt();
    store.insert(
        SLOTS,
        Tensor::randn(&[cfg.plate_len, d], SLOT_INIT_STD, rng),
    );
    for l in 0..cfg.cmrm_layers {
        for p in ["q", "k", "v", "o"] {
            init_linear(store, &format!("cmrm.{l}.attn.{p}"), d, d, std, rng);
        }
        init_layer_norm(store, &format!("cmrm.{l}.ln"), d);
    }
    store.insert(ALPHA, Tensor::scalar(ALPHA_INIT));
}

pub fn is_cmrm_param(name: &str) -> bool {
    name.starts_with("cmrm.")
}

fn slot_shape(cfg: &ModelConfig, batch: usize) -> AttnShape {
    AttnShape {
        batch,
        tq: cfg.plate_len,
        tk: cfg.tokens(),
        heads: cfg.cmrm_heads,
        mask: Mask::None,
    }
}

/// Slot states after `layers` updates `S ← LN(S + Attn(S, H, H))`, starting
/// from the slot queries themselves. Rows are `[B·K × D]`, image-major.
pub fn slot_states(
    g: &mut Graph,
    cfg: &ModelConfig,
    h: Var,
    batch: usize,
    layers: usize,
) -> Result<Var> {
    let q = g.param(SLOTS)?;
    let d = g.value(q).cols();
    if g.value(h).cols() != d {
        return Err(Error::Config(format!(
            "slot width {d} does not match visual token width {}",
            g.value(h).cols()
        )));
    }
    let k = cfg.plate_len;
    let tile: Vec<(usize, usize)> = (0..batch * k).map(|i| (0, i % k)).collect();
    let mut s = g.tape.gather_rows(&[q], &tile)?;
    for l in 0..layers {
        let a = g.attention(&format!("cmrm.{l}.attn"), s, h, slot_shape(cfg, batch))?;
        let r = g.tape.add(s, a)?;
        s = g.layer_norm(&format!("cmrm.{l}.ln"), r)?;
    }
    Ok(s)
}

pub fn slot_cross_attention(g: &mut Graph, cfg: &ModelConfig, h: Var, batch: usize) -> Result<Var> {
    slot_states(g, cfg, h, batch, cfg.cmrm_layers)
}

/// Mean over the `k` slots of each image: `[B·K × D] → [B × D]`.
pub fn pool_slots(g: &mut Graph, s: Var, k: usize) -> Result<Var> {
    Ok(g.tape.mean_rows(s, k)?)
}

/// `H'_i = H_i + α·g` for every token of each image.
pub fn inject(g: &mut Graph, h: Var, pooled: Var, alpha: Var) -> Result<Var> {
    let n_in = g.value(h).rows();
    let scaled = g.tape.scale_by(pooled, alpha)?;
    let out = g.tape.add_rows(h, scaled)?;
    if g.value(out).rows() != n_in {
        return Err(TensorError::Contract("injection changed the token count".into()).into());
    }
    Ok(out)
}

/// Slot pass, pooling and injection in one call.
pub fn apply(g: &mut Graph, cfg: &ModelConfig, h: Var, batch: usize) -> Result<Var> {
    let s = slot_cross_attention(g, cfg, h, batch)?;
    let pooled = pool_slots(g, s, cfg.plate_len)?;
    let alpha = g.param(ALPHA)?;
    inject(g, h, pooled, alpha)
}

/// Per-slot attention of the final cross-attention layer over the patch
/// grid, averaged over heads. One `[K][N]` block per image; each row is a
/// probability distribution.
pub fn slot_attention(
    g: &mut Graph,
    cfg: &ModelConfig,
    h: Var,
    batch: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if cfg.cmrm_layers == 0 {
        return Err(Error::Config(
            "slot attention needs at least one slot layer".into(),
        ));
    }
    let last = cfg.cmrm_layers - 1;
    let s = slot_states(g, cfg, h, batch, last)?;
    let q = g.linear(&format!("cmrm.{last}.attn.q"), s)?;
    let k = g.linear(&format!("cmrm.{last}.attn.k"), h)?;
    let (q, k) = (g.value(q).clone(), g.value(k).clone());
    let (slots, n, heads) = (cfg.plate_len, cfg.tokens(), cfg.cmrm_heads);
    let dh = cfg.model_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![vec![0.0; n]; slots]; batch];
    let mut logits = vec![0.0; n];
    let mut probs = vec![0.0; n];
    for (b, maps) in out.iter_mut().enumerate() {
        for (i, map) in maps.iter_mut().enumerate() {
            let qi = q.row(b * slots + i);
            for hd in 0..heads {
                let qh = &qi[hd * dh..(hd + 1) * dh];
                for (j, l) in logits.iter_mut().enumerate() {
                    let kh = &k.row(b * n + j)[hd * dh..(hd + 1) * dh];
                    *l = scale * qh.iter().zip(kh).map(|(x, y)| x * y).sum::<f64>();
                }
                softmax_row(&logits, &mut probs);
                for (m, p) in map.iter_mut().zip(&probs) {
                    *m += p / heads as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Attention maps of one image, as exported to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionExport {
    pub grid: (usize, usize),
    /// Head-averaged probabilities, one row per slot.
    pub weights: Vec<Vec<f64>>,
    /// Column of the most-attended patch per slot.
    pub argmax_columns: Vec<usize>,
    /// Whether `argmax_columns` is non-decreasing left to right.
    pub monotone: bool,
}

impl AttentionExport {
    pub fn new(weights: Vec<Vec<f64>>, grid: (usize, usize)) -> Self {
        let argmax_columns: Vec<usize> = weights
            .iter()
            .map(|w| {
                let best = w
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
                best.0 % grid.1
            })
            .collect();
        let monotone = argmax_columns.windows(2).all(|w| w[0] <= w[1]);
        Self {
            grid,
            weights,
            argmax_columns,
            monotone,
        }
    }

    /// Map `k` scaled by its maximum into `[0, 1]` on the patch grid.
    pub fn normalized_map(&self, k: usize) -> GrayImage {
        let w = &self.weights[k];
        let max = w.iter().copied().fold(0.0, f64::max);
        let data = w
            .iter()
            .map(|v| if max > 0.0 { v / max } else { 0.0 })
            .collect();
        GrayImage::from_data(self.grid.0, self.grid.1, data).expect("grid matches weights")
    }

    /// Writes `slot_{k}.pgm` enlarged `upscale` times plus `attention.json`.
    pub fn write(&self, dir: &Path, upscale: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for k in 0..self.weights.len() {
            self.normalized_map(k)
                .upscale(upscale)
                .write_pgm(&dir.join(format!("slot_{k}.pgm")))?;
        }
        let path = dir.join("attention.json");
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
