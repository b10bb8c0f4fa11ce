//! Patch-based vision encoder and the linear projector into the decoder
//! width.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{init_block, init_layer_norm, init_linear, Graph};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synth::GrayImage;
use crate::tensor::{AttnShape, Mask, Tensor, TensorError, Var};

/// Comparable to the content part of a patch embedding, so tokens are
/// distinguishable by position from the first step.
pub const POS_INIT_STD: f64 = 0.5;

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let dv = cfg.vision_dim;
    init_linear(
        store,
        "enc.patch",
        cfg.patch_len(),
        dv,
        1.0 / (cfg.patch_len() as f64).sqrt(),
        rng,
    );
    // Zero-mean filters: a flat patch (plain background) embeds to the bias,
    // so position rather than background level dominates at init.
    let w = store.get_mut("enc.patch.W").expect("just inserted");
    let n = w.cols();
    for row in w.data_mut().chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    store.insert(
        "enc.pos",
        Tensor::randn(&[cfg.tokens(), dv], POS_INIT_STD, rng),
    );
    for l in 0..cfg.encoder_layers {
        init_block(store, &format!("enc.{l}"), dv, cfg.mlp_ratio, rng);
    }
    init_layer_norm(store, "enc.ln_f", dv);
    init_linear(
        store,
        "proj",
        dv,
        cfg.model_dim,
        1.0 / (dv as f64).sqrt(),
        rng,
    );
}

/// Flattens each image into `N` raster-ordered patches of `patch²` pixels;
/// the result is `[B·N × patch²]`, image-major.
pub fn patchify(images: &[&GrayImage], cfg: &ModelConfig) -> Result<Tensor> {
    let p = cfg.patch;
    let (gh, gw) = cfg.grid();
    let mut data = Vec::with_capacity(images.len() * cfg.tokens() * cfg.patch_len());
    for img in images {
        if img.height != cfg.image_height || img.width != cfg.image_width {
            return Err(Error::Config(format!(
                "image is {}x{} but the model expects {}x{}",
                img.height, img.width, cfg.image_height, cfg.image_width
            )));
        }
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = (py * p + y) * img.width + px * p;
                    data.extend_from_slice(&img.data[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::new(
        vec![images.len() * cfg.tokens(), cfg.patch_len()],
        data,
    )?)
}

/// Linear patch embedding plus the learned position table.
pub fn embed_patches(g: &mut Graph, patches: Var) -> Result<Var> {
    let x = g.linear("enc.patch", patches)?;
    let pos = g.param("enc.pos")?;
    Ok(g.tape.add_tiled(x, pos)?)
}

/// Visual tokens `[B·N × D_v]` for a batch of patchified images.
pub fn encode(g: &mut Graph, cfg: &ModelConfig, patches: Var, batch: usize) -> Result<Var> {
    let n = cfg.tokens();
    if g.value(patches).shape() != [batch * n, cfg.patch_len()] {
        return Err(TensorError::Shape {
            op: "encode",
            lhs: g.value(patches).shape().to_vec(),
            rhs: vec![batch * n, cfg.patch_len()],
        }
        .into());
    }
    let mut x = embed_patches(g, patches)?;
    let shape = AttnShape {
        batch,
        tq: n,
        tk: n,
        heads: cfg.heads,
        mask: Mask::None,
    };
    for l in 0..cfg.encoder_layers {
        x = g.block(&format!("enc.{l}"), x, shape)?;
    }
    g.layer_norm("enc.ln_f", x)
}

/// Linear map `D_v → D`, token count unchanged.
pub fn project(g: &mut Graph, v: Var) -> Result<Var> {
    let w = g.store().get("proj.W")?;
    if g.value(v).cols() != w.cols() {
        return Err(TensorError::Contract(format!(
            "projector expects {} features, got {}",
            w.cols(),
            g.value(v).cols()
        ))
        .into());
    }
    g.linear("proj", v)
}
