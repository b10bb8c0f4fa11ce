//! The finite-difference verification suite behind `slotlpr gradcheck`.
//!
//! Every differentiable primitive is reduced to a scalar with a random
//! weighting, `sum(op(x) ⊙ w)`, and checked against central differences.
//! Composites and the micro model use the looser tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result as CoreResult;
use crate::model::{LoraConfig, Model, ModelConfig};
use crate::synth::GrayImage;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{AttnShape, Mask, Result, Tape, Tensor, Var};

pub const SMOOTH_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Weighted sum `Σ x ⊙ w` with a fixed random `w`, so every output
/// coordinate contributes a distinct amount to the scalar.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(t.value(x).shape(), 1.0, &mut rng);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum(p)
}

/// Adds a zero-valued term with slope `0.1` so the value of `x` is unchanged
/// but its gradient is wrong; used as the negative control.
fn sabotage(t: &mut Tape, x: Var) -> Result<Var> {
    let frozen = t.constant(t.value(x).clone());
    let neg = t.scale(frozen, -1.0)?;
    let zero = t.add(x, neg)?;
    let bump = t.scale(zero, 0.1)?;
    t.add(x, bump)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    tolerance: f64,
    shapes: &'static [&'static [usize]],
    f: OpFn,
}

fn attn_shape(mask: Mask) -> AttnShape {
    AttnShape {
        batch: 2,
        tq: 3,
        tk: 3,
        heads: 2,
        mask,
    }
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 4], &[4, 2]],
            f: |t, v| t.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_nt",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 4], &[2, 4]],
            f: |t, v| t.matmul_t(v[0], v[1], false, true),
        },
        OpCase {
            name: "matmul_tn",
            tolerance: SMOOTH_TOL,
            shapes: &[&[4, 3], &[4, 2]],
            f: |t, v| t.matmul_t(v[0], v[1], true, false),
        },
        OpCase {
            name: "add",
            tolerance: SMOOTH_TOL,
            shapes: &[&[2, 3], &[2, 3]],
            f: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            tolerance: SMOOTH_TOL,
            shapes: &[&[2, 3], &[2, 3]],
            f: |t, v| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale_by",
            tolerance: SMOOTH_TOL,
            shapes: &[&[2, 3], &[1]],
            f: |t, v| t.scale_by(v[0], v[1]),
        },
        OpCase {
            name: "add_rows",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 3], &[2, 3]],
            f: |t, v| t.add_rows(v[0], v[1]),
        },
        OpCase {
            name: "add_tiled",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 3], &[2, 3]],
            f: |t, v| t.add_tiled(v[0], v[1]),
        },
        OpCase {
            name: "gelu",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 5]],
            f: |t, v| t.gelu(v[0]),
        },
        OpCase {
            name: "softmax",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 5]],
            f: |t, v| t.softmax(v[0]),
        },
        OpCase {
            name: "layer_norm",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 6], &[6], &[6]],
            f: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase {
            name: "attention",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 4], &[6, 4], &[6, 4]],
            f: |t, v| t.attention(v[0], v[1], v[2], attn_shape(Mask::None)),
        },
        OpCase {
            name: "attention_causal",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 4], &[6, 4], &[6, 4]],
            f: |t, v| t.attention(v[0], v[1], v[2], attn_shape(Mask::Causal)),
        },
        OpCase {
            name: "attention_prefix",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 4], &[6, 4], &[6, 4]],
            f: |t, v| t.attention(v[0], v[1], v[2], attn_shape(Mask::PrefixCausal(2))),
        },
        OpCase {
            name: "self_attention_shared_input",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 4]],
            f: |t, v| t.attention(v[0], v[0], v[0], attn_shape(Mask::Causal)),
        },
        OpCase {
            name: "gather_rows",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 2], &[2, 2]],
            f: |t, v| t.gather_rows(&[v[0], v[1]], &[(1, 0), (0, 2), (0, 2), (1, 1), (0, 0)]),
        },
        OpCase {
            name: "mean_rows",
            tolerance: SMOOTH_TOL,
            shapes: &[&[6, 3]],
            f: |t, v| t.mean_rows(v[0], 3),
        },
        OpCase {
            name: "cross_entropy",
            tolerance: SMOOTH_TOL,
            shapes: &[&[4, 5]],
            f: |t, v| t.cross_entropy(v[0], &[1, 4, 9, 0], 9),
        },
        OpCase {
            name: "softmax_cross_entropy",
            tolerance: SMOOTH_TOL,
            shapes: &[&[3, 4], &[4, 6]],
            f: |t, v| {
                let logits = t.matmul(v[0], v[1])?;
                let p = t.softmax(logits)?;
                let lp = t.scale(p, 3.0)?;
                t.cross_entropy(lp, &[5, 0, 2], usize::MAX)
            },
        },
        OpCase {
            name: "layer_norm_of_matmul",
            tolerance: COMPOSITE_TOL,
            shapes: &[&[3, 4], &[4, 5], &[5], &[5]],
            f: |t, v| {
                let h = t.matmul(v[0], v[1])?;
                t.layer_norm(h, v[2], v[3], 1e-5)
            },
        },
    ]
}

/// Runs every primitive check at the given seed. `corrupt` names one check
/// whose output gets a deliberately wrong gradient.
pub fn check_ops(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for case in op_cases() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(out.len() as u64));
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut rng))
            .collect();
        let bad = corrupt == Some(case.name);
        let f = case.f;
        let report = grad_check(
            |t, v| {
                let mut y = f(t, v)?;
                if bad {
                    y = sabotage(t, y)?;
                }
                if t.value(y).len() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(t, y, seed)
                }
            },
            &inputs,
            FD_EPS,
        )?;
        out.push(CheckOutcome {
            name: case.name.to_string(),
            tolerance: case.tolerance,
            report,
        });
    }
    Ok(out)
}

pub fn op_names() -> Vec<&'static str> {
    op_cases().into_iter().map(|c| c.name).collect()
}

/// Name under which the end-to-end check is reported.
pub const MODEL_CHECK: &str = "micro_model";
pub const MODEL_BATCH: usize = 4;

/// A micro model with every component present and every parameter
/// trainable. Adapter `B` factors are randomised so gradients reach `A`.
pub fn micro_model(seed: u64) -> CoreResult<Model> {
    let mut model = Model::backbone(ModelConfig::micro(), LoraConfig::default(), seed)?;
    model.add_cmrm(seed)?;
    model.attach_adapters(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        model.params.set_trainable(name, true)?;
        if name.ends_with(".B") && name.starts_with("lora.") {
            let shape = model.params.get(name)?.shape().to_vec();
            *model.params.get_mut(name)? = Tensor::randn(&shape, 0.1, &mut rng);
        }
    }
    Ok(model)
}

/// End-to-end check of the teacher-forced loss against central differences
/// in every coordinate of every parameter of [`micro_model`]. With
/// `corrupt`, the visual tokens get a wrong backward rule, which every
/// upstream parameter must expose.
pub fn check_model(seed: u64, corrupt: bool) -> CoreResult<CheckOutcome> {
    let model = micro_model(seed)?;
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1ab);
    let images: Vec<GrayImage> = (0..MODEL_BATCH)
        .map(|_| {
            let data = (0..cfg.image_height * cfg.image_width)
                .map(|_| rng.random::<f64>())
                .collect();
            GrayImage::from_data(cfg.image_height, cfg.image_width, data)
        })
        .collect::<CoreResult<_>>()?;
    let refs: Vec<&GrayImage> = images.iter().collect();
    let labels: Vec<Vec<usize>> = (0..MODEL_BATCH)
        .map(|_| {
            (0..cfg.plate_len)
                .map(|_| rng.random_range(0..36))
                .collect()
        })
        .collect();
    let patches = model.patchify(&refs)?;

    let loss_of = |m: &Model, track: bool| -> CoreResult<(f64, Option<crate::params::Grads>)> {
        let mut g = if track { m.graph() } else { m.frozen_graph() };
        let mut h = m.visual_tokens(&mut g, patches.clone())?;
        if corrupt {
            h = sabotage(&mut g.tape, h)?;
        }
        let loss = m.loss_from_tokens(&mut g, h, &labels, true)?;
        let value = g.value(loss).data()[0];
        let grads = if track { Some(g.backward(loss)?) } else { None };
        Ok((value, grads))
    };

    let grads = loss_of(&model, true)?.1.unwrap_or_default();
    let mut report = GradCheckReport::empty();
    let mut probe = model.clone();
    for name in model.params.trainable_names() {
        for c in 0..model.params.get(&name)?.len() {
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[c]);
            let orig = probe.params.get(&name)?.data()[c];
            probe.params.get_mut(&name)?.data_mut()[c] = orig + FD_EPS;
            let up = loss_of(&probe, false)?.0;
            probe.params.get_mut(&name)?.data_mut()[c] = orig - FD_EPS;
            let down = loss_of(&probe, false)?.0;
            probe.params.get_mut(&name)?.data_mut()[c] = orig;
            report.observe(&name, c, analytic, (up - down) / (2.0 * FD_EPS));
        }
    }
    Ok(CheckOutcome {
        name: MODEL_CHECK.to_string(),
        tolerance: COMPOSITE_TOL,
        report,
    })
}

/// Every primitive check followed by the end-to-end model check. `corrupt`
/// names one primitive, or [`MODEL_CHECK`], to sabotage.
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> CoreResult<Vec<CheckOutcome>> {
    let mut out = check_ops(seed, corrupt)?;
    out.push(check_model(seed, corrupt == Some(MODEL_CHECK))?);
    Ok(out)
}

/// The check with the largest error relative to its own tolerance.
pub fn worst(outcomes: &[CheckOutcome]) -> Option<&CheckOutcome> {
    outcomes.iter().max_by(|a, b| {
        (a.report.max_rel_error / a.tolerance).total_cmp(&(b.report.max_rel_error / b.tolerance))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_and_each_sabotage_is_named() {
        let clean = check_ops(1, None).unwrap();
        for o in &clean {
            assert!(o.passed(), "{} {:?}", o.name, o.report);
        }
        for name in op_names() {
            let out = check_ops(1, Some(name)).unwrap();
            let failed: Vec<&str> = out
                .iter()
                .filter(|o| !o.passed())
                .map(|o| o.name.as_str())
                .collect();
            assert_eq!(failed, [name]);
        }
    }

    #[test]
    fn micro_model_passes_and_sabotage_is_caught() {
        let ok = check_model(3, false).unwrap();
        assert!(ok.passed(), "{:?}", ok.report);
        assert!(ok.report.coords_checked > 1000);
        let bad = check_model(3, true).unwrap();
        assert!(!bad.passed());
        assert!(
            bad.report.worst.starts_with("enc.")
                || bad.report.worst == "proj.W"
                || bad.report.worst == "proj.b"
        );
    }
}
