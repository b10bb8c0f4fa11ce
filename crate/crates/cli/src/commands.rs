use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use slotlpr_core::evaluator::{self, EvalOptions};
use slotlpr_core::synth::dataset::make_dataset;
use slotlpr_core::trainer::{self, Split};
use slotlpr_core::verify;
use slotlpr_core::{Checkpoint, GrayImage, Mode, Profile, RunConfig};

use crate::io::{guard, sibling, write_json, ProgressLog};
use crate::{Common, TrainFlags};

/// What a command prints on stdout and whether it succeeded.
pub struct Outcome {
    pub summary: Value,
    pub success: bool,
}

impl From<Value> for Outcome {
    fn from(summary: Value) -> Self {
        Self {
            summary,
            success: true,
        }
    }
}

fn config_or(common: &Common, default: RunConfig) -> Result<RunConfig> {
    match &common.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(default),
    }
}

fn required_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .context("--out is required for this command")
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Applies the training flags. `--lr` sets the groups that train in this
/// mode: the backbone when pretraining, adapters and slot module otherwise.
fn apply_train_flags(cfg: &mut RunConfig, flags: &TrainFlags, seed: Option<u64>) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = &flags.train {
        cfg.data.train = Some(path_string(p));
    }
    if let Some(p) = &flags.eval {
        cfg.data.eval = Some(path_string(p));
    }
    if let Some(e) = flags.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        cfg.optim.batch_size = b;
    }
    if let Some(n) = flags.train_count {
        cfg.data.train_count = n;
    }
    if let Some(lr) = flags.lr {
        if cfg.mode == Mode::Pretrain {
            cfg.optim.lr_backbone = lr;
        } else {
            cfg.optim.lr_lora = lr;
            cfg.optim.lr_cmrm = lr;
        }
    }
    cfg.validate()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, None, false)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Inference commands take the architecture from the checkpoint; a given
/// config must agree with it.
fn check_config_matches(common: &Common, ckpt: &Checkpoint) -> Result<()> {
    if let Some(p) = &common.config {
        let cfg = RunConfig::load(p)?;
        if cfg.model != ckpt.config.model {
            bail!(
                "{} describes a different architecture than the checkpoint",
                p.display()
            );
        }
    }
    Ok(())
}

pub fn gen_data(common: &Common, count: usize, profile: Profile) -> Result<Outcome> {
    let cfg = config_or(common, RunConfig::default())?;
    let out = required_out(common)?;
    let seed = common.seed.unwrap_or(0);
    let t = Instant::now();
    let manifest = make_dataset(count, seed, profile, &cfg.model.layout(), out, common.force)?;
    log::info!(
        "wrote {count} {} plates to {} in {:.1}s",
        profile.as_str(),
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(json!({ "command": "gen-data", "out": out, "manifest": manifest }).into())
}

fn train_summary(
    command: &str,
    out: &Path,
    progress: &Path,
    ck: &Checkpoint,
    last_loss: Option<f64>,
) -> Value {
    json!({
        "command": command,
        "out": out,
        "progress": progress,
        "mode": ck.config.mode,
        "config_hash": ck.config.hash_hex(),
        "steps": ck.optimizer.as_ref().map_or(0, |o| o.step),
        "final_loss": last_loss,
        "metrics": ck.metrics,
    })
}

pub fn pretrain(common: &Common, flags: &TrainFlags) -> Result<Outcome> {
    let mut cfg = config_or(common, RunConfig::pretrain())?;
    if cfg.mode != Mode::Pretrain {
        bail!(
            "pretrain needs a config with mode \"pretrain\", got {}",
            cfg.mode
        );
    }
    apply_train_flags(&mut cfg, flags, common.seed)?;
    let out = required_out(common)?;
    let progress = sibling(out, "progress.jsonl");
    guard(out, common.force)?;
    guard(&progress, common.force)?;
    let train = cfg.data.dataset(Split::Train, &cfg.model)?;
    let eval = cfg.data.dataset(Split::Eval, &cfg.model)?;
    log::info!(
        "pretraining on {} plates, {} epochs",
        train.len(),
        cfg.optim.epochs
    );
    let mut log = ProgressLog::create(&progress)?;
    let mut last = None;
    let ck = trainer::pretrain_backbone(&cfg, &train, Some(&eval), &mut |s| {
        last = Some(s.loss);
        log.record(s);
    })?;
    log.finish()?;
    ck.save(out)?;
    Ok(train_summary("pretrain", out, &progress, &ck, last).into())
}

pub fn adapt(common: &Common, flags: &TrainFlags, base: &Path, mode: Mode) -> Result<Outcome> {
    if mode == Mode::Pretrain {
        bail!("adapt takes one of the modes A, B, C, D");
    }
    let base = load_checkpoint(base)?;
    let default = RunConfig {
        model: base.config.model.clone(),
        ..RunConfig::adapt(mode)
    };
    let mut cfg = config_or(common, default)?;
    cfg.mode = mode;
    apply_train_flags(&mut cfg, flags, common.seed)?;
    let out = required_out(common)?;
    let progress = sibling(out, "progress.jsonl");
    guard(out, common.force)?;
    guard(&progress, common.force)?;
    let train = cfg.data.dataset(Split::Train, &cfg.model)?;
    log::info!(
        "adapting in mode {mode} on {} plates, {} epochs",
        train.len(),
        cfg.optim.epochs
    );
    let mut log = ProgressLog::create(&progress)?;
    let mut last = None;
    let ck = trainer::adapt(&cfg, &base, &train, &mut |s| {
        last = Some(s.loss);
        log.record(s);
    })?;
    log.finish()?;
    ck.save(out)?;
    Ok(train_summary("adapt", out, &progress, &ck, last).into())
}

pub fn eval(
    common: &Common,
    ckpt_path: &Path,
    data: Option<&Path>,
    no_latency: bool,
) -> Result<Outcome> {
    let ck = load_checkpoint(ckpt_path)?;
    let mut cfg = ck.config.clone();
    if let Some(p) = &common.config {
        cfg.data = RunConfig::load(p)?.data;
    }
    if let Some(s) = common.seed {
        cfg.data.eval_seed = s;
    }
    if let Some(d) = data {
        cfg.data.eval = Some(path_string(d));
    }
    let out = common.out.as_deref();
    if let Some(o) = out {
        guard(o, common.force)?;
        guard(&sibling(o, "predictions.tsv"), common.force)?;
    }
    let ds = cfg.data.dataset(Split::Eval, &cfg.model)?;
    let opts = if no_latency {
        EvalOptions::without_latency()
    } else {
        EvalOptions::default()
    };
    let (report, preds) = evaluator::evaluate_checkpoint(&ck, &ds, &opts)?;
    let mut predictions = None;
    if let Some(o) = out {
        write_json(o, &json!({ "report": report, "config": cfg }))?;
        let p = sibling(o, "predictions.tsv");
        evaluator::write_predictions(&p, &preds)?;
        predictions = Some(p);
    }
    Ok(json!({
        "command": "eval",
        "out": out,
        "predictions": predictions,
        "samples": report.sample_count,
        "accuracy": report.accuracy,
        "cer": report.cer,
        "latency_ms_p50": report.latency_ms.as_ref().map(|l| l.p50),
        "mode": report.mode,
    })
    .into())
}

fn read_image(path: &Path) -> Result<GrayImage> {
    GrayImage::read_pgm(path).with_context(|| format!("reading image {}", path.display()))
}

pub fn infer(common: &Common, ckpt_path: &Path, image: &Path) -> Result<Outcome> {
    let ck = load_checkpoint(ckpt_path)?;
    check_config_matches(common, &ck)?;
    let model = trainer::model_from_checkpoint(&ck);
    let img = read_image(image)?;
    let pred = model.predict(&[&img])?.remove(0);
    let latency = evaluator::measure_latency(&model, &img, 2, 10)?;
    let summary = json!({ "pred": pred, "latency_ms": latency.p50 });
    if let Some(o) = &common.out {
        guard(o, common.force)?;
        write_json(
            o,
            &json!({ "image": image, "pred": pred, "latency_ms": latency, "config": ck.config }),
        )?;
    }
    Ok(summary.into())
}

pub fn ablate(common: &Common, flags: &TrainFlags, base: &Path, seeds: u64) -> Result<Outcome> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = load_checkpoint(base)?;
    let default = RunConfig {
        model: base.config.model.clone(),
        ..RunConfig::default()
    };
    let mut cfg = config_or(common, default)?;
    let first = common.seed.unwrap_or(cfg.seed);
    apply_train_flags(&mut cfg, flags, None)?;
    let out = required_out(common)?;
    let progress = sibling(out, "progress.jsonl");
    guard(out, common.force)?;
    guard(&progress, common.force)?;
    let train = cfg.data.dataset(Split::Train, &cfg.model)?;
    let eval = cfg.data.dataset(Split::Eval, &cfg.model)?;
    let seed_list: Vec<u64> = (first..first + seeds).collect();
    let t = Instant::now();
    let mut log = ProgressLog::create(&progress)?;
    let report = evaluator::run_ablation(&cfg, &base, &train, &eval, &seed_list, &mut |s| {
        log.record(s)
    })?;
    log.finish()?;
    std::fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    Ok(Outcome {
        success: report.complete,
        summary: json!({
            "command": "ablate",
            "out": out,
            "seconds": t.elapsed().as_secs_f64(),
            "complete": report.complete,
            "medians": report.medians,
            "verdict": report.verdict,
        }),
    })
}

pub fn export_attn(
    common: &Common,
    ckpt_path: &Path,
    image: &Path,
    upscale: usize,
) -> Result<Outcome> {
    let ck = load_checkpoint(ckpt_path)?;
    check_config_matches(common, &ck)?;
    let out = required_out(common)?;
    guard(out, common.force)?;
    let model = trainer::model_from_checkpoint(&ck);
    if !model.has_cmrm() {
        bail!(
            "checkpoint {} has no slot module (mode {})",
            ckpt_path.display(),
            ck.config.mode
        );
    }
    let export = model.slot_attention(&read_image(image)?)?;
    export.write(out, upscale.max(1))?;
    write_json(&out.join("config.json"), &ck.config)?;
    let sums: Vec<f64> = export.weights.iter().map(|w| w.iter().sum()).collect();
    Ok(json!({
        "command": "export-attn",
        "out": out,
        "maps": export.weights.len(),
        "sums": sums,
        "argmax_columns": export.argmax_columns,
        "monotone": export.monotone,
    })
    .into())
}

pub fn gradcheck(common: &Common, corrupt: Option<&str>) -> Result<Outcome> {
    if let Some(name) = corrupt {
        if name != verify::MODEL_CHECK && !verify::op_names().contains(&name) {
            bail!("unknown check {name:?}");
        }
    }
    if let Some(p) = &common.config {
        // only validated: the suite runs at fixed shapes
        RunConfig::load(p)?;
    }
    let seed = common.seed.unwrap_or(0);
    let t = Instant::now();
    let outcomes = verify::run_suite(seed, corrupt)?;
    let seconds = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    let worst = verify::worst(&outcomes).context("the suite ran no checks")?;
    for o in &outcomes {
        let status = if o.passed() { "ok" } else { "FAIL" };
        log::info!(
            "{status:4} {:28} rel {:.2e} (tol {:.0e}) at {}",
            o.name,
            o.report.max_rel_error,
            o.tolerance,
            o.report.worst
        );
    }
    if !failed.is_empty() {
        log::error!(
            "gradient check failed: {} has relative error {:.3e} (tolerance {:.0e})",
            worst.name,
            worst.report.max_rel_error,
            worst.tolerance
        );
    }
    let all: Vec<Value> = outcomes
        .iter()
        .map(|o| {
            json!({
                "name": o.name,
                "passed": o.passed(),
                "max_rel_error": o.report.max_rel_error,
                "tolerance": o.tolerance,
                "at": o.report.worst,
                "coords": o.report.coords_checked,
            })
        })
        .collect();
    if let Some(o) = &common.out {
        guard(o, common.force)?;
        write_json(
            o,
            &json!({ "seed": seed, "seconds": seconds, "checks": all }),
        )?;
    }
    Ok(Outcome {
        success: failed.is_empty(),
        summary: json!({
            "command": "gradcheck",
            "passed": failed.is_empty(),
            "checks": outcomes.len(),
            "failed": failed,
            "seconds": seconds,
            "worst": { "name": worst.name, "max_rel_error": worst.report.max_rel_error, "tolerance": worst.tolerance },
        }),
    })
}
