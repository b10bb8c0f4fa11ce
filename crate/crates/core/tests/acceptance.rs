//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line. The process exits non-zero if any fails.
//!
//! The pretraining gate runs first and its checkpoint feeds the overfit,
//! gradient-flow, attention and ablation criteria.

use std::path::PathBuf;
use std::time::Instant;

use slotlpr_core::evaluator::{
    self, cer, edit_distance, AblationReport, EvalOptions, ABLATION_SCHEMA,
};
use slotlpr_core::model::cmrm;
use slotlpr_core::model::decoder::Vocab;
use slotlpr_core::rng::derive_rng;
use slotlpr_core::synth::{generate_sample, render_plate};
use slotlpr_core::trainer::{self, epoch_order, Samples, StepLog, Trainer};
use slotlpr_core::verify;
use slotlpr_core::*;

/// Optimizer updates in the frozen-parameter invariant.
const FROZEN_STEPS: u64 = 100;
const OVERFIT_SAMPLES: usize = 64;
const OVERFIT_MAX_STEPS: u64 = 2000;
const OVERFIT_TARGET: f64 = 0.99;
const PRETRAIN_TARGET: f64 = 0.99;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Outcome = std::result::Result<Verdict, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn out_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).expect("create acceptance dir");
    d
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let outcomes = verify::run_suite(0, None).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{} {:.2e}", o.name, o.report.max_rel_error))
        .collect();
    let model = outcomes
        .iter()
        .find(|o| o.name == verify::MODEL_CHECK)
        .expect("model check ran");
    let worst_op = outcomes
        .iter()
        .filter(|o| o.name != verify::MODEL_CHECK)
        .map(|o| o.report.max_rel_error)
        .fold(0.0, f64::max);
    Ok(verdict(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks, worst op {worst_op:.2e}, micro model {:.2e} over {} coords, {secs:.1}s (< 60s){}",
            outcomes.len(),
            model.report.max_rel_error,
            model.report.coords_checked,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    ))
}

fn structural_invariants() -> Outcome {
    let mut failures = Vec::new();
    let cfg = ModelConfig::default();
    let mut rng = derive_rng(5, 0);

    // token count through injection, at several batch sizes and token counts
    for (batch, n) in [(1, 48), (3, 48), (2, 7), (5, 1)] {
        let mut store = ParamStore::new();
        cmrm::init_cmrm(&mut store, &cfg, &mut rng);
        let mut g = model::Graph::frozen(&store, 0.0);
        let h = g.constant(Tensor::randn(&[batch * n, cfg.model_dim], 1.0, &mut rng));
        let pooled = g.constant(Tensor::randn(&[batch, cfg.model_dim], 1.0, &mut rng));
        let alpha = g.param(cmrm::ALPHA).map_err(err)?;
        let out = cmrm::inject(&mut g, h, pooled, alpha).map_err(err)?;
        if g.value(out).rows() != batch * n {
            failures.push(format!(
                "injection changed token count at batch {batch}, N {n}"
            ));
        }
    }

    let mut backbone = Model::backbone(cfg.clone(), LoraConfig::default(), 9).map_err(err)?;
    let images: Vec<GrayImage> = (0..3)
        .map(|i| generate_sample(i, Profile::EvalHard, &cfg.layout()).map(|s| s.image))
        .collect::<Result<_>>()
        .map_err(err)?;
    let refs: Vec<&GrayImage> = images.iter().collect();
    let labels: Vec<Vec<usize>> = ["AB12345", "ZZ00000", "K9X2M4Q"]
        .iter()
        .map(|l| Vocab::encode(l).unwrap())
        .collect();

    // alpha = 0 makes the injection the identity, bit for bit
    let mut with_slots = backbone.clone();
    with_slots.add_cmrm(9).map_err(err)?;
    *with_slots.params.get_mut(cmrm::ALPHA).map_err(err)? = Tensor::scalar(0.0);
    {
        let mut g = with_slots.frozen_graph();
        let h = with_slots
            .visual_tokens(&mut g, with_slots.patchify(&refs).map_err(err)?)
            .map_err(err)?;
        let hp = with_slots.condition(&mut g, h).map_err(err)?;
        if bits(g.value(hp)) != bits(g.value(h)) {
            failures.push("alpha = 0 injection is not the identity".into());
        }
        // zero update layers leave the slot queries untouched
        let s0 = cmrm::slot_states(&mut g, &cfg, h, 3, 0).map_err(err)?;
        let q = with_slots.params.get(cmrm::SLOTS).map_err(err)?;
        let tiled: Vec<u64> = (0..3).flat_map(|_| bits(q)).collect();
        if bits(g.value(s0)) != tiled {
            failures.push("S(0) differs from the slot queries".into());
        }
    }

    // zero-initialised adapters leave logits unchanged
    let before = backbone.logits(&refs, &labels).map_err(err)?;
    backbone.attach_adapters(9).map_err(err)?;
    let after = backbone.logits(&refs, &labels).map_err(err)?;
    if bits(&before) != bits(&after) {
        failures.push("zero-initialised adapters changed the logits".into());
    }

    // frozen parameters stay byte-identical through training in every mode
    let base = Checkpoint::new(
        RunConfig::pretrain(),
        Model::backbone(cfg.clone(), LoraConfig::default(), 9)
            .map_err(err)?
            .params,
    );
    let ds = Dataset::generate(32, 77, Profile::EvalHard, &cfg.layout()).map_err(err)?;
    let samples = Samples::new(&ds).map_err(err)?;
    for mode in Mode::ADAPT {
        let mut rc = RunConfig::adapt(mode);
        rc.optim.batch_size = 4;
        rc.optim.epochs = 20;
        let mut t = Trainer::adaptation(rc, &base, samples.len()).map_err(err)?;
        let start = t.model.params.clone();
        t.run(&samples, Some(FROZEN_STEPS), &mut |_| {})
            .map_err(err)?;
        let expected_steps = if mode == Mode::A { 0 } else { FROZEN_STEPS };
        if t.step_count() != expected_steps {
            failures.push(format!("mode {mode} took {} steps", t.step_count()));
        }
        for (name, p) in start.iter() {
            let now = &t.model.params.get(name).map_err(err)?;
            let same = bits(&p.value) == bits(now);
            if !p.trainable && !same {
                failures.push(format!("mode {mode}: frozen {name} changed"));
            }
            if p.trainable && same && !name.ends_with(".A") {
                // A factors see zero gradient until B moves, so only B, slots,
                // attention and alpha are required to change
                failures.push(format!("mode {mode}: trainable {name} never moved"));
            }
        }
    }

    Ok(verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "token count, alpha=0 identity, S(0)=Q, zero LoRA logits and frozen weights over 100 steps in A/B/C/D all exact".to_string()
        } else {
            failures.join("; ")
        },
    ))
}

/// Textbook recursion, independent of the DP under test.
fn lev(a: &[char], b: &[char]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => (lev(ra, rb) + usize::from(x != y))
            .min(lev(ra, b) + 1)
            .min(lev(a, rb) + 1),
    }
}

fn metric_oracles() -> Outcome {
    let mut words = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..3 {
        let next: Vec<String> = frontier
            .iter()
            .flat_map(|s| "abc".chars().map(move |c| format!("{s}{c}")))
            .collect();
        words.extend(next.iter().cloned());
        frontier = next;
    }
    let mut mismatches = 0;
    for a in &words {
        for b in &words {
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            if edit_distance(a, b) != lev(&ca, &cb) {
                mismatches += 1;
            }
        }
    }
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    let fixtures = [
        edit_distance("KITTEN", "SITTING") == 3,
        edit_distance("ABC1234", "ABC1234") == 0,
        edit_distance("ABC1234", "ABC123") == 1,
        cer("AB12345", "AB12345").map_err(err)? == 0.0,
        close(cer("AB12845", "AB12345").map_err(err)?, 1.0 / 7.0),
        cer("", "AB12345").map_err(err)? == 1.0,
        cer("X", "").is_err(),
    ];
    let failed_fixtures = fixtures.iter().filter(|ok| !**ok).count();
    Ok(verdict(
        mismatches == 0 && failed_fixtures == 0,
        format!(
            "{} string pairs vs recursive oracle, {mismatches} mismatches; {} of {} fixtures hold",
            words.len() * words.len(),
            fixtures.len() - failed_fixtures,
            fixtures.len()
        ),
    ))
}

fn pretrain_gate(base: &mut Option<Checkpoint>) -> Outcome {
    let cfg = RunConfig::pretrain();
    let t = Instant::now();
    let train = cfg
        .data
        .dataset(trainer::Split::Train, &cfg.model)
        .map_err(err)?;
    let eval = cfg
        .data
        .dataset(trainer::Split::Eval, &cfg.model)
        .map_err(err)?;
    let ck = trainer::pretrain_backbone(&cfg, &train, Some(&eval), &mut |_| {}).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let acc = ck.metrics["clean_accuracy"].as_f64().unwrap_or(0.0);
    ck.save(&out_dir().join("pretrain.bin")).map_err(err)?;
    *base = Some(ck);
    Ok(verdict(
        acc >= PRETRAIN_TARGET && eval.len() == 2000 && secs < 1800.0,
        format!("clean exact match {acc:.4} (>= {PRETRAIN_TARGET}) on {} held-out plates, {secs:.0}s (< 1800s)", eval.len()),
    ))
}

fn reproducibility() -> Outcome {
    let layout = PlateLayout::default();
    let mut pre = RunConfig::pretrain();
    pre.seed = 21;
    pre.optim.epochs = 3;
    pre.optim.batch_size = 16;
    let clean = Dataset::generate(64, 5, Profile::Clean, &layout).map_err(err)?;
    let degraded = Dataset::generate(48, 6, Profile::EvalHard, &layout).map_err(err)?;
    // (pretrain log, pretrain bytes, adapt log, adapt bytes)
    type RunTrace = (Vec<StepLog>, Vec<u8>, Vec<StepLog>, Vec<u8>);
    let run = || -> Result<RunTrace> {
        let mut pre_log = Vec::new();
        let base =
            trainer::pretrain_backbone(&pre, &clean, None, &mut |s| pre_log.push(s.clone()))?;
        let mut ad = RunConfig::adapt(Mode::D);
        ad.seed = 22;
        ad.optim.epochs = 2;
        ad.optim.batch_size = 8;
        let mut ad_log = Vec::new();
        let adapted = trainer::adapt(&ad, &base, &degraded, &mut |s| ad_log.push(s.clone()))?;
        Ok((pre_log, base.to_bytes(), ad_log, adapted.to_bytes()))
    };
    let a = run().map_err(err)?;
    let b = run().map_err(err)?;
    let logs_equal = |x: &[StepLog], y: &[StepLog]| {
        x.len() == y.len()
            && x.iter()
                .zip(y)
                .all(|(p, q)| p.deterministic_part() == q.deterministic_part())
    };
    let pre_ok = logs_equal(&a.0, &b.0) && a.1 == b.1;
    let ad_ok = logs_equal(&a.2, &b.2) && a.3 == b.3;
    Ok(verdict(
        pre_ok && ad_ok && !a.0.is_empty() && !a.2.is_empty(),
        format!(
            "pretrain {} steps: logs and checkpoint {}; mode-D adapt {} steps: logs and checkpoint {}",
            a.0.len(),
            if pre_ok { "identical" } else { "DIFFER" },
            a.2.len(),
            if ad_ok { "identical" } else { "DIFFER" }
        ),
    ))
}

fn gradient_flow(base: &Checkpoint) -> Outcome {
    let ds = Dataset::generate(64, 31, Profile::EvalHard, &PlateLayout::default()).map_err(err)?;
    let samples = Samples::new(&ds).map_err(err)?;
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [Mode::C, Mode::D] {
        let cfg = RunConfig::adapt(mode);
        let t = Trainer::adaptation(cfg.clone(), base, samples.len()).map_err(err)?;
        let first = &epoch_order(cfg.seed, 0, samples.len())[..cfg.optim.batch_size];
        let imgs: Vec<&GrayImage> = first.iter().map(|&i| samples.images[i]).collect();
        let labels: Vec<Vec<usize>> = first.iter().map(|&i| samples.labels[i].clone()).collect();
        let mut g = t.model.graph();
        let loss = t
            .model
            .loss(&mut g, &imgs, &labels, cfg.optim.include_eos)
            .map_err(err)?;
        let grads = g.backward(loss).map_err(err)?;
        let q = grads.get(cmrm::SLOTS).map_or(0.0, Tensor::norm);
        let a = grads.get(cmrm::ALPHA).map_or(0.0, Tensor::norm);
        pass &= q > 0.0 && a > 0.0 && q.is_finite() && a.is_finite();
        parts.push(format!("mode {mode}: |dL/dQ| {q:.3e}, |dL/dalpha| {a:.3e}"));
    }
    Ok(verdict(pass, parts.join("; ")))
}

fn overfit_gate(base: &Checkpoint, overfit: &mut Option<Checkpoint>) -> Outcome {
    let mut cfg = RunConfig::adapt(Mode::D);
    cfg.optim.batch_size = 16;
    cfg.optim.lr_lora = 1e-2;
    cfg.optim.lr_cmrm = 1e-2;
    // the schedule spans exactly the step budget
    cfg.optim.epochs = (OVERFIT_MAX_STEPS as usize * cfg.optim.batch_size) / OVERFIT_SAMPLES;
    let ds = Dataset::generate(
        OVERFIT_SAMPLES,
        4242,
        Profile::EvalHard,
        &PlateLayout::default(),
    )
    .map_err(err)?;
    let t = Instant::now();
    let o = trainer::overfit(&cfg, base, &ds, 100, OVERFIT_TARGET, &mut |_| {}).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let pass = o.accuracy >= OVERFIT_TARGET && o.steps <= OVERFIT_MAX_STEPS && secs < 600.0;
    *overfit = Some(o.checkpoint);
    Ok(verdict(
        pass,
        format!(
            "mode-D model: exact match {:.4} (>= {OVERFIT_TARGET}) on {OVERFIT_SAMPLES} degraded plates after {} steps (<= {OVERFIT_MAX_STEPS}), {secs:.0}s (< 600s)",
            o.accuracy, o.steps
        ),
    ))
}

fn attention_export(overfit: &Checkpoint) -> Outcome {
    let model = trainer::model_from_checkpoint(overfit);
    let image = render_plate("AB12345", &PlateLayout::default()).map_err(err)?;
    let export = model.slot_attention(&image).map_err(err)?;
    let dir = out_dir().join("attention");
    export.write(&dir, 8).map_err(err)?;
    let k = model.config.plate_len;
    let (gh, gw) = model.config.grid();
    let valid = export.weights.len() == k
        && export.weights.iter().all(|w| {
            w.len() == gh * gw
                && w.iter().all(|&p| (0.0..=1.0).contains(&p))
                && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9
        })
        && (0..k).all(|i| dir.join(format!("slot_{i}.pgm")).exists());
    Ok(verdict(
        valid,
        format!(
            "{} maps over the {gh}x{gw} grid, each a softmax distribution; argmax columns {:?}, monotone left-to-right: {} (informational)",
            export.weights.len(),
            export.argmax_columns,
            export.monotone
        ),
    ))
}

fn validate_report(report: &AblationReport) -> std::result::Result<(), String> {
    let schema: serde_json::Value = serde_json::from_str(ABLATION_SCHEMA).map_err(err)?;
    let instance: serde_json::Value = serde_json::from_str(&report.to_json()).map_err(err)?;
    let validator = jsonschema::validator_for(&schema).map_err(err)?;
    let errors: Vec<String> = validator
        .iter_errors(&instance)
        .map(|e| e.to_string())
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}

fn ablation(base: &Checkpoint) -> Outcome {
    let template = RunConfig {
        model: base.config.model.clone(),
        ..RunConfig::default()
    };
    let t = Instant::now();
    let train = template
        .data
        .dataset(trainer::Split::Train, &template.model)
        .map_err(err)?;
    let eval = template
        .data
        .dataset(trainer::Split::Eval, &template.model)
        .map_err(err)?;
    let report =
        evaluator::run_ablation(&template, base, &train, &eval, &ABLATION_SEEDS, &mut |_| {})
            .map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    std::fs::write(out_dir().join("ablation_report.json"), report.to_json()).map_err(err)?;
    let schema = validate_report(&report);
    // zero-shot runs must equal a direct evaluation of the base weights
    let direct = evaluator::evaluate_checkpoint(base, &eval, &EvalOptions::without_latency())
        .map_err(err)?
        .0;
    let a_matches = report
        .runs
        .iter()
        .filter(|r| r.mode == Mode::A)
        .all(|r| r.accuracy == Some(direct.accuracy));
    let Some(v) = &report.verdict else {
        return Ok(verdict(
            false,
            format!(
                "incomplete report: {:?}",
                report
                    .runs
                    .iter()
                    .filter_map(|r| r.error.clone())
                    .collect::<Vec<_>>()
            ),
        ));
    };
    let med = |m: &str| report.medians[m].accuracy;
    let pass = report.complete
        && v.holds
        && v.gap_target_met
        && secs < 7200.0
        && schema.is_ok()
        && a_matches;
    Ok(verdict(
        pass,
        format!(
            "median exact match A {:.3} B {:.3} C {:.3} D {:.3} (observed {}); D>B {} D>C {} B>A {} C>A {}; D-A {:.1} points (target >= 10); {} train / {} eval plates, {} seeds, {secs:.0}s (< 7200s); schema {}; mode A equals base {}",
            med("A"),
            med("B"),
            med("C"),
            med("D"),
            v.observed,
            v.d_over_b,
            v.d_over_c,
            v.b_over_a,
            v.c_over_a,
            v.d_minus_a_points,
            train.len(),
            eval.len(),
            ABLATION_SEEDS.len(),
            schema.as_ref().map_or_else(|e| format!("INVALID ({e})"), |_| "valid".into()),
            a_matches
        ),
    ))
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let report =
        |n: u32, name: &'static str, o: Outcome, results: &mut Vec<(u32, &str, Outcome)>| {
            let line = match &o {
                Ok(v) => format!(
                    "{} {n}. {name}: {}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                ),
                Err(e) => format!("FAIL {n}. {name}: error: {e}"),
            };
            println!("{line}");
            results.push((n, name, o));
        };
    let t0 = Instant::now();
    report(1, "gradient integrity", gradient_integrity(), &mut results);
    report(
        2,
        "structural invariants",
        structural_invariants(),
        &mut results,
    );
    report(3, "metric oracles", metric_oracles(), &mut results);
    let mut base = None;
    report(5, "pretrain gate", pretrain_gate(&mut base), &mut results);
    report(7, "reproducibility", reproducibility(), &mut results);
    let missing = || Err::<Verdict, String>("no pretrained backbone (criterion 5 errored)".into());
    let mut overfit = None;
    match &base {
        Some(b) => {
            report(8, "gradient-flow probe", gradient_flow(b), &mut results);
            report(
                4,
                "overfit gate",
                overfit_gate(b, &mut overfit),
                &mut results,
            );
        }
        None => {
            report(8, "gradient-flow probe", missing(), &mut results);
            report(4, "overfit gate", missing(), &mut results);
        }
    }
    match &overfit {
        Some(o) => report(9, "attention-map export", attention_export(o), &mut results),
        None => report(
            9,
            "attention-map export",
            Err("no overfit checkpoint (criterion 4 errored)".into()),
            &mut results,
        ),
    }
    match &base {
        Some(b) => report(6, "ablation ordering", ablation(b), &mut results),
        None => report(6, "ablation ordering", missing(), &mut results),
    }
    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, o)| !matches!(o, Ok(v) if v.pass))
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
