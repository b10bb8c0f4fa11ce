//! Exact-match accuracy, character error rate, latency, and the four-mode
//! ablation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::synth::{Dataset, GrayImage};
use crate::tensor::TensorError;
use crate::trainer::{self, Checkpoint, RunConfig, StepLog};

/// Levenshtein distance over Unicode scalar values with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalised by the ground-truth length.
pub fn cer(pred: &str, gt: &str) -> Result<f64> {
    let n = gt.chars().count();
    if n == 0 {
        return Err(TensorError::Contract(
            "character error rate needs a non-empty ground truth".into(),
        )
        .into());
    }
    Ok(edit_distance(pred, gt) as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub iterations: usize,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Self {
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |p: f64| s[((p * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: pct(0.5),
            p95: pct(0.95),
            iterations: s.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub cer: f64,
    pub per_position_accuracy: Vec<f64>,
    pub latency_ms: Option<LatencyStats>,
    pub sample_count: usize,
    pub config_hash: String,
    pub mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub file: String,
    pub gt: String,
    pub pred: String,
    pub cer: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Timed single-image iterations; 0 skips latency measurement.
    pub latency_iters: usize,
    pub latency_warmup: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            latency_iters: 50,
            latency_warmup: 5,
        }
    }
}

impl EvalOptions {
    pub fn without_latency() -> Self {
        Self {
            latency_iters: 0,
            ..Self::default()
        }
    }
}

/// Aggregates predictions into a report. Fails if accuracy is 1 while CER
/// is not 0, which would mean the two metrics disagree.
pub fn summarize(preds: &[Prediction], plate_len: usize) -> Result<EvalReport> {
    let n = preds.len();
    let mut exact = 0usize;
    let mut cer_sum = 0.0;
    let mut pos = vec![0usize; plate_len];
    for p in preds {
        exact += usize::from(p.pred == p.gt);
        cer_sum += p.cer;
        let pc: Vec<char> = p.pred.chars().collect();
        for (k, g) in p.gt.chars().take(plate_len).enumerate() {
            pos[k] += usize::from(pc.get(k) == Some(&g));
        }
    }
    let denom = n.max(1) as f64;
    let report = EvalReport {
        accuracy: exact as f64 / denom,
        cer: cer_sum / denom,
        per_position_accuracy: pos.iter().map(|&c| c as f64 / denom).collect(),
        latency_ms: None,
        sample_count: n,
        config_hash: String::new(),
        mode: String::new(),
    };
    if n > 0 && report.accuracy == 1.0 && report.cer != 0.0 {
        return Err(TensorError::Contract("accuracy is 1 but CER is not 0".into()).into());
    }
    Ok(report)
}

pub fn predict_dataset(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|&i| &ds.images[i]).collect();
        for (&i, pred) in chunk.iter().zip(model.predict(&imgs)?) {
            let gt = ds.labels[i].clone();
            out.push(Prediction {
                file: crate::synth::dataset::image_file_name(i),
                cer: cer(&pred, &gt)?,
                gt,
                pred,
            });
        }
    }
    Ok(out)
}

/// Single-image latency of the full encode, inject and decode path.
pub fn measure_latency(
    model: &Model,
    image: &GrayImage,
    warmup: usize,
    iters: usize,
) -> Result<LatencyStats> {
    for _ in 0..warmup {
        model.predict(&[image])?;
    }
    let mut ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        model.predict(&[image])?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(&ms))
}

pub fn evaluate_with_predictions(
    model: &Model,
    ds: &Dataset,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if let Some(bad) = ds
        .labels
        .iter()
        .find(|l| l.chars().count() != model.config.plate_len)
    {
        return Err(Error::Config(format!(
            "dataset label {bad:?} does not have the model's plate length {}",
            model.config.plate_len
        )));
    }
    let preds = predict_dataset(model, ds, opts.batch_size)?;
    let mut report = summarize(&preds, model.config.plate_len)?;
    if opts.latency_iters > 0 && !ds.is_empty() {
        report.latency_ms = Some(measure_latency(
            model,
            &ds.images[0],
            opts.latency_warmup,
            opts.latency_iters,
        )?);
    }
    Ok((report, preds))
}

pub fn evaluate(model: &Model, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    Ok(evaluate_with_predictions(model, ds, opts)?.0)
}

pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    ds: &Dataset,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let model = trainer::model_from_checkpoint(ckpt);
    let (mut report, preds) = evaluate_with_predictions(&model, ds, opts)?;
    report.config_hash = ckpt.config.hash_hex();
    report.mode = ckpt.config.mode.to_string();
    Ok((report, preds))
}

/// `file<TAB>gt<TAB>pred<TAB>cer`, one line per sample, no header.
pub fn predictions_tsv(preds: &[Prediction]) -> String {
    let mut s = String::new();
    for p in preds {
        writeln!(s, "{}\t{}\t{}\t{}", p.file, p.gt, p.pred, p.cer).expect("string write");
    }
    s
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    std::fs::write(path, predictions_tsv(preds)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub mode: Mode,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub cer: Option<f64>,
    pub steps: u64,
    pub config_hash: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub accuracy: f64,
    pub cer: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub d_over_b: bool,
    pub d_over_c: bool,
    pub b_over_a: bool,
    pub c_over_a: bool,
    /// Accuracy points, `100·(D − A)`.
    pub d_minus_a_points: f64,
    pub gap_target_met: bool,
    /// All four pairwise orderings hold.
    pub holds: bool,
    /// Modes sorted by median accuracy, best first.
    pub observed: String,
}

pub const GAP_TARGET_POINTS: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub base_config_hash: String,
    /// Shared adaptation settings; each run overrides only mode and seed.
    pub config: RunConfig,
    pub runs: Vec<ModeRun>,
    pub medians: BTreeMap<String, ModeSummary>,
    pub verdict: Option<OrderingVerdict>,
    pub complete: bool,
}

pub const ABLATION_SCHEMA: &str = include_str!("../schemas/ablation_report.schema.json");

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl AblationReport {
    pub fn from_runs(
        seeds: Vec<u64>,
        base_config_hash: String,
        config: RunConfig,
        runs: Vec<ModeRun>,
    ) -> Self {
        let mut medians = BTreeMap::new();
        for mode in Mode::ADAPT {
            let ok: Vec<&ModeRun> = runs
                .iter()
                .filter(|r| r.mode == mode && r.accuracy.is_some())
                .collect();
            if ok.is_empty() {
                continue;
            }
            let mut acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let mut cer: Vec<f64> = ok.iter().filter_map(|r| r.cer).collect();
            medians.insert(
                mode.to_string(),
                ModeSummary {
                    accuracy: median(&mut acc),
                    cer: median(&mut cer),
                    runs: ok.len(),
                },
            );
        }
        let complete = runs.iter().all(|r| r.error.is_none()) && medians.len() == 4;
        let verdict = (medians.len() == 4).then(|| {
            let m = |k: &str| medians[k].accuracy;
            let (a, b, c, d) = (m("A"), m("B"), m("C"), m("D"));
            let mut order: Vec<(&str, f64)> = vec![("A", a), ("B", b), ("C", c), ("D", d)];
            order.sort_by(|x, y| y.1.total_cmp(&x.1));
            let d_over_b = d > b;
            let d_over_c = d > c;
            let b_over_a = b > a;
            let c_over_a = c > a;
            let gap = 100.0 * (d - a);
            OrderingVerdict {
                d_over_b,
                d_over_c,
                b_over_a,
                c_over_a,
                d_minus_a_points: gap,
                gap_target_met: gap >= GAP_TARGET_POINTS,
                holds: d_over_b && d_over_c && b_over_a && c_over_a,
                observed: order
                    .iter()
                    .map(|(k, _)| *k)
                    .collect::<Vec<_>>()
                    .join(" > "),
            }
        });
        Self {
            seeds,
            base_config_hash,
            config,
            runs,
            medians,
            verdict,
            complete,
        }
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serialises");
        let mut s = serde_json::to_string_pretty(&v).expect("value serialises");
        s.push('\n');
        s
    }
}

/// Adapts the base checkpoint in every mode for every seed and evaluates
/// each result on `eval`. A failing run is recorded and the report is
/// flagged incomplete instead of aborting the sweep.
pub fn run_ablation(
    template: &RunConfig,
    base: &Checkpoint,
    train: &Dataset,
    eval: &Dataset,
    seeds: &[u64],
    log: &mut dyn FnMut(&StepLog),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let opts = EvalOptions::without_latency();
    let mut runs = Vec::new();
    // Mode A trains nothing, so every seed yields the base weights.
    let mut zero_shot: Option<(Vec<u8>, EvalReport)> = None;
    for &seed in seeds {
        for mode in Mode::ADAPT {
            let cfg = RunConfig {
                mode,
                seed,
                ..template.clone()
            };
            let outcome = trainer::adapt(&cfg, base, train, log).and_then(|ck| {
                let steps = ck.optimizer.as_ref().map_or(0, |o| o.step);
                let report = match (&zero_shot, mode) {
                    (Some((bytes, rep)), Mode::A) if *bytes == ck.tensor_bytes() => rep.clone(),
                    _ => {
                        let rep = evaluate_checkpoint(&ck, eval, &opts)?.0;
                        if mode == Mode::A {
                            zero_shot = Some((ck.tensor_bytes(), rep.clone()));
                        }
                        rep
                    }
                };
                Ok((steps, report))
            });
            runs.push(match outcome {
                Ok((steps, r)) => ModeRun {
                    mode,
                    seed,
                    accuracy: Some(r.accuracy),
                    cer: Some(r.cer),
                    steps,
                    config_hash: cfg.hash_hex(),
                    error: None,
                },
                Err(e) => ModeRun {
                    mode,
                    seed,
                    accuracy: None,
                    cer: None,
                    steps: 0,
                    config_hash: cfg.hash_hex(),
                    error: Some(e.to_string()),
                },
            });
            log::info!(
                "ablation seed {seed} mode {mode}: {:?}",
                runs.last().map(|r| r.accuracy)
            );
        }
    }
    Ok(AblationReport::from_runs(
        seeds.to_vec(),
        base.config.hash_hex(),
        template.clone(),
        runs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook recursion, exponential but obviously correct.
    fn lev(a: &[char], b: &[char]) -> usize {
        match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = lev(ra, rb) + usize::from(x != y);
                sub.min(lev(ra, b) + 1).min(lev(a, rb) + 1)
            }
        }
    }

    fn all_strings(alphabet: &[char], max_len: usize) -> Vec<String> {
        let mut out = vec![String::new()];
        let mut frontier = vec![String::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for c in alphabet {
                    next.push(format!("{s}{c}"));
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn matches_recursive_oracle_exhaustively() {
        let strings = all_strings(&['a', 'b', 'c'], 3);
        assert_eq!(strings.len(), 1 + 3 + 9 + 27);
        for x in &strings {
            let xc: Vec<char> = x.chars().collect();
            for y in &strings {
                let yc: Vec<char> = y.chars().collect();
                let d = edit_distance(x, y);
                assert_eq!(d, lev(&xc, &yc), "{x:?} {y:?}");
                assert_eq!(d, edit_distance(y, x));
                assert_eq!(d == 0, x == y);
            }
        }
        for x in &strings {
            for y in &strings {
                for z in &strings {
                    assert!(edit_distance(x, z) <= edit_distance(x, y) + edit_distance(y, z));
                }
            }
        }
    }

    #[test]
    fn fixtures() {
        assert_eq!(edit_distance("ABC1234", "ABC1234"), 0);
        assert_eq!(edit_distance("ABC1234", "ABC123"), 1);
        assert_eq!(edit_distance("KITTEN", "SITTING"), 3);
        assert_eq!(cer("ABC1234", "ABC1234").unwrap(), 0.0);
        assert!((cer("AB12845", "AB12345").unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(cer("", "ABC1234").unwrap(), 1.0);
        assert!(cer("A", "").is_err());
    }

    fn pred(gt: &str, p: &str) -> Prediction {
        Prediction {
            file: String::new(),
            gt: gt.into(),
            pred: p.into(),
            cer: cer(p, gt).unwrap(),
        }
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let preds: Vec<_> = ["AB12345", "ZZZ9999"].iter().map(|g| pred(g, g)).collect();
        let r = summarize(&preds, 7).unwrap();
        assert_eq!((r.accuracy, r.cer), (1.0, 0.0));
        assert_eq!(r.per_position_accuracy, vec![1.0; 7]);
    }

    #[test]
    fn per_position_counts_aligned_characters() {
        let preds = vec![pred("AB12345", "AB1234"), pred("AB12345", "XB12345")];
        let r = summarize(&preds, 7).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(
            r.per_position_accuracy,
            vec![0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5]
        );
        let tsv = predictions_tsv(&preds);
        assert_eq!(tsv.lines().count(), 2);
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_samples(&(1..=100).map(f64::from).collect::<Vec<_>>());
        assert_eq!(s.p50, 51.0);
        assert_eq!(s.p95, 95.0);
        assert_eq!(s.mean, 50.5);
    }

    fn run(mode: Mode, seed: u64, acc: f64) -> ModeRun {
        ModeRun {
            mode,
            seed,
            accuracy: Some(acc),
            cer: Some(1.0 - acc),
            steps: 1,
            config_hash: String::new(),
            error: None,
        }
    }

    #[test]
    fn ablation_verdict_uses_medians() {
        let mut runs = Vec::new();
        for (seed, accs) in [
            (0, [0.2, 0.6, 0.4, 0.7]),
            (1, [0.2, 0.5, 0.45, 0.1]),
            (2, [0.2, 0.55, 0.3, 0.8]),
        ] {
            for (m, a) in Mode::ADAPT.into_iter().zip(accs) {
                runs.push(run(m, seed, a));
            }
        }
        let r = AblationReport::from_runs(vec![0, 1, 2], String::new(), RunConfig::default(), runs);
        assert!(r.complete);
        assert_eq!(r.medians["D"].accuracy, 0.7);
        let v = r.verdict.unwrap();
        assert!(v.holds && v.gap_target_met);
        assert_eq!(v.observed, "D > B > C > A");
    }

    #[test]
    fn failed_runs_make_the_report_incomplete() {
        let mut runs: Vec<_> = Mode::ADAPT.into_iter().map(|m| run(m, 0, 0.5)).collect();
        runs[3].accuracy = None;
        runs[3].error = Some("diverged".into());
        let r = AblationReport::from_runs(vec![0], String::new(), RunConfig::default(), runs);
        assert!(!r.complete && r.verdict.is_none());
    }
}
