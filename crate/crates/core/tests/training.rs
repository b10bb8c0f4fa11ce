use slotlpr_core::evaluator::{evaluate_with_predictions, predictions_tsv, EvalOptions};
use slotlpr_core::trainer::{adapt, epoch_order, pretrain_backbone, Samples, StepLog, Trainer};
use slotlpr_core::{Checkpoint, Dataset, Mode, ModelConfig, Profile, RunConfig};

fn micro_config(mode: Mode, epochs: usize) -> RunConfig {
    let mut c = RunConfig::adapt(mode);
    c.model = ModelConfig::micro();
    c.optim.epochs = epochs;
    c.optim.batch_size = 8;
    c.optim.lr_backbone = 3e-3;
    c.seed = 5;
    c
}

fn plates(count: usize, seed: u64, profile: Profile) -> Dataset {
    Dataset::generate(count, seed, profile, &ModelConfig::micro().layout()).unwrap()
}

fn micro_base() -> Checkpoint {
    let cfg = micro_config(Mode::Pretrain, 3);
    pretrain_backbone(&cfg, &plates(40, 1, Profile::Clean), None, &mut |_| {}).unwrap()
}

fn collect(logs: &mut Vec<StepLog>) -> impl FnMut(&StepLog) + '_ {
    move |s: &StepLog| logs.push(s.clone())
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = micro_config(Mode::Pretrain, 4);
    let data = plates(36, 2, Profile::Clean);
    let samples = Samples::new(&data).unwrap();

    let mut straight_logs = Vec::new();
    let mut straight = Trainer::pretraining(cfg.clone(), data.len()).unwrap();
    straight
        .run(&samples, None, &mut collect(&mut straight_logs))
        .unwrap();

    // stop mid-epoch, round-trip through bytes, continue
    let mut logs = Vec::new();
    let mut first = Trainer::pretraining(cfg, data.len()).unwrap();
    first
        .run(&samples, Some(7), &mut collect(&mut logs))
        .unwrap();
    let bytes = first.checkpoint().to_bytes();
    let restored = Checkpoint::from_bytes(&bytes, None, false).unwrap();
    let mut second = Trainer::resume(restored, data.len()).unwrap();
    second.run(&samples, None, &mut collect(&mut logs)).unwrap();

    assert_eq!(straight.step_count(), 20);
    let det = |l: &[StepLog]| {
        l.iter()
            .map(StepLog::deterministic_part)
            .collect::<Vec<_>>()
    };
    assert_eq!(det(&logs), det(&straight_logs));
    assert_eq!(
        second.checkpoint().to_bytes(),
        straight.checkpoint().to_bytes()
    );
}

#[test]
fn logged_learning_rate_follows_warmup_then_cosine() {
    let mut cfg = micro_config(Mode::Pretrain, 5);
    cfg.optim.warmup_frac = 0.2;
    let data = plates(32, 3, Profile::Clean);
    let mut logs = Vec::new();
    let mut t = Trainer::pretraining(cfg.clone(), data.len()).unwrap();
    t.run(&Samples::new(&data).unwrap(), None, &mut collect(&mut logs))
        .unwrap();

    let total = 20.0;
    let warmup = 4.0;
    let (peak, floor) = (cfg.optim.lr_backbone, cfg.optim.lr_min);
    assert_eq!(logs.len(), 20);
    for l in &logs {
        let s = l.step as f64;
        let expected = if s <= warmup {
            peak * s / warmup
        } else {
            let p = (s - warmup) / (total - warmup);
            floor + (peak - floor) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
        };
        assert!((l.lr - expected).abs() < 1e-15, "step {}", l.step);
    }
    assert_eq!(logs[3].lr, peak);
    assert!((logs[19].lr - floor).abs() < 1e-15);
}

#[test]
fn mode_a_returns_the_base_weights() {
    let base = micro_base();
    let data = plates(16, 4, Profile::EvalHard);
    let a = adapt(&micro_config(Mode::A, 2), &base, &data, &mut |_| {
        panic!("mode A must not take a step")
    })
    .unwrap();
    assert_eq!(a.tensor_bytes(), base.tensor_bytes());
}

#[test]
fn cached_tokens_give_the_same_update_as_the_full_forward() {
    let base = micro_base();
    let data = plates(16, 5, Profile::EvalHard);
    let samples = Samples::new(&data).unwrap();
    let cfg = micro_config(Mode::D, 1);

    let mut cached = Trainer::adaptation(cfg.clone(), &base, data.len()).unwrap();
    cached.run(&samples, Some(1), &mut |_| {}).unwrap();

    // training_step on its own never builds the cache
    let mut direct = Trainer::adaptation(cfg.clone(), &base, data.len()).unwrap();
    let order = epoch_order(cfg.seed, 0, data.len());
    direct
        .training_step(&samples, &order[..cfg.optim.batch_size])
        .unwrap();

    assert_eq!(
        cached.checkpoint().tensor_bytes(),
        direct.checkpoint().tensor_bytes()
    );
}

#[test]
fn pretraining_lowers_the_loss() {
    let cfg = micro_config(Mode::Pretrain, 6);
    let data = plates(48, 6, Profile::Clean);
    let mut logs = Vec::new();
    pretrain_backbone(&cfg, &data, None, &mut collect(&mut logs)).unwrap();
    let head: f64 = logs[..6].iter().map(|l| l.loss).sum();
    let tail: f64 = logs[logs.len() - 6..].iter().map(|l| l.loss).sum();
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn report_agrees_with_its_predictions_and_ignores_sample_order() {
    let base = micro_base();
    let model = slotlpr_core::trainer::model_from_checkpoint(&base);
    let data = plates(40, 7, Profile::TrainDegraded);
    let opts = EvalOptions::without_latency();
    let (report, preds) = evaluate_with_predictions(&model, &data, &opts).unwrap();

    // recount from the serialized predictions, not from the structs
    let tsv = predictions_tsv(&preds);
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), data.len());
    let exact = rows.iter().filter(|r| r[1] == r[2]).count();
    assert_eq!(report.accuracy, exact as f64 / data.len() as f64);
    let cer_sum: f64 = rows.iter().map(|r| r[3].parse::<f64>().unwrap()).sum();
    assert!((report.cer - cer_sum / data.len() as f64).abs() < 1e-12);

    let rev: Vec<usize> = (0..data.len()).rev().collect();
    let (reversed, _) = evaluate_with_predictions(&model, &data.subset(&rev), &opts).unwrap();
    assert_eq!(reversed.accuracy, report.accuracy);
    assert_eq!(reversed.per_position_accuracy, report.per_position_accuracy);
    assert!((reversed.cer - report.cer).abs() < 1e-12);
}
