use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slotlpr_bench::{plates, random, trainer};
use slotlpr_core::tensor::{AttnShape, Mask, Tape};
use slotlpr_core::trainer::Samples;
use slotlpr_core::Mode;

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    // [rows x 64] by [64 x out]: a single token, one image's tokens, a batch of 32
    for (m, n) in [(1, 64), (48, 64), (1536, 64), (1536, 128)] {
        let a = random(&[m, 64], 1);
        let w = random(&[n, 64], 2);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x64x{n}")),
            &(a, w),
            |b, (a, w)| b.iter(|| a.matmul(&w.transpose()).unwrap()),
        );
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let cases = [
        ("encoder", 32, 48, 48, Mask::None),
        ("decoder", 32, 58, 58, Mask::PrefixCausal(49)),
        ("slots", 32, 7, 48, Mask::None),
    ];
    for (name, batch, tq, tk, mask) in cases {
        let shape = AttnShape {
            batch,
            tq,
            tk,
            heads: 4,
            mask,
        };
        let q = random(&[batch * tq, 64], 3);
        let k = random(&[batch * tk, 64], 4);
        let v = random(&[batch * tk, 64], 5);
        group.bench_function(format!("{name}/forward_backward"), |b| {
            b.iter(|| {
                let mut t = Tape::new();
                let (qv, kv, vv) = (t.param(q.clone()), t.param(k.clone()), t.param(v.clone()));
                let o = t.attention(qv, kv, vv, shape).unwrap();
                let s = t.sum(o).unwrap();
                t.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("training_step");
    group.sample_size(10);
    let ds = plates(64);
    let samples = Samples::new(&ds).unwrap();
    let batch: Vec<usize> = (0..16).collect();
    for mode in [Mode::Pretrain, Mode::B, Mode::C, Mode::D] {
        let mut t = trainer(mode, samples.len(), 16);
        // the first run builds the frozen-token cache outside the timed loop
        t.run(&samples, Some(1), &mut |_| {}).unwrap();
        group.bench_function(format!("{mode}/batch16"), |b| {
            b.iter(|| t.training_step(&samples, &batch).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, attention, training_step);
criterion_main!(benches);
