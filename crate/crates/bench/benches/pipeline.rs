use criterion::{criterion_group, criterion_main, Criterion};
use kltrace_bench::fixture;
use kltrace_core::model::{DecodeOrder, MaskSpec, RevealMode, RolloutJob, Sampling};
use kltrace_core::tracer::{TraceMode, TraceSettings, Tracer};

fn tokenizer(c: &mut Criterion) {
    let fx = fixture(64, 1, 32);
    let frame = &fx.clips[0].frames[0];
    c.bench_function("encode_64x64", |b| b.iter(|| fx.codebook.encode(frame).unwrap()));
}

fn rollout(c: &mut Criterion) {
    let fx = fixture(32, 2, 64);
    let f1 = fx.codebook.encode(&fx.clips[0].frames[0]).unwrap();
    let f2 = fx.codebook.encode(&fx.clips[0].frames[1]).unwrap();
    let mask = MaskSpec::new(RevealMode::RandomSubset, f1.len(), 0.1, 3).unwrap();
    let order = DecodeOrder::random(&mask, 4);
    let job = RolloutJob {
        f1: &f1,
        f2: &f2,
        mask: &mask,
        order: &order,
        sampling_seed: 5,
    };
    let sampling = Sampling::default();
    c.bench_function("rollout_8x8_grid", |b| b.iter(|| fx.model.rollout(&job, &sampling).unwrap()));
    c.bench_function("parallel_8x8_grid", |b| {
        b.iter(|| fx.model.predict_parallel(&f1, &f2, &mask, &sampling, 5).unwrap())
    });
}

fn trace(c: &mut Criterion) {
    let fx = fixture(32, 2, 64);
    let tracer = Tracer::new(&fx.model, &fx.codebook).unwrap();
    let clip = &fx.clips[0];
    let settings = TraceSettings::default();
    c.bench_function("trace_query_mm1", |b| {
        b.iter(|| {
            tracer
                .aggregate(&clip.frames[0], &clip.frames[1], [16.0, 16.0], &settings, &[TraceMode::Kl])
                .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tokenizer, rollout, trace
}
criterion_main!(benches);
