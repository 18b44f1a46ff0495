use criterion::{criterion_group, criterion_main, Criterion};
use diffloc_core::data;
use diffloc_core::pipeline::{self, TrainConfig, Trainer};
use diffloc_core::{DType, Device, LocalizationModel, ModelConfig, Tensor};

fn forward(c: &mut Criterion) {
    let dev = Device::Cpu;
    let mut group = c.benchmark_group("forward_b8_64");
    group.sample_size(10);
    for (name, cfg) in [("compact", ModelConfig::compact()), ("desk", ModelConfig::default())] {
        let model = LocalizationModel::new(&cfg, 0, DType::F32, &dev).unwrap();
        let img = Tensor::rand(0f32, 1.0, (8, 3, 64, 64), &dev).unwrap();
        let xt = Tensor::randn(0f32, 1.0, (8, 1, 64, 64), &dev).unwrap();
        let ts = [1, 100, 200, 300, 400, 500, 600, 700];
        group.bench_function(name, |b| b.iter(|| model.forward(&img, &xt, &ts, 1000).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let samples = data::generate_synthetic(8, 64, 0).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let mut trainer = Trainer::new(&TrainConfig::desk(), 1_000_000, &Device::Cpu).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("desk_b8_64", |b| b.iter(|| trainer.train_step(&batch).unwrap()));
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let model = LocalizationModel::new(&cfg.model_config(), 0, DType::F32, &Device::Cpu).unwrap();
    let sched = cfg.schedule().unwrap();
    let (s, _) = data::synthetic_sample(0, 64, 0).unwrap();
    let mut group = c.benchmark_group("sample");
    group.sample_size(10);
    group.bench_function("desk_t10_64", |b| {
        b.iter(|| pipeline::sample(&model, &sched, &cfg.sampler(), &s.image, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward, train_step, sampling);
criterion_main!(benches);
