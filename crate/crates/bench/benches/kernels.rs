use criterion::{criterion_group, criterion_main, Criterion};
use defectgen_bench::toy;
use defectgen_core::metrics::{diversity, fid, RandomConvExtractor};
use defectgen_core::sampler::{sample_two_stage, SamplerConfig};
use defectgen_core::schedule::ScheduleParams;
use defectgen_core::seg::{train_seg, SegConfig};
use defectgen_core::trainer::{train, TrainConfig};
use defectgen_core::unet::{Denoiser, Preset};
use defectgen_core::Tensor;
use std::hint::black_box;

const RES: usize = 32;
const BASE: usize = 8;

fn denoiser(preset: Preset, seed: u64) -> Denoiser<f32> {
    Denoiser::new(preset.config(4, RES, BASE).unwrap(), seed).unwrap()
}

fn forward(c: &mut Criterion) {
    let x = Tensor::<f32>::from_vec([2, 4, RES, RES], (0..2 * 4 * RES * RES).map(|i| (i % 7) as f32 * 0.1).collect())
        .unwrap();
    let mut g = c.benchmark_group("denoiser_forward");
    for preset in [Preset::Small, Preset::Large] {
        let m = denoiser(preset, 0);
        g.bench_function(preset.name(), |b| b.iter(|| m.forward(black_box(&x), &[3, 7]).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let data = toy(8, RES, 0);
    let cfg = Preset::Small.config(4, RES, BASE).unwrap();
    let tc = TrainConfig::desk(50, 5, 0);
    c.bench_function("train_small_5_iters", |b| b.iter(|| train(&cfg, &data, &tc).unwrap()));
}

fn sampler(c: &mut Criterion) {
    let large = denoiser(Preset::Large, 1);
    let small = denoiser(Preset::Small, 2);
    let schedule = ScheduleParams::ddpm_scaled(10).build().unwrap();
    let cfg = SamplerConfig::new(10, 2, 2, 0);
    c.bench_function("two_stage_t10_batch2", |b| {
        b.iter(|| sample_two_stage(&large, &small, &schedule, &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let images: Vec<_> = toy(16, RES, 3).samples.into_iter().map(|s| s.image).collect();
    let f = RandomConvExtractor::new(0);
    c.bench_function("fid_16", |b| b.iter(|| fid(&images[..8], &images[8..], &f).unwrap()));
    c.bench_function("diversity_16", |b| b.iter(|| diversity(&images, &f).unwrap()));
}

fn seg(c: &mut Criterion) {
    let data = toy(8, RES, 4);
    let cfg = SegConfig::new(1, 0);
    c.bench_function("seg_one_epoch", |b| b.iter(|| train_seg(&data, &cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, train_step, sampler, metrics, seg
}
criterion_main!(benches);
