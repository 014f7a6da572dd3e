use advface::attacks::craft_with_generator;
use advface::data::{synth_faces, Sample};
use advface::detector::{detect, AnchorConfig, DetectorWeights, TEST_PROPOSAL_CAP};
use advface::generator::{GeneratorConfig, GeneratorWeights};
use advface::par;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

const BATCH: usize = 16;

fn batch() -> Vec<Sample> {
    synth_faces(BATCH, (64, 64), 9).unwrap().preprocessed((64, 64)).unwrap()
}

fn detection(c: &mut Criterion) {
    let data = batch();
    let det = DetectorWeights::initialize(AnchorConfig::default(), (64, 64), 1);
    let run = |s: &Sample| detect(&s.image, &det, 0.7, TEST_PROPOSAL_CAP, 0.5).len();
    let mut group = c.benchmark_group(format!("detect_batch_{BATCH}"));
    group.sample_size(10);
    group.bench_function("par_map", |b| b.iter(|| black_box(par::map(&data, run))));
    group.bench_function("map_seq", |b| b.iter(|| black_box(par::map_seq(&data, run))));
    group.finish();
}

fn crafting(c: &mut Criterion) {
    let data = batch();
    let g = GeneratorWeights::initialize(GeneratorConfig::default(), (64, 64), 1).unwrap();
    let run = |s: &Sample| craft_with_generator(&s.image, &g).unwrap();
    let mut group = c.benchmark_group(format!("generator_batch_{BATCH}"));
    group.sample_size(10);
    group.bench_function("par_map", |b| b.iter(|| black_box(par::map(&data, run))));
    group.bench_function("map_seq", |b| b.iter(|| black_box(par::map_seq(&data, run))));
    group.finish();
}

criterion_group!(benches, detection, crafting);
criterion_main!(benches);
