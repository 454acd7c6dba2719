//! Benchmarks of the data-parallel pipeline stages.
//!
//! Run `cargo bench` for the parallel backend and
//! `cargo bench --no-default-features` for the sequential fallback; group
//! names carry the active mode so the two reports line up side by side.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use std::sync::Arc;

use privlens::metrics::video_ssim;
use privlens::models::{forward_c_graph, ClassifierC};
use privlens::optics::{psf_stack, OpticsConfig};
use privlens::par;
use privlens::sensor::{acquire_video, SensorConfig};
use privlens::synthdata::{make_dataset, Dataset};
use privlens::trainer::{train_adversary_sgd, TrainConfig};
use privlens::autodiff::Tape;
use privlens::zernike::{build_basis, compose_mask, PupilGrid, ZernikeCoefficients};

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_dataset() -> Dataset {
    make_dataset(32, 8, 42).expect("dataset")
}

fn bench_zernike_basis(c: &mut Criterion) {
    let grid = PupilGrid::new(256, 5e-3).unwrap();
    c.bench_function(&format!("zernike_basis_q15_n256/{}", mode()), |b| {
        b.iter(|| build_basis(black_box(&grid), 15).unwrap())
    });
}

fn bench_psf_stack(c: &mut Criterion) {
    let grid = PupilGrid::new(128, 5e-3).unwrap();
    let basis = build_basis(&grid, 15).unwrap();
    let alpha = ZernikeCoefficients::new(
        (0..15).map(|i| 0.05 * (i as f64 - 7.0)).collect(),
    )
    .unwrap();
    let mask = compose_mask(&basis, &alpha).unwrap();
    let cfg = OpticsConfig {
        psf_size: 21,
        object_distance: 0.4,
        propagation_distance: 0.4,
        ..OpticsConfig::default()
    };
    c.bench_function(&format!("psf_stack_n128/{}", mode()), |b| {
        b.iter(|| psf_stack(black_box(&mask), black_box(&cfg)).unwrap())
    });
}

fn bench_acquire_video(c: &mut Criterion) {
    let dataset = bench_dataset();
    let grid = PupilGrid::new(64, 5e-3).unwrap();
    let basis = build_basis(&grid, 15).unwrap();
    let alpha = ZernikeCoefficients::new((0..15).map(|i| 0.03 * i as f64).collect()).unwrap();
    let mask = compose_mask(&basis, &alpha).unwrap();
    let cfg = OpticsConfig {
        psf_size: 13,
        object_distance: 0.75,
        propagation_distance: 0.75,
        ..OpticsConfig::default()
    };
    let psf = psf_stack(&mask, &cfg).unwrap();
    let sensor = SensorConfig {
        noise_sigma: 0.01,
        ..SensorConfig::default()
    };
    let clip = dataset.train[0].video.clone();
    c.bench_function(&format!("acquire_video_t8/{}", mode()), |b| {
        b.iter(|| acquire_video(black_box(&clip), black_box(&psf), black_box(&sensor)).unwrap())
    });
}

fn bench_video_ssim(c: &mut Criterion) {
    let dataset = bench_dataset();
    let a = dataset.train[0].video.clone();
    let b_clip = dataset.train[1].video.clone();
    c.bench_function(&format!("video_ssim_t8/{}", mode()), |b| {
        b.iter(|| video_ssim(black_box(&a), black_box(&b_clip)).unwrap())
    });
}

fn bench_classifier_grad(c: &mut Criterion) {
    let dataset = bench_dataset();
    let model = ClassifierC::init(12, 4, 1);
    let clip = dataset.train[0].video.clone();
    c.bench_function(&format!("classifier_forward_backward/{}", mode()), |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let frames: Vec<_> = clip
                .frames()
                .iter()
                .map(|f| tape.leaf(f.to_tensor()))
                .collect();
            let graph = forward_c_graph(&mut tape, &model, &frames);
            let loss = tape.softmax_ce(graph.logits, 2);
            tape.backward(loss).unwrap();
            black_box(tape.grad(graph.leaves[0]).is_some())
        })
    });
}

fn bench_adversary_epoch(c: &mut Criterion) {
    let dataset = bench_dataset();
    let cfg = TrainConfig::desk_default(1);
    let videos: Vec<_> = dataset.train.iter().map(|cl| cl.video.clone()).collect();
    c.bench_function(&format!("adversary_one_epoch_32clips/{}", mode()), |b| {
        b.iter_batched(
            || privlens::models::AdversaryA::init(8, 5, 7),
            |fresh| {
                let (model, _) = train_adversary_sgd(
                    fresh,
                    &dataset.train,
                    &videos,
                    cfg.attack_lr,
                    1,
                    cfg.batch,
                    3,
                );
                black_box(model)
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_dataset_render(c: &mut Criterion) {
    c.bench_function(&format!("render_dataset_32clips/{}", mode()), |b| {
        b.iter(|| black_box(make_dataset(32, 4, 9).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets =
        bench_zernike_basis,
        bench_psf_stack,
        bench_acquire_video,
        bench_video_ssim,
        bench_classifier_grad,
        bench_adversary_epoch,
        bench_dataset_render
}
criterion_main!(benches);
