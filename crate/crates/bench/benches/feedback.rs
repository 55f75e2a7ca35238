use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fbdiff_core::config::RunConfig;
use fbdiff_core::data::TrainingSample;
use fbdiff_core::detectors::SceneSampler;
use fbdiff_core::evaluation::{interaction_map, RankedDetection};
use fbdiff_core::losses::{boundary_loss, gaze_loss, id_loss, interaction_loss, pose_loss, HoiLabelSet};
use fbdiff_core::train::{synthetic_dataset, train_step, DenoiserAdapter, ToyDenoiser, TrainState};
use fbdiff_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenes() -> Vec<TrainingSample> {
    synthetic_dataset(16, 1, &SceneSampler::default()).unwrap()
}

fn feedback_losses(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let det = cfg.adapters.build().unwrap();
    let data = scenes();
    let s = &data[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let jitter = Tensor::from_fn(s.image.tensor().shape(), |_| 0.1 * rng.random::<f64>());
    let x_hat = s.image.tensor().zip_map(&jitter, |v, j| (v + j).min(1.0));
    let mut group = c.benchmark_group("feedback");
    group.bench_function("forward_backward_all", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let x0 = tape.constant(s.image.tensor().clone());
            let xh = tape.leaf(x_hat.clone());
            let total = boundary_loss(x0, xh, &s.boundary())
                .unwrap()
                .add(id_loss(x0, xh, &s.face_boxes(), det.face.as_ref()).unwrap().value)
                .add(gaze_loss(&s.gaze, xh, det.gaze.as_ref()).unwrap().value)
                .add(pose_loss(x0, xh, &s.pose_boxes(), det.pose.as_ref()).unwrap().value)
                .add(interaction_loss(&s.hoi_labels, xh, det.hoi.as_ref(), cfg.focal).unwrap().value);
            black_box(tape.backward(total).get_or_zeros(xh))
        })
    });
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let det = cfg.adapters.build().unwrap();
    let sched = cfg.schedule.build().unwrap();
    let data = scenes();
    let batch: Vec<&TrainingSample> = data.iter().take(cfg.batch_size).collect();
    let mut den = ToyDenoiser::new(&cfg.denoiser).unwrap();
    let mut state = TrainState::new(den.params());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("train_step/batch8", |b| {
        b.iter(|| black_box(train_step(&mut state, &batch, &mut den, &det, &cfg, &sched, &mut rng).unwrap()))
    });
}

fn ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = 500;
    let gt: Vec<HoiLabelSet> = (0..images)
        .map(|_| HoiLabelSet((0..8).filter(|_| rng.random_bool(0.2)).collect()))
        .collect();
    let dets: Vec<RankedDetection> = (0..images * 8)
        .map(|i| RankedDetection {
            class_id: i % 8,
            score: rng.random(),
            image_id: i / 8,
        })
        .collect();
    let rare = (0..4).collect();
    c.bench_function("interaction_map/500x8", |b| {
        b.iter(|| black_box(interaction_map(&dets, &gt, &rare).unwrap()))
    });
}

criterion_group!(benches, feedback_losses, training_step, ranking);
criterion_main!(benches);
