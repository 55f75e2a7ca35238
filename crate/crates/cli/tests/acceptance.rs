//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits non-zero if any check fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use fbdiff_core::config::{DatasetSource, RunConfig, SyntheticSource};
use fbdiff_core::data::TrainingSample;
use fbdiff_core::detectors::{
    DetectorBundle, GazeAdapter, HoiAdapter, HoiPrediction,
    SceneSampler, ToyHoiDetector,
};
use fbdiff_core::diffusion::{add_noise, reconstruct_x0_latent, LatentGrid};
use fbdiff_core::evaluation::{
    gaze_accuracy, gaze_cases, greedy_identity_similarity, greedy_match, interaction_map,
    GazeCase, RankedDetection,
};
use fbdiff_core::geometry::BBox;
use fbdiff_core::losses::{
    boundary_loss, gaze_loss, id_loss, interaction_loss, pose_loss, FocalParams, GazeInstance,
    HoiLabelSet, IdentityEmbedding,
};
use fbdiff_core::policy::{FeedbackConfig, LossTerm, TimestepGate};
use fbdiff_core::profile::{profile_losses, NoisePredictor, ProfileSettings};
use fbdiff_core::train::{
    denoise_mse, load_datasets, run_phases, synthetic_dataset, toy_sample, train_step,
    Conditioning, DenoiserAdapter, RunOptions, ToyDenoiser, TrainState,
};
use fbdiff_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn scenes(count: usize, seed: u64) -> Vec<TrainingSample> {
    synthetic_dataset(count, seed, &SceneSampler::default()).expect("synthetic scenes")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the check does not share the crate's sampler
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// 1 ---------------------------------------------------------------------------

fn round_trip() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let sched = cfg.schedule.build().map_err(e2s)?;
    let steps = sched.num_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let t = match i {
            0 => 0,
            1 => steps - 1,
            _ => rng.random_range(0..steps),
        };
        let z0 = Tensor::from_fn(&[4, 8, 8], |_| rng.random_range(-3.0..3.0));
        let eps = Tensor::from_fn(&[4, 8, 8], |_| normal(&mut rng));
        let z0 = LatentGrid::new(z0).map_err(e2s)?;
        let eps = LatentGrid::new(eps).map_err(e2s)?;
        let zt = add_noise(&z0, &eps, t, &sched).map_err(e2s)?;
        let back = reconstruct_x0_latent(&zt, &eps, t, &sched).map_err(e2s)?;
        for (a, b) in back.tensor().data().iter().zip(z0.tensor().data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = start.elapsed();
    ensure(worst <= 1e-4, format!("max error {worst:e}"))?;
    ensure(took < Duration::from_secs(5), format!("took {took:?}"))?;
    Ok(format!("max |error| {worst:.2e} in {took:.2?}"))
}

// 2 ---------------------------------------------------------------------------

/// Saturated interaction head: logits of ±1000 that agree with `labels`.
struct Confident {
    labels: Vec<bool>,
}

impl HoiAdapter for Confident {
    fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn predict<'t>(&self, image: Var<'t>) -> Result<HoiPrediction<'t>> {
        let k = self.labels.len();
        let logits = image
            .tape()
            .constant(Tensor::from_fn(&[k], |i| if self.labels[i] { 1000.0 } else { -1000.0 }));
        Ok(HoiPrediction {
            logits,
            valid: vec![true; k],
            detections: Vec::new(),
        })
    }
}

fn feedback_losses<'t>(
    x0: Var<'t>,
    x0_hat: Var<'t>,
    sample: &TrainingSample,
    gaze_gt: &[GazeInstance],
    labels: &HoiLabelSet,
    det: &DetectorBundle,
    hoi: &dyn HoiAdapter,
) -> Result<Vec<(LossTerm, f64)>> {
    let focal = FocalParams::default();
    Ok(vec![
        (LossTerm::Boundary, boundary_loss(x0, x0_hat, &sample.boundary())?.item()),
        (LossTerm::Id, id_loss(x0, x0_hat, &sample.face_boxes(), det.face.as_ref())?.value.item()),
        (LossTerm::Gaze, gaze_loss(gaze_gt, x0_hat, det.gaze.as_ref())?.value.item()),
        (LossTerm::Pose, pose_loss(x0, x0_hat, &sample.pose_boxes(), det.pose.as_ref())?.value.item()),
        (LossTerm::Interaction, interaction_loss(labels, x0_hat, hoi, focal)?.value.item()),
    ])
}

/// Gaze annotations equal to what the detector reads off `image`.
fn gaze_from_detector(image: &Tensor, sample: &TrainingSample, gaze: &dyn GazeAdapter) -> Result<Vec<GazeInstance>> {
    let tape = Tape::new();
    let heads: Vec<BBox> = sample.gaze.iter().map(|g| g.head_bbox).collect();
    let preds = gaze.predict(tape.constant(image.clone()), &heads)?;
    Ok(heads
        .iter()
        .zip(preds)
        .filter_map(|(h, p)| {
            p.map(|p| {
                let v = p.target.value();
                GazeInstance {
                    head_bbox: *h,
                    target: [v.data()[0], v.data()[1]],
                }
            })
        })
        .collect())
}

fn zero_identity() -> Outcome {
    let cfg = RunConfig::default();
    let det = cfg.adapters.build().map_err(e2s)?;
    let data = scenes(24, 31);
    let mut evaluated = [0usize; 5];
    for sample in &data {
        let x = sample.image.tensor();
        let tape = Tape::new();
        let (x0, x0_hat) = (tape.constant(x.clone()), tape.constant(x.clone()));
        let gaze_gt = gaze_from_detector(x, sample, det.gaze.as_ref()).map_err(e2s)?;
        let k = det.hoi.num_classes();
        let confident = Confident {
            labels: sample.hoi_labels.targets(k),
        };
        let values = feedback_losses(x0, x0_hat, sample, &gaze_gt, &sample.hoi_labels, &det, &confident)
            .map_err(e2s)?;
        for (i, (term, v)) in values.iter().enumerate() {
            ensure(*v == 0.0, format!("{term} = {v:e} on {}", sample.id))?;
            evaluated[i] += 1;
        }
        // the toy interaction detector abstains, giving exactly zero, on
        // images too noisy for it
        let gate = ToyHoiDetector::new(k, cfg.adapters.hoi_seed, 0.0);
        let v = interaction_loss(&sample.hoi_labels, x0_hat, &gate, FocalParams::default()).map_err(e2s)?;
        ensure(v.value.item() == 0.0, format!("gated interaction {}", v.value.item()))?;
    }
    ensure(data.iter().any(|s| !s.gaze.is_empty()), "no gaze annotations in the scenes")?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut minimum = f64::INFINITY;
    for i in 0..1000 {
        let sample = &data[i % data.len()];
        let shape = sample.image.tensor().shape().to_vec();
        let a = Tensor::from_fn(&shape, |_| rng.random::<f64>());
        let b = Tensor::from_fn(&shape, |_| rng.random::<f64>());
        let gaze_gt: Vec<GazeInstance> = sample
            .gaze
            .iter()
            .map(|g| GazeInstance {
                head_bbox: g.head_bbox,
                target: [rng.random(), rng.random()],
            })
            .collect();
        let k = det.hoi.num_classes();
        let labels = HoiLabelSet((0..k).filter(|_| rng.random_bool(0.3)).collect());
        let tape = Tape::new();
        let values = feedback_losses(
            tape.constant(a),
            tape.constant(b),
            sample,
            &gaze_gt,
            &labels,
            &det,
            det.hoi.as_ref(),
        )
        .map_err(e2s)?;
        for (term, v) in values {
            ensure(v.is_finite() && v >= 0.0, format!("{term} = {v} on random input {i}"))?;
            minimum = minimum.min(v);
        }
    }
    Ok(format!(
        "exact zeros over {} scenes per loss; min over 1000 random inputs {minimum:.3e}",
        evaluated[0]
    ))
}

// 3 ---------------------------------------------------------------------------

fn central_difference(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let det = cfg.adapters.build().map_err(e2s)?;
    let data = scenes(16, 77);
    let sample = data
        .iter()
        .find(|s| !s.gaze.is_empty() && !s.face_boxes().is_empty() && !s.pose_boxes().is_empty())
        .ok_or("no scene with faces, gaze and pose")?;
    let x0 = sample.image.tensor().clone();
    let shape = x0.shape().to_vec();
    if shape[1..] != [16, 16] {
        return Err(format!("scene shape {shape:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Tensor::from_fn(x0.shape(), |_| rng.random::<f64>());
    let x_hat = x0.zip_map(&noise, |v, n| 0.7 * v + 0.3 * n);
    let focal = FocalParams::default();

    type LossFn = Box<dyn for<'t> Fn(Var<'t>, Var<'t>) -> Var<'t>>;
    let losses: Vec<(&str, LossFn)> = vec![
        ("boundary", {
            let b = sample.boundary();
            Box::new(move |x0, xh| boundary_loss(x0, xh, &b).unwrap())
        }),
        ("id", {
            let boxes = sample.face_boxes();
            let face = cfg.adapters.build().unwrap().face;
            Box::new(move |x0, xh| id_loss(x0, xh, &boxes, face.as_ref()).unwrap().value)
        }),
        ("gaze", {
            let gt = sample.gaze.clone();
            let gaze = cfg.adapters.build().unwrap().gaze;
            Box::new(move |_, xh| gaze_loss(&gt, xh, gaze.as_ref()).unwrap().value)
        }),
        ("pose", {
            let boxes = sample.pose_boxes();
            let pose = cfg.adapters.build().unwrap().pose;
            Box::new(move |x0, xh| pose_loss(x0, xh, &boxes, pose.as_ref()).unwrap().value)
        }),
        ("interaction", {
            let labels = sample.hoi_labels.clone();
            let hoi = cfg.adapters.build().unwrap().hoi;
            Box::new(move |_, xh| interaction_loss(&labels, xh, hoi.as_ref(), focal).unwrap().value)
        }),
    ];
    drop(det);

    let mut summary = Vec::new();
    let mut failed = Vec::new();
    for (name, loss) in &losses {
        let tape = Tape::new();
        let xh = tape.leaf(x_hat.clone());
        let out = loss(tape.constant(x0.clone()), xh);
        let grad = tape.backward(out).get_or_zeros(xh);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            loss(tape.constant(x0.clone()), tape.constant(x.clone())).item()
        };
        // half the coordinates uniformly, half among those with a gradient
        let n = x_hat.len();
        let mut coords: Vec<usize> = (0..128).map(|_| rng.random_range(0..n)).collect();
        let live: Vec<usize> = (0..n).filter(|&i| grad.data()[i].abs() > 1e-8).collect();
        if live.is_empty() {
            failed.push(format!("{name}: gradient is identically zero"));
            continue;
        }
        coords.extend((0..128).map(|_| live[rng.random_range(0..live.len())]));
        let mut good = 0;
        for &i in &coords {
            let a = grad.data()[i];
            let d = central_difference(&f, &x_hat, i, 1e-5);
            let scale = a.abs().max(d.abs()).max(1e-8);
            if (a - d).abs() / scale <= 1e-3 {
                good += 1;
            }
        }
        let frac = good as f64 / coords.len() as f64;
        summary.push(format!("{name} {:.1}%", 100.0 * frac));
        if frac < 0.95 {
            failed.push(format!("{name}: {:.1}% within tolerance", 100.0 * frac));
        }
    }
    let took = start.elapsed();
    ensure(failed.is_empty(), failed.join("; "))?;
    ensure(took < Duration::from_secs(120), format!("took {took:?}"))?;
    Ok(format!("{} in {took:.2?}", summary.join(", ")))
}

// 4 ---------------------------------------------------------------------------

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.batch_size = 4;
    c.phases.truncate(1);
    c.phases[0].steps = 3;
    c.phases[0].dataset = DatasetSource::Synthetic(SyntheticSource {
        count: 16,
        seed: 9,
        scene: SceneSampler::default(),
    });
    c
}

fn steps(config: &RunConfig, n: usize) -> Result<(Vec<u64>, Vec<Tensor>)> {
    let data = load_datasets(config, None)?;
    let batch: Vec<&TrainingSample> = data[0].iter().take(config.batch_size).collect();
    let mut den = ToyDenoiser::new(&config.denoiser)?;
    let det = config.adapters.build()?;
    let sched = config.schedule.build()?;
    let mut state = TrainState::new(den.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut totals = Vec::new();
    for _ in 0..n {
        let out = train_step(&mut state, &batch, &mut den, &det, config, &sched, &mut rng)?;
        totals.push(out.breakdown.total.to_bits());
    }
    Ok((totals, den.params().tensors().cloned().collect()))
}

fn gate_semantics() -> Outcome {
    let expected: [(usize, [bool; 4]); 4] = [
        // gaze, id, interaction, pose
        (250, [false, true, true, true]),
        (450, [false, false, true, true]),
        (600, [false, false, false, true]),
        (750, [false, false, false, false]),
    ];
    let terms = [LossTerm::Gaze, LossTerm::Id, LossTerm::Interaction, LossTerm::Pose];
    for (t, on) in expected {
        let mut c = small_config();
        c.forced_t = Some(t);
        let data = load_datasets(&c, None).map_err(e2s)?;
        let batch: Vec<&TrainingSample> = data[0].iter().take(c.batch_size).collect();
        let mut den = ToyDenoiser::new(&c.denoiser).map_err(e2s)?;
        let det = c.adapters.build().map_err(e2s)?;
        let sched = c.schedule.build().map_err(e2s)?;
        let mut state = TrainState::new(den.params());
        let out = train_step(&mut state, &batch, &mut den, &det, &c, &sched, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(e2s)?;
        for (term, want) in terms.iter().zip(on) {
            let active = out.breakdown.active.contains(term);
            ensure(active == want, format!("t={t}: {term} active={active}"))?;
            if !want {
                ensure(out.breakdown.get(*term) == 0.0, format!("t={t}: {term} nonzero while gated"))?;
            }
        }
    }
    for term in LossTerm::AUXILIARY {
        let mut everything = small_config();
        for k in LossTerm::AUXILIARY {
            everything.feedback.lambdas.insert(k, 0.5);
        }
        let mut zero = everything.clone();
        zero.feedback.lambdas.insert(term, 0.0);
        let mut gated = everything.clone();
        gated.feedback.gates.set(term, TimestepGate::EMPTY);
        let a = steps(&zero, 3).map_err(e2s)?;
        let b = steps(&gated, 3).map_err(e2s)?;
        ensure(a.0 == b.0, format!("{term}: totals differ"))?;
        ensure(a.1 == b.1, format!("{term}: parameters differ"))?;
    }
    let mut all_zero = small_config();
    all_zero.feedback = FeedbackConfig::baseline(1000);
    let mut all_gated = small_config();
    for k in LossTerm::AUXILIARY {
        all_gated.feedback.gates.set(k, TimestepGate::EMPTY);
    }
    ensure(
        steps(&all_zero, 3).map_err(e2s)? == steps(&all_gated, 3).map_err(e2s)?,
        "all-zero and all-gated runs differ",
    )?;
    Ok("pattern at 250/450/600/750 as gated; λ=0 and empty-gate runs bitwise equal for every term".into())
}

// 5 ---------------------------------------------------------------------------

fn sampler_distribution() -> Outcome {
    let cfg = RunConfig::default();
    let spec = &cfg.sampler;
    let n = 300_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bins = [0u64; 20];
    let (mut low, mut high) = (0u64, 0u64);
    for _ in 0..n {
        let t = spec.sample(&mut rng);
        if t >= 1000 {
            return Err(format!("draw {t} out of range"));
        }
        if t < 500 {
            low += 1;
        } else {
            high += 1;
        }
        bins[t / 50] += 1;
    }
    let ratio = low as f64 / high as f64;
    // expected mass per bin from the two-level density, computed here
    let mass = |t: usize| if t < 500 { 2.0 } else { 1.0 };
    let total: f64 = (0..1000).map(mass).sum();
    let chi2: f64 = bins
        .iter()
        .enumerate()
        .map(|(b, &obs)| {
            let e = n as f64 * (b * 50..(b + 1) * 50).map(mass).sum::<f64>() / total;
            (obs as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(19.0).map_err(e2s)?.cdf(chi2);
    ensure((1.95..=2.05).contains(&ratio), format!("ratio {ratio:.4}"))?;
    ensure(p > 0.01, format!("chi-square {chi2:.2}, p = {p:.4}"))?;
    Ok(format!("ratio {ratio:.4}, chi-square {chi2:.2} (p = {p:.3})"))
}

// 6 ---------------------------------------------------------------------------

fn random_unit(rng: &mut ChaCha8Rng, coarse: bool) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..3)
            .map(|_| {
                if coarse {
                    rng.random_range(-1..=1) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = ["cup", "ball", "book"];
    for inst in 0..200 {
        let images = rng.random_range(1..=4);
        let classes = rng.random_range(1..=3);

        let gt: Vec<BTreeSet<usize>> = (0..images)
            .map(|_| (0..classes).filter(|_| rng.random_bool(0.5)).collect())
            .collect();
        let dets: Vec<(usize, f64, usize)> = (0..rng.random_range(0..=8))
            .map(|_| {
                let score = rng.random_range(0..5) as f64 / 4.0;
                (rng.random_range(0..classes), score, rng.random_range(0..images))
            })
            .collect();
        let rare: BTreeSet<usize> = (0..classes).filter(|_| rng.random_bool(0.5)).collect();
        let got = interaction_map(
            &dets
                .iter()
                .map(|&(class_id, score, image_id)| RankedDetection {
                    class_id,
                    score,
                    image_id,
                })
                .collect::<Vec<_>>(),
            &gt.iter().map(|g| HoiLabelSet(g.clone())).collect::<Vec<_>>(),
            &rare,
        )
        .map_err(e2s)?;
        let want = common::oracle_map(&dets, &gt, &rare);
        ensure(
            (got.full, got.rare, got.non_rare) == want,
            format!("instance {inst}: map {:?} vs oracle {want:?}", (got.full, got.rare, got.non_rare)),
        )?;

        let coarse = rng.random_bool(0.5);
        let faces = |rng: &mut ChaCha8Rng| -> Vec<IdentityEmbedding> {
            let n = rng.random_range(0..=4);
            (0..n)
                .map(|_| IdentityEmbedding::normalized(random_unit(rng, coarse)).unwrap())
                .collect()
        };
        let wr: Vec<Vec<IdentityEmbedding>> = (0..images).map(|_| faces(&mut rng)).collect();
        let wg: Vec<Vec<IdentityEmbedding>> = (0..images).map(|_| faces(&mut rng)).collect();
        let plain = |x: &[Vec<IdentityEmbedding>]| -> Vec<Vec<Vec<f64>>> {
            x.iter().map(|img| img.iter().map(|e| e.values().to_vec()).collect()).collect()
        };
        let (refs, gens) = (plain(&wr), plain(&wg));
        let got = greedy_identity_similarity(&wr, &wg).map_err(e2s)?;
        let want = common::oracle_identity(&refs, &gens);
        ensure(got.mean == want, format!("instance {inst}: identity {:?} vs {want:?}", got.mean))?;

        let raw: Vec<common::RawGazeCase> = (0..rng.random_range(0..=4))
            .map(|_| {
                let targets: Vec<String> =
                    labels.iter().filter(|_| rng.random_bool(0.4)).map(|s| s.to_string()).collect();
                let boxes: Vec<(String, [f64; 4])> = (0..rng.random_range(0..=3))
                    .map(|_| {
                        let x0 = rng.random_range(0..4) as f64 / 4.0;
                        let y0 = rng.random_range(0..4) as f64 / 4.0;
                        let x1 = x0 + rng.random_range(1..=2) as f64 / 4.0;
                        let y1 = y0 + rng.random_range(1..=2) as f64 / 4.0;
                        (labels[rng.random_range(0..3)].to_string(), [x0, y0, x1.min(1.0), y1.min(1.0)])
                    })
                    .collect();
                let p = rng
                    .random_bool(0.9)
                    .then(|| [rng.random_range(0..=8) as f64 / 8.0, rng.random_range(0..=8) as f64 / 8.0]);
                (targets, boxes, p)
            })
            .collect();
        let cases: Vec<GazeCase> = raw
            .iter()
            .enumerate()
            .map(|(head_id, (t, b, p))| GazeCase {
                head_id,
                target_labels: t.iter().cloned().collect(),
                generated_boxes: b
                    .iter()
                    .map(|(l, c)| (l.clone(), BBox::new(c[0], c[1], c[2], c[3]).unwrap()))
                    .collect(),
                predicted: *p,
            })
            .collect();
        let acc = gaze_accuracy(&cases);
        let want = common::oracle_gaze(&raw);
        ensure(
            (acc.correct, acc.incorrect, acc.excluded, acc.percent) == want,
            format!("instance {inst}: gaze {acc:?} vs {want:?}"),
        )?;
    }

    // worked examples
    let picks = greedy_match(&[vec![0.9, 0.2], vec![0.8, 0.7]]);
    let mean = picks.iter().map(|p| p.2).sum::<f64>() / picks.len() as f64;
    ensure(picks == [(0, 0, 0.9), (1, 1, 0.7)], format!("greedy picks {picks:?}"))?;
    ensure((mean - 0.8).abs() < 1e-12, format!("greedy mean {mean}"))?;
    let cup = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
    let case = |labels: &[&str], p: [f64; 2]| GazeCase {
        head_id: 0,
        target_labels: labels.iter().map(|s| s.to_string()).collect(),
        generated_boxes: vec![("cup".into(), cup)],
        predicted: Some(p),
    };
    let mut cases = vec![case(&["cup"], [0.6, 0.6]); 6];
    cases.extend(vec![case(&["cup"], [0.1, 0.1]); 2]);
    cases.extend(vec![case(&[], [0.6, 0.6]); 2]);
    let acc = gaze_accuracy(&cases);
    ensure(acc.percent == Some(75.0), format!("gaze example {acc:?}"))?;
    Ok("200 random instances equal the oracles; worked examples 0.8 and 75%".into())
}

// 7 ---------------------------------------------------------------------------

const EFFICACY_LAMBDA: f64 = 0.05;

fn held_out_gaze(den: &ToyDenoiser, cfg: &RunConfig, held: &[TrainingSample]) -> Result<(f64, f64)> {
    let sched = cfg.schedule.build()?;
    let det = cfg.adapters.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = Vec::new();
    for s in held {
        let cond = Conditioning::from_sample(s, cfg.denoiser.token_dim);
        let shape = s.image.tensor().shape();
        let img = toy_sample(den, &cond, &sched, [shape[0], shape[1], shape[2]], 50, &mut rng)?;
        cases.extend(gaze_cases(&img, s, &det)?);
    }
    let acc = gaze_accuracy(&cases).percent.unwrap_or(0.0);
    Ok((acc, denoise_mse(den, held, cfg, 99)?))
}

fn feedback_efficacy() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for seed in 0..3u64 {
        let mut base = RunConfig::default();
        base.seed = seed;
        base.denoiser.init_seed = seed;
        base.phases.truncate(1);
        base.phases[0].steps = 500;
        base.phases[0].dataset = DatasetSource::Synthetic(SyntheticSource {
            count: 256,
            seed: 100 + seed,
            scene: SceneSampler::default(),
        });
        let train = load_datasets(&base, None).map_err(e2s)?;
        let held = scenes(64, 200 + seed);
        let mut arms = Vec::new();
        for lambda in [0.0, EFFICACY_LAMBDA] {
            let mut cfg = base.clone();
            cfg.feedback.lambdas.insert(LossTerm::Gaze, lambda);
            let out = run_phases(&cfg, &train, RunOptions::default()).map_err(e2s)?;
            arms.push(held_out_gaze(&out.denoiser, &cfg, &held).map_err(e2s)?);
        }
        let ((acc_off, mse_off), (acc_on, mse_on)) = (arms[0], arms[1]);
        lines.push(format!(
            "seed {seed}: gaze {acc_off:.1}% -> {acc_on:.1}%, mse ratio {:.3}",
            mse_on / mse_off
        ));
        if acc_on <= acc_off {
            failed.push(format!("seed {seed}: no accuracy gain"));
        }
        if mse_on > 1.1 * mse_off {
            failed.push(format!("seed {seed}: denoise mse up {:.1}%", 100.0 * (mse_on / mse_off - 1.0)));
        }
    }
    let took = start.elapsed();
    let detail = format!("{} in {took:.1?}", lines.join("; "));
    ensure(failed.is_empty(), format!("{}; {detail}", failed.join("; ")))?;
    ensure(took < Duration::from_secs(15 * 60), format!("took {took:?}"))?;
    Ok(detail)
}

// 8 ---------------------------------------------------------------------------

fn collapse_mechanism() -> Outcome {
    let cfg = RunConfig::default();
    let det = cfg.adapters.build().map_err(e2s)?;
    let sched = cfg.schedule.build().map_err(e2s)?;
    let gate = ToyHoiDetector::new(cfg.adapters.hoi_classes, cfg.adapters.hoi_seed, cfg.adapters.hoi_noise_gate);
    let data = scenes(12, 41);
    let t_grid: Vec<usize> = (0..1000).step_by(50).chain([999]).collect();
    let settings = ProfileSettings {
        schedule: &sched,
        detectors: &det,
        focal: cfg.focal,
        token_dim: cfg.denoiser.token_dim,
        seed: 3,
        hoi_gate: Some(&gate),
    };

    // an untrained model leaves x̂0 noisy at high t, which trips the gate
    let den = ToyDenoiser::new(&cfg.denoiser).map_err(e2s)?;
    let model = profile_losses(&data, NoisePredictor::Model(&den), &t_grid, &settings).map_err(e2s)?;
    let tripped: Vec<_> = model.cells.iter().filter(|c| c.hoi_gate_tripped).collect();
    ensure(!tripped.is_empty(), "the gate never tripped")?;
    for c in &tripped {
        let v = c.values.get(&LossTerm::Interaction).copied().flatten();
        ensure(v == Some(0.0), format!("sample {} t={}: interaction {v:?}", c.sample, c.t))?;
    }
    let curve = model
        .curves
        .iter()
        .find(|c| c.term == LossTerm::Interaction)
        .ok_or("no interaction curve")?;
    let mut all_tripped = 0;
    for (i, &t) in curve.t_grid.iter().enumerate() {
        let cells: Vec<_> = model.cells.iter().filter(|c| c.t == t).collect();
        if cells.iter().all(|c| c.hoi_gate_tripped) {
            all_tripped += 1;
            ensure(curve.raw[i] == 0.0, format!("curve at t={t} is {}", curve.raw[i]))?;
        }
    }

    let oracle = profile_losses(&data, NoisePredictor::Oracle, &t_grid, &settings).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    for c in oracle.curves.iter().filter(|c| matches!(c.term, LossTerm::Id | LossTerm::Pose | LossTerm::Boundary)) {
        for &v in &c.raw {
            worst = worst.max(v.abs());
        }
    }
    ensure(worst < 1e-9, format!("oracle curve reaches {worst:e}"))?;
    Ok(format!(
        "{} tripped cells all zero, curve zero at {all_tripped} fully tripped t; oracle id/pose/boundary max {worst:.1e}",
        tripped.len()
    ))
}

// 9 ---------------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let cfg = RunConfig::default();
    let dirs = [tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?];
    let mut logs = Vec::new();
    for d in &dirs {
        fbdiff_cli::cmd_train(&cfg, None, None, None, d.path()).map_err(e2s)?;
        logs.push(std::fs::read(d.path().join(fbdiff_core::train::LOSS_LOG)).map_err(e2s)?);
    }
    ensure(!logs[0].is_empty(), "empty loss log")?;
    ensure(logs[0] == logs[1], "loss logs differ")?;
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    Ok(format!("{lines} log lines, byte-identical"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("round trip", round_trip),
        ("loss zero identity", zero_identity),
        ("gradient fidelity", gradient_fidelity),
        ("gate semantics", gate_semantics),
        ("sampler distribution", sampler_distribution),
        ("metric oracle equivalence", metric_oracles),
        ("directional feedback efficacy", feedback_efficacy),
        ("interaction collapse", collapse_mechanism),
        ("reproducibility", reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} [{took:.1?}]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail} [{took:.1?}]", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
