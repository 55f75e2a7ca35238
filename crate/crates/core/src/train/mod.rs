//! Fine-tuning loop: per-sample timesteps, the denoising objective plus the
//! gated feedback terms on `x̂₀`, and phased runs with checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{resolve, DatasetSource, RunConfig};
use crate::data::{load_dataset, TrainingSample};
use crate::detectors::synth::toy_vocabulary;
use crate::detectors::{synth_scene, DetectorBundle, SceneSampler};
use crate::diffusion::{reconstruct_x0_var, DecoderAdapter, IdentityDecoder, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    boundary_loss, combined_loss, gaze_loss, id_loss_from_embeddings, interaction_loss,
    pose_loss, reg_loss, HoiVocabulary, LossBreakdown,
};
use crate::policy::LossTerm;
use crate::tensor::Tensor;

pub mod denoiser;
pub mod optim;
pub mod sampling;

pub use denoiser::{
    Conditioning, DenoiserAdapter, DenoiserOutput, NamedParam, ParamGroup, ParamSet,
    PerfectDenoiser, ToyDenoiser,
};
pub use optim::AdamState;
pub use sampling::{sampling_timesteps, toy_sample, toy_sample_from};

/// Optimizer state and running statistics carried across steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
    /// Exponential moving average (factor 0.9) of the step breakdowns.
    pub rolling: Option<LossBreakdown>,
    /// Instances each term could not be evaluated on, summed over steps.
    pub skips: BTreeMap<LossTerm, u64>,
}

const ROLLING_DECAY: f64 = 0.9;

impl TrainState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            adam: AdamState::new(params),
            ..Self::default()
        }
    }

    fn record(&mut self, b: &LossBreakdown, skips: &BTreeMap<LossTerm, usize>) {
        self.step += 1;
        self.rolling = Some(match self.rolling.take() {
            None => b.clone(),
            Some(mut r) => {
                for term in LossTerm::ALL {
                    r.set(term, ROLLING_DECAY * r.get(term) + (1.0 - ROLLING_DECAY) * b.get(term));
                }
                r.total = ROLLING_DECAY * r.total + (1.0 - ROLLING_DECAY) * b.total;
                r.active = b.active.clone();
                r
            }
        });
        for (&k, &v) in skips {
            *self.skips.entry(k).or_default() += v as u64;
        }
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub timesteps: Vec<usize>,
    /// Batch mean of the per-sample breakdowns.
    pub breakdown: LossBreakdown,
    pub skips: BTreeMap<LossTerm, usize>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

struct SamplePass {
    grads: Vec<Tensor>,
    breakdown: LossBreakdown,
    skips: BTreeMap<LossTerm, usize>,
}

fn non_finite(term: LossTerm, step: u64) -> Error {
    Error::NonFinite {
        term: term.name().to_string(),
        step,
    }
}

/// Forward and backward pass for one sample at a given `(t, ε)`.
#[allow(clippy::too_many_arguments)]
fn sample_pass(
    denoiser: &dyn DenoiserAdapter,
    sample: &TrainingSample,
    t: usize,
    eps: &Tensor,
    detectors: &DetectorBundle,
    config: &RunConfig,
    schedule: &NoiseSchedule,
    step: u64,
) -> Result<SamplePass> {
    let tape = Tape::new();
    let params = denoiser.params().record(&tape, true);
    let x0 = sample.image.tensor();
    let (sa, sn) = schedule.coefficients(t)?;
    let zt = tape.constant(x0.zip_map(eps, |z, e| sa * z + sn * e));
    let cond = Conditioning::from_sample(sample, config.denoiser.token_dim);
    let out = denoiser.forward(&params, zt, t, &cond)?;

    let denoise = out.eps.sub_const(eps).square().mean();
    if !denoise.item().is_finite() {
        return Err(non_finite(LossTerm::Denoise, step));
    }
    let fb = &config.feedback;
    let mut parts = BTreeMap::from([(LossTerm::Denoise, denoise.item())]);
    let mut skips = BTreeMap::new();
    let mut total = denoise;
    let x0_hat = if LossTerm::FEEDBACK.iter().any(|&k| fb.coefficient(k, t) != 0.0) {
        let z0 = reconstruct_x0_var(zt, out.eps, schedule.alpha_bar(t)?);
        Some(IdentityDecoder.decode_var(z0)?.clamp_straight_through(0.0, 1.0))
    } else {
        None
    };
    let estimate = || x0_hat.ok_or_else(|| Error::invalid("x0_hat", "not computed"));
    for term in LossTerm::AUXILIARY {
        let c = fb.coefficient(term, t);
        if c == 0.0 {
            continue;
        }
        let (value, skipped) = match term {
            LossTerm::Reg => match (&cond.query, out.aligned) {
                (Some(q), Some(a)) => (reg_loss(tape.constant(q.clone()), a)?, 0),
                _ => (tape.scalar(0.0), 1),
            },
            LossTerm::Boundary => (
                boundary_loss(tape.constant(x0.clone()), estimate()?, &sample.boundary())?,
                0,
            ),
            LossTerm::Id => {
                let (boxes, refs) = sample.faces_with_identity();
                let v = id_loss_from_embeddings(&refs, estimate()?, &boxes, detectors.face.as_ref())?;
                (v.value, v.skipped)
            }
            LossTerm::Gaze => {
                let v = gaze_loss(&sample.gaze, estimate()?, detectors.gaze.as_ref())?;
                (v.value, v.skipped)
            }
            LossTerm::Pose => {
                let v = pose_loss(
                    tape.constant(x0.clone()),
                    estimate()?,
                    &sample.pose_boxes(),
                    detectors.pose.as_ref(),
                )?;
                (v.value, v.skipped)
            }
            LossTerm::Interaction => {
                let v = interaction_loss(
                    &sample.hoi_labels,
                    estimate()?,
                    detectors.hoi.as_ref(),
                    config.focal,
                )?;
                (v.value, v.skipped)
            }
            LossTerm::Denoise => unreachable!("not auxiliary"),
        };
        if !value.item().is_finite() {
            return Err(non_finite(term, step));
        }
        if skipped > 0 {
            skips.insert(term, skipped);
        }
        parts.insert(term, value.item());
        total = total.add(value.scale(c));
    }
    let breakdown = combined_loss(&parts, t, fb)?;
    debug_assert_eq!(breakdown.total.to_bits(), total.item().to_bits());
    let g = tape.backward(total);
    Ok(SamplePass {
        grads: params.iter().map(|&p| g.get_or_zeros(p)).collect(),
        breakdown,
        skips,
    })
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut out = LossBreakdown::default();
    for term in LossTerm::ALL {
        out.set(term, parts.iter().map(|b| b.get(term)).sum::<f64>() / n);
    }
    out.total = parts.iter().map(|b| b.total).sum::<f64>() / n;
    out.active = parts.iter().flat_map(|b| b.active.iter().copied()).collect::<BTreeSet<_>>();
    out
}

/// One optimisation step on `batch`: a timestep and a noise draw per sample,
/// the gated objective, and one Adam update on the batch-mean gradient.
///
/// With `config.parallel > 1` the per-sample passes run on worker threads;
/// results are reduced in batch order, so the outcome does not depend on the
/// thread count.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[&TrainingSample],
    denoiser: &mut dyn DenoiserAdapter,
    detectors: &DetectorBundle,
    config: &RunConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("training batch".into()));
    }
    let draws: Vec<(usize, Tensor)> = batch
        .iter()
        .map(|s| {
            let t = config.forced_t.unwrap_or_else(|| config.sampler.sample(rng));
            let eps = Tensor::from_fn(s.image.tensor().shape(), |_| StandardNormal.sample(rng));
            (t, eps)
        })
        .collect();
    let step = state.step;
    let den: &dyn DenoiserAdapter = denoiser;
    let run = |i: usize| {
        sample_pass(den, batch[i], draws[i].0, &draws[i].1, detectors, config, schedule, step)
    };
    let workers = config.parallel.clamp(1, batch.len());
    let passes: Vec<Result<SamplePass>> = if workers == 1 {
        (0..batch.len()).map(run).collect()
    } else {
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..batch.len())
                .step_by(chunk)
                .map(|lo| {
                    let run = &run;
                    s.spawn(move || (lo..(lo + chunk).min(batch.len())).map(run).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;

    let n = passes.len() as f64;
    let mut grads: Vec<Tensor> = denoiser
        .params()
        .tensors()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut skips = BTreeMap::new();
    for p in &passes {
        for (acc, g) in grads.iter_mut().zip(&p.grads) {
            acc.add_assign(g);
        }
        for (&k, &v) in &p.skips {
            *skips.entry(k).or_insert(0) += v;
        }
    }
    let grads: Vec<Tensor> = grads.into_iter().map(|g| g.map(|v| v / n)).collect();
    let breakdown = mean_breakdown(&passes.iter().map(|p| p.breakdown.clone()).collect::<Vec<_>>());
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::NonFinite {
            term: term.to_string(),
            step,
        });
    }
    let grad_norm = if denoiser.params().is_empty() {
        0.0
    } else {
        state.adam.step(denoiser.params_mut(), &grads, &config.optim)?
    };
    state.record(&breakdown, &skips);
    Ok(StepOutput {
        timesteps: draws.iter().map(|d| d.0).collect(),
        breakdown,
        skips,
        grad_norm,
    })
}

/// Seed of the random stream used by global step `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes drawn from one seeded stream.
pub fn synthetic_dataset(count: usize, seed: u64, sampler: &SceneSampler) -> Result<Vec<TrainingSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = sampler.sample(&mut rng, &format!("synth-{seed}-{i:05}"))?;
            Ok(synth_scene(&spec)?.1)
        })
        .collect()
}

/// Loads or generates the samples of one phase. Manifest paths are resolved
/// against `base`.
pub fn load_phase_dataset(
    source: &DatasetSource,
    base: Option<&Path>,
    vocab: &HoiVocabulary,
) -> Result<Vec<TrainingSample>> {
    match source {
        DatasetSource::Manifest(p) => load_dataset(&resolve(base, p), vocab),
        DatasetSource::Synthetic(s) => synthetic_dataset(s.count, s.seed, &s.scene),
    }
}

/// Datasets for every configured phase.
pub fn load_datasets(config: &RunConfig, base: Option<&Path>) -> Result<Vec<Vec<TrainingSample>>> {
    let vocab = toy_vocabulary();
    config
        .phases
        .iter()
        .map(|p| load_phase_dataset(&p.dataset, base, &vocab))
        .collect()
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub phase_index: usize,
    /// Global step, counted from 1.
    pub step: u64,
    pub timesteps: Vec<usize>,
    pub breakdown: LossBreakdown,
    pub skips: BTreeMap<LossTerm, usize>,
    pub grad_norm: f64,
    pub config_hash: String,
}

/// Parameters, optimizer state and run position at a phase boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: RunConfig,
    /// Number of phases completed.
    pub phases_done: usize,
    pub params: ParamSet,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            location: path.display().to_string(),
            field: "checkpoint".into(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    /// Fresh state around `params`; the run starts at the first phase.
    pub fn start(config: &RunConfig, params: ParamSet) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            phases_done: 0,
            state: TrainState::new(&params),
            params,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where to write checkpoints and `loss_log.jsonl`; nothing is written
    /// when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this phase boundary instead of a fresh initialisation.
    pub resume: Option<Checkpoint>,
    /// Stop once this many phases are complete.
    pub stop_after: Option<usize>,
}

pub struct RunOutcome {
    pub denoiser: ToyDenoiser,
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub phases_done: usize,
}

pub const LOSS_LOG: &str = "loss_log.jsonl";

fn checkpoint_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("ckpt-{index:02}-{safe}.json")
}

/// Runs the configured phases in order, one dataset per phase.
///
/// A fresh run writes an initial checkpoint, then one per completed phase.
/// Every step draws its batch, timesteps and noise from a stream seeded by
/// the root seed and the global step, so a run resumed from a phase
/// boundary logs exactly what the uninterrupted run logged.
pub fn run_phases(
    config: &RunConfig,
    datasets: &[Vec<TrainingSample>],
    options: RunOptions,
) -> Result<RunOutcome> {
    config.validate()?;
    if datasets.len() != config.phases.len() {
        return Err(Error::Config(format!(
            "{} datasets for {} phases",
            datasets.len(),
            config.phases.len()
        )));
    }
    let schedule = config.schedule.build()?;
    let detectors = config.adapters.build()?;
    let hash = config.hash();
    let fresh = options.resume.is_none();
    let ckpt = match options.resume {
        Some(c) => c,
        None => Checkpoint::start(config, ToyDenoiser::new(&config.denoiser)?.params().clone()),
    };
    if ckpt.phases_done > config.phases.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} phases done but the config has {}",
            ckpt.phases_done,
            config.phases.len()
        )));
    }
    let mut denoiser = ToyDenoiser::from_params(&config.denoiser, ckpt.params)?;
    let mut state = ckpt.state;
    let stop = options.stop_after.unwrap_or(config.phases.len()).min(config.phases.len());

    let mut log_file = None;
    let mut checkpoints = Vec::new();
    let save = |index: usize, name: &str, denoiser: &ToyDenoiser, state: &TrainState| -> Result<Option<PathBuf>> {
        let Some(dir) = &options.out_dir else {
            return Ok(None);
        };
        let dir = dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(checkpoint_name(index, name));
        Checkpoint {
            config_hash: hash.clone(),
            config: config.clone(),
            phases_done: index,
            params: denoiser.params().clone(),
            state: state.clone(),
        }
        .save(&path)?;
        Ok(Some(path))
    };
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG);
        log_file = Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path));
    }
    if fresh {
        checkpoints.extend(save(0, "init", &denoiser, &state)?);
    }

    let mut log = Vec::new();
    for (pi, phase) in config.phases.iter().enumerate().take(stop).skip(ckpt.phases_done) {
        let data = &datasets[pi];
        if data.is_empty() {
            return Err(Error::EmptyDataset(format!("phase `{}`", phase.name)));
        }
        for _ in 0..phase.steps {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(config.seed, state.step));
            let k = config.batch_size.min(data.len());
            let batch: Vec<&TrainingSample> = rand::seq::index::sample(&mut rng, data.len(), k)
                .into_iter()
                .map(|i| &data[i])
                .collect();
            let out = train_step(&mut state, &batch, &mut denoiser, &detectors, config, &schedule, &mut rng)?;
            let rec = StepRecord {
                phase: phase.name.clone(),
                phase_index: pi,
                step: state.step,
                timesteps: out.timesteps,
                breakdown: out.breakdown,
                skips: out.skips,
                grad_norm: out.grad_norm,
                config_hash: hash.clone(),
            };
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*path, e))?;
            }
            log.push(rec);
        }
        checkpoints.extend(save(pi + 1, &phase.name, &denoiser, &state)?);
    }
    Ok(RunOutcome {
        denoiser,
        state,
        log,
        checkpoints,
        phases_done: stop.max(ckpt.phases_done),
    })
}

/// Reads a loss log written by [`run_phases`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                location: format!("{}:{}", path.display(), i + 1),
                field: "record".into(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Mean noise-prediction MSE over `samples` with one fixed `(t, ε)` draw per
/// sample from `seed`; `t` follows the configured sampler.
pub fn denoise_mse(
    denoiser: &dyn DenoiserAdapter,
    samples: &[TrainingSample],
    config: &RunConfig,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("denoise evaluation".into()));
    }
    let schedule = config.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in samples {
        let t = config.sampler.sample(&mut rng);
        let x0 = s.image.tensor();
        let eps = Tensor::from_fn(x0.shape(), |_| StandardNormal.sample(&mut rng));
        let (sa, sn) = schedule.coefficients(t)?;
        let zt = crate::diffusion::LatentGrid::new(x0.zip_map(&eps, |z, e| sa * z + sn * e))?;
        let cond = Conditioning::from_sample(s, config.denoiser.token_dim);
        let pred = denoiser.predict_noise(&zt, t, &cond)?;
        total += pred.tensor().zip_map(&eps, |a, b| (a - b) * (a - b)).mean();
    }
    Ok(total / samples.len() as f64)
}
