//! The `fbdiff` command line: preprocess, train, sample, profile, eval and
//! report.
//!
//! Configuration is layered: defaults, then the `--config` file, then
//! `FBDIFF_*` environment variables, then `--set` and the dedicated flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use fbdiff_core::config::RunConfig;
use fbdiff_core::data::io::{read_image, write_image};
use fbdiff_core::data::manifest::{load_dataset, load_manifest, write_manifest, SampleManifest};
use fbdiff_core::data::preprocess::{preprocess, DropCounts};
use fbdiff_core::data::TrainingSample;
use fbdiff_core::detectors::synth::toy_vocabulary;
use fbdiff_core::detectors::SceneSampler;
use fbdiff_core::evaluation::{evaluate, rare_classes, EvalReport};
use fbdiff_core::policy::LossTerm;
use fbdiff_core::profile::{
    blur_boundary_experiment, curves_to_csv, emit_curves, profile_losses, NoisePredictor,
    ProfileSettings,
};
use fbdiff_core::train::{
    load_datasets, read_loss_log, run_phases, step_seed, synthetic_dataset, toy_sample, Checkpoint, Conditioning,
    DenoiserAdapter, RunOptions, ToyDenoiser, LOSS_LOG,
};
use fbdiff_core::{Error, ErrorKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Prefix of environment overrides: `FBDIFF_OPTIM__LR_BODY=1e-3` sets
/// `optim.lr_body`.
pub const ENV_PREFIX: &str = "FBDIFF_";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "fbdiff", version, about = "Timestep-gated feedback fine-tuning of a toy diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; overrides `parallel`.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes as a manifest under `<out>/synthetic`.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Scene seed; the root seed when omitted.
        #[arg(long)]
        scene_seed: Option<u64>,
    },
    /// Resize, crop and re-annotate a manifest.
    Preprocess {
        /// Input manifest (JSON lines).
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the configured training phases.
    Train {
        /// Run only this phase.
        #[arg(long)]
        phase: Option<String>,
        /// Continue from a phase-boundary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one image per reference sample.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Average feedback losses per timestep.
    Profile {
        /// Trained parameters; the configured initialisation when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Profile this manifest instead of the first phase's dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated timesteps; overrides `profile.t_grid`.
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<usize>>,
        /// Use the true noise instead of a model prediction.
        #[arg(long)]
        oracle: bool,
    },
    /// Score generated images against a reference manifest.
    Eval {
        /// Directory with one `<id>.png` per reference sample.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Manifest whose labels decide rare classes; the configured
        /// training data when omitted.
        #[arg(long)]
        train_manifest: Option<PathBuf>,
    },
    /// Summarise the artifacts in the output directory.
    Report,
}

/// Help text listing every configuration key with its default.
pub fn config_help() -> String {
    let mut s = String::from("Configuration keys (default):\n");
    for (k, v) in RunConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!(
        "\nEnvironment overrides: {ENV_PREFIX}<KEY> with `.` written as `__`, \
         e.g. {ENV_PREFIX}OPTIM__LR_BODY=0.001\n\
         Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort\n"
    ));
    s
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(config_help()).after_help(config_help())
}

pub fn parse_from<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let m = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&m)
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<CliError>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

/// Several per-sample failures reported together.
#[derive(Debug)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

/// `KEY=VALUE` pairs from environment variables carrying [`ENV_PREFIX`].
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let key = k.strip_prefix(ENV_PREFIX)?;
            Some((key.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// The effective configuration and the directory its relative paths
/// resolve against.
pub fn resolve_config(
    global: &GlobalArgs,
    env: &[(String, String)],
) -> Result<(RunConfig, Option<PathBuf>), Error> {
    let (mut cfg, base) = match &global.config {
        Some(p) => (RunConfig::load(p)?, p.parent().map(Path::to_path_buf)),
        None => (RunConfig::default(), None),
    };
    for (k, v) in env {
        cfg.set(k, v)?;
    }
    for o in &global.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(p) = global.parallel {
        cfg.parallel = p;
    }
    cfg.validate()?;
    Ok((cfg, base))
}

/// One structured progress line on stderr.
fn log_event<T: Serialize>(event: &str, body: &T) {
    let mut v = serde_json::to_value(body).unwrap_or_default();
    if let Some(m) = v.as_object_mut() {
        m.insert("event".into(), event.into());
    }
    eprintln!("{v}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let env = env_overrides(std::env::vars());
    run_with_env(cli, &env)
}

pub fn run_with_env(cli: &Cli, env: &[(String, String)]) -> anyhow::Result<()> {
    let (cfg, base) = resolve_config(&cli.global, env)?;
    let out = &cli.global.out;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    match &cli.command {
        Command::Synth { count, scene_seed } => {
            cmd_synth(&cfg, *count, scene_seed.unwrap_or(cfg.seed), out).map(|_| ())
        }
        Command::Preprocess { manifest } => cmd_preprocess(&cfg, manifest, out).map(|_| ()),
        Command::Train { phase, resume } => cmd_train(&cfg, base.as_deref(), phase.as_deref(), resume.as_deref(), out).map(|_| ()),
        Command::Sample {
            checkpoint,
            reference,
        } => cmd_sample(&cfg, checkpoint, reference, out),
        Command::Profile {
            checkpoint,
            manifest,
            t_grid,
            oracle,
        } => cmd_profile(&cfg, base.as_deref(), checkpoint.as_deref(), manifest.as_deref(), t_grid.clone(), *oracle, out),
        Command::Eval {
            generated,
            reference,
            train_manifest,
        } => cmd_eval(&cfg, base.as_deref(), generated, reference, train_manifest.as_deref(), out).map(|_| ()),
        Command::Report => cmd_report(out).map(|_| ()),
    }
}

pub const SYNTH_DIR: &str = "synthetic";

/// Saves `count` synthetic scenes and returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, count: usize, scene_seed: u64, out: &Path) -> anyhow::Result<PathBuf> {
    let dir = out.join(SYNTH_DIR);
    let samples = synthetic_dataset(count, scene_seed, &SceneSampler::default())?;
    let records = samples
        .iter()
        .map(|s| SampleManifest::save(s, &dir))
        .collect::<Result<Vec<_>, _>>()?;
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    log_event(
        "synth",
        &serde_json::json!({ "count": count, "manifest": path, "config_hash": cfg.hash() }),
    );
    Ok(path)
}

pub const PROCESSED_DIR: &str = "processed";
pub const PREPROCESS_STATS: &str = "preprocess_stats.json";

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PreprocessStats {
    pub samples: usize,
    pub subjects: usize,
    pub faces: usize,
    pub gaze: usize,
    pub interactions: usize,
    pub dropped: DropCounts,
    pub config_hash: String,
}

/// Writes `out/processed/manifest.jsonl` plus its files and
/// `out/preprocess_stats.json`.
pub fn cmd_preprocess(cfg: &RunConfig, manifest: &Path, out: &Path) -> anyhow::Result<PreprocessStats> {
    let vocab = toy_vocabulary();
    let records = load_manifest(manifest, Some(&vocab))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let dir = out.join(PROCESSED_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    if records.is_empty() {
        eprintln!("warning: {} has no samples", manifest.display());
    }
    let mut stats = PreprocessStats {
        samples: 0,
        subjects: 0,
        faces: 0,
        gaze: 0,
        interactions: 0,
        dropped: DropCounts::default(),
        config_hash: cfg.hash(),
    };
    let mut written = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let result = r.load(base, &vocab).and_then(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, i as u64));
            preprocess(&s, &cfg.preprocess, &mut rng)
        });
        match result {
            Ok((s, _, drops)) => {
                stats.samples += 1;
                stats.subjects += s.subjects.len();
                stats.faces += s.subjects.iter().filter(|x| x.face_bbox.is_some()).count();
                stats.gaze += s.gaze.len();
                stats.interactions += s.interactions.len();
                stats.dropped.add(&drops);
                written.push(SampleManifest::save(&s, &dir)?);
            }
            Err(e) => failures.push(format!("{}: {e}", r.id)),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("error: {f}");
        }
        return Err(CliError(format!("{} of {} samples failed", failures.len(), records.len())).into());
    }
    write_manifest(&dir.join("manifest.jsonl"), &written)?;
    write_json(&out.join(PREPROCESS_STATS), &stats)?;
    log_event("preprocess", &stats);
    Ok(stats)
}

pub const TRAIN_SUMMARY: &str = "train_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub phases_done: usize,
    pub checkpoints: Vec<PathBuf>,
    pub final_breakdown: Option<BTreeMap<LossTerm, f64>>,
    pub config_hash: String,
}

/// Runs the phases, writing `loss_log.jsonl`, `checkpoints/` and
/// `train_summary.json` under `out`.
pub fn cmd_train(
    cfg: &RunConfig,
    base: Option<&Path>,
    phase: Option<&str>,
    resume: Option<&Path>,
    out: &Path,
) -> anyhow::Result<TrainSummary> {
    let mut cfg = cfg.clone();
    if let Some(name) = phase {
        cfg.phases.retain(|p| p.name == name);
        if cfg.phases.is_empty() {
            return Err(Error::Config(format!("no phase named `{name}`")).into());
        }
    }
    let datasets = load_datasets(&cfg, base)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = run_phases(
        &cfg,
        &datasets,
        RunOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_after: None,
        },
    )?;
    let summary = TrainSummary {
        steps: outcome.state.step,
        phases_done: outcome.phases_done,
        checkpoints: outcome
            .checkpoints
            .iter()
            .map(|p| p.strip_prefix(out).unwrap_or(p).to_path_buf())
            .collect(),
        final_breakdown: outcome.log.last().map(|r| {
            LossTerm::ALL
                .into_iter()
                .map(|t| (t, r.breakdown.get(t)))
                .collect()
        }),
        config_hash: cfg.hash(),
    };
    write_json(&out.join(TRAIN_SUMMARY), &summary)?;
    log_event("train", &summary);
    Ok(summary)
}

pub const GENERATED_DIR: &str = "generated";

/// One image per reference sample into `out/generated/<id>.png`, plus
/// `generated/index.json` with the config hash.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, reference: &Path, out: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let den = ToyDenoiser::from_params(&cfg.denoiser, ckpt.params)?;
    let schedule = cfg.schedule.build()?;
    let samples = load_dataset(reference, &toy_vocabulary())?;
    let dir = out.join(GENERATED_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut ids = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let cond = Conditioning::from_sample(s, cfg.denoiser.token_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, i as u64));
        let shape = [3, s.image.height(), s.image.width()];
        let img = toy_sample(&den, &cond, &schedule, shape, cfg.sampling.steps, &mut rng)?;
        write_image(&dir.join(format!("{}.png", s.id)), &img)?;
        ids.push(s.id.clone());
    }
    let index = serde_json::json!({
        "ids": ids,
        "checkpoint_hash": ckpt.config_hash,
        "config_hash": cfg.hash(),
    });
    write_json(&dir.join("index.json"), &index)?;
    log_event("sample", &index);
    Ok(())
}

pub const PROFILE_CELLS: &str = "profile.json";
pub const BLUR_TABLE: &str = "blur_curve.csv";

#[allow(clippy::too_many_arguments)]
pub fn cmd_profile(
    cfg: &RunConfig,
    base: Option<&Path>,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    t_grid: Option<Vec<usize>>,
    oracle: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let params = match checkpoint {
        Some(p) => Checkpoint::load(p)?.params,
        None => ToyDenoiser::new(&cfg.denoiser)?.params().clone(),
    };
    let den = ToyDenoiser::from_params(&cfg.denoiser, params)?;
    let mut data: Vec<TrainingSample> = match manifest {
        Some(m) => load_dataset(m, &toy_vocabulary())?,
        None => {
            let mut first = cfg.clone();
            first.phases.truncate(1);
            load_datasets(&first, base)?.remove(0)
        }
    };
    data.truncate(cfg.profile.max_samples);
    let grid = t_grid.unwrap_or_else(|| cfg.profile.t_grid.clone());
    let schedule = cfg.schedule.build()?;
    let detectors = cfg.adapters.build()?;
    let hoi = fbdiff_core::detectors::toy::ToyHoiDetector::new(
        cfg.adapters.hoi_classes,
        cfg.adapters.hoi_seed,
        cfg.adapters.hoi_noise_gate,
    );
    let settings = ProfileSettings {
        schedule: &schedule,
        detectors: &detectors,
        focal: cfg.focal,
        token_dim: cfg.denoiser.token_dim,
        seed: cfg.seed,
        hoi_gate: Some(&hoi),
    };
    let predictor = if oracle {
        NoisePredictor::Oracle
    } else {
        NoisePredictor::Model(&den)
    };
    let profile = profile_losses(&data, predictor, &grid, &settings)?;
    let hash = cfg.hash();
    let (table, plot) = emit_curves(&profile.curves, out, &hash)?;
    write_json(
        &out.join(PROFILE_CELLS),
        &serde_json::json!({ "config_hash": hash, "profile": profile }),
    )?;
    let blur = blur_boundary_experiment(&data[0], predictor, &grid, cfg.profile.blur_radius, &settings)?;
    let blur_path = out.join(BLUR_TABLE);
    fs::write(&blur_path, curves_to_csv(&[blur], Some(&hash))).map_err(|e| Error::Io {
        path: blur_path.clone(),
        source: e,
    })?;
    log_event(
        "profile",
        &serde_json::json!({
            "samples": data.len(),
            "t_grid": grid,
            "table": table,
            "plot": plot,
            "config_hash": hash,
        }),
    );
    Ok(())
}

pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_TEXT: &str = "eval_report.txt";

pub fn cmd_eval(
    cfg: &RunConfig,
    base: Option<&Path>,
    generated: &Path,
    reference: &Path,
    train_manifest: Option<&Path>,
    out: &Path,
) -> anyhow::Result<EvalReport> {
    let vocab = toy_vocabulary();
    let refs = load_dataset(reference, &vocab)?;
    if !generated.is_dir() {
        return Err(Error::MissingFile(generated.to_path_buf()).into());
    }
    let has_png = fs::read_dir(generated)
        .map_err(|e| Error::Io {
            path: generated.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x == "png"));
    if !has_png {
        return Err(Error::EmptyDataset(format!("no images in {}", generated.display())).into());
    }
    let gens = refs
        .iter()
        .map(|r| read_image(&generated.join(format!("{}.png", r.id))))
        .collect::<Result<Vec<_>, _>>()?;
    let train: Vec<TrainingSample> = match train_manifest {
        Some(m) => load_dataset(m, &vocab)?,
        None => load_datasets(cfg, base)?.into_iter().flatten().collect(),
    };
    let labels: Vec<_> = train.iter().map(|s| s.hoi_labels.clone()).collect();
    let rare = rare_classes(&labels, vocab.len());
    let detectors = cfg.adapters.build()?;
    let mut report = evaluate(&gens, &refs, &detectors, &rare)?;
    report.config_hash = Some(cfg.hash());
    write_json(&out.join(EVAL_JSON), &report)?;
    let text = report.to_text();
    fs::write(out.join(EVAL_TEXT), &text).map_err(|e| Error::Io {
        path: out.join(EVAL_TEXT),
        source: e,
    })?;
    print!("{text}");
    Ok(report)
}

pub const REPORT_TEXT: &str = "report.txt";

/// Plain-text summary of the loss log and evaluation report under `out`.
pub fn cmd_report(out: &Path) -> anyhow::Result<String> {
    let mut s = String::new();
    let log_path = out.join(LOSS_LOG);
    let mut found = false;
    if log_path.exists() {
        found = true;
        let log = read_loss_log(&log_path)?;
        s.push_str(&format!("loss log: {} steps\n", log.len()));
        if let Some(first) = log.first() {
            s.push_str(&format!("config_hash: {}\n", first.config_hash));
        }
        let mut phases: Vec<&str> = Vec::new();
        for r in &log {
            if phases.last() != Some(&r.phase.as_str()) {
                phases.push(&r.phase);
            }
        }
        for p in phases {
            let recs: Vec<_> = log.iter().filter(|r| r.phase == p).collect();
            let n = recs.len().min(10);
            let mean = |rs: &[&fbdiff_core::train::StepRecord], t: LossTerm| {
                rs.iter().map(|r| r.breakdown.get(t)).sum::<f64>() / rs.len() as f64
            };
            s.push_str(&format!("phase {p}: {} steps\n", recs.len()));
            for t in LossTerm::ALL {
                s.push_str(&format!(
                    "  {:<12} first {n}: {:.6}  last {n}: {:.6}\n",
                    t.name(),
                    mean(&recs[..n], t),
                    mean(&recs[recs.len() - n..], t)
                ));
            }
        }
    }
    let eval_path = out.join(EVAL_JSON);
    if eval_path.exists() {
        found = true;
        let text = fs::read_to_string(&eval_path).map_err(|e| Error::Io {
            path: eval_path.clone(),
            source: e,
        })?;
        let report: EvalReport = serde_json::from_str(&text).map_err(Error::from)?;
        s.push_str("\nevaluation\n");
        s.push_str(&report.to_text());
    }
    if !found {
        return Err(Error::MissingFile(log_path).into());
    }
    fs::write(out.join(REPORT_TEXT), &s).map_err(|e| Error::Io {
        path: out.join(REPORT_TEXT),
        source: e,
    })?;
    print!("{s}");
    Ok(s)
}
