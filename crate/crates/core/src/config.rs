//! Run configuration: one TOML document drives every command.
//!
//! Every section is optional and falls back to the defaults below. Unknown
//! keys are rejected. A dotted key such as `optim.lr_body` names a single
//! value for overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::detectors::{AdapterRegistry, SceneSampler};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::losses::FocalParams;
use crate::policy::{FeedbackConfig, SamplerSpec};
use crate::data::PreprocessSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.num_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }
}

/// Adam with global-norm gradient clipping and one learning rate per
/// parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Denoiser body.
    pub lr_body: f64,
    /// Conditioning projector.
    pub lr_projector: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_body: 2e-3,
            lr_projector: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub time_dim: usize,
    /// Width of the aligned subject tokens.
    pub token_dim: usize,
    /// Side of the pooled reference grid fed to the first layer.
    pub cond_grid: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            time_dim: 16,
            token_dim: 16,
            cond_grid: 4,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneSampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Path to a JSONL manifest, relative to the config file's directory.
    Manifest(PathBuf),
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub name: String,
    pub steps: u64,
    pub dataset: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub t_grid: Vec<usize>,
    /// Gaussian radius for the blurred-reference boundary profile.
    pub blur_radius: f64,
    pub max_samples: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            t_grid: (0..=20).map(|i| (i * 50).min(999)).collect(),
            blur_radius: 1.0,
            max_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Reverse steps used by the ancestral sampler.
    pub steps: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    pub batch_size: usize,
    /// Worker threads for per-sample work. 1 keeps runs bit-reproducible.
    pub parallel: usize,
    /// Forces every training timestep to this value when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forced_t: Option<usize>,
    pub schedule: ScheduleConfig,
    pub feedback: FeedbackConfig,
    pub sampler: SamplerSpec,
    pub optim: OptimConfig,
    pub denoiser: DenoiserConfig,
    pub focal: FocalParams,
    pub adapters: AdapterRegistry,
    pub preprocess: PreprocessSpec,
    pub phases: Vec<PhaseConfig>,
    pub profile: ProfileConfig,
    pub sampling: SamplingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = |count, seed| {
            DatasetSource::Synthetic(SyntheticSource {
                count,
                seed,
                scene: SceneSampler::default(),
            })
        };
        Self {
            seed: 0,
            batch_size: 8,
            parallel: 1,
            forced_t: None,
            schedule: ScheduleConfig::default(),
            feedback: FeedbackConfig::paper_defaults(1000),
            sampler: SamplerSpec::low_noise_biased(1000),
            optim: OptimConfig::default(),
            denoiser: DenoiserConfig::default(),
            focal: FocalParams::default(),
            adapters: AdapterRegistry::default(),
            preprocess: PreprocessSpec {
                target_side: 16,
                ..PreprocessSpec::default()
            },
            phases: vec![
                PhaseConfig {
                    name: "interaction".into(),
                    steps: 100,
                    dataset: synthetic(256, 1),
                },
                PhaseConfig {
                    name: "gaze".into(),
                    steps: 200,
                    dataset: synthetic(256, 2),
                },
            ],
            profile: ProfileConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        let t = schedule.num_steps();
        self.feedback.validate(t)?;
        self.sampler.validate(t)?;
        if let Some(ft) = self.forced_t {
            if ft >= t {
                return Err(Error::Config(format!("forced_t {ft} outside [0, {t})")));
            }
        }
        let o = &self.optim;
        if !(o.lr_body > 0.0 && o.lr_projector > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(o.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 || self.parallel == 0 {
            return Err(Error::Config("batch_size and parallel must be positive".into()));
        }
        if self.phases.is_empty() {
            return Err(Error::Config("at least one phase is required".into()));
        }
        if let Some(p) = self.phases.iter().find(|p| p.steps == 0) {
            return Err(Error::Config(format!("phase `{}` has no steps", p.name)));
        }
        let d = &self.denoiser;
        if d.channels == 0 || d.time_dim == 0 || d.token_dim == 0 || d.cond_grid == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if let Some(&bad) = self.profile.t_grid.iter().find(|&&x| x >= t) {
            return Err(Error::Config(format!("profile t_grid value {bad} outside [0, {t})")));
        }
        if self.sampling.steps == 0 || self.sampling.steps > t {
            return Err(Error::Config(format!("sampling.steps must lie in [1, {t}]")));
        }
        self.preprocess.validate()?;
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form, embedded in every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Sets the value at a dotted key. `raw` is parsed as a TOML value and
    /// taken as a plain string when that fails.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let parsed: Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|t| t.get("v").cloned())
            .map(|v| serde_json::to_value(v).expect("toml maps to json"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
            if last {
                obj.insert(part.to_string(), parsed.clone());
                break;
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        let cfg: RunConfig = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("override `{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Every leaf key of the default configuration with its value.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(RunConfig::default()).expect("serializes"), &mut out);
        out.push(("forced_t".into(), "unset".into()));
        out.sort();
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.to_string())),
    }
}

/// Resolves a path from a config file against the file's directory.
pub fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}
