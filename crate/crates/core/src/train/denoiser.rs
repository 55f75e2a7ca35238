//! Conditional noise predictors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adaptive_bins, Tape, Var};
use crate::config::DenoiserConfig;
use crate::data::TrainingSample;
use crate::diffusion::{LatentGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Which learning rate a parameter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// The noise-prediction network.
    Body,
    /// Maps subject features to the tokens the body is modulated by.
    Projector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered, named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet(pub Vec<NamedParam>);

impl ParamSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.0.iter()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter().map(|p| &p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|p| p.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.0.iter().map(|p| p.value.len()).sum()
    }

    /// Hex SHA-256 prefix over names, shapes and exact values.
    pub fn snapshot_id(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.0 {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn record<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.0
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }
}

/// Per-sample inputs the denoiser is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Reference image `[3, H, W]` (the subject source).
    pub reference: Tensor,
    /// Pooled colour features of each subject crop, `[3·g·g]` each.
    pub subject_features: Vec<Tensor>,
    /// Text embedding of the subject query, `[token_dim]`.
    pub query: Option<Tensor>,
}

/// Side of the pooling grid for subject features.
pub const SUBJECT_GRID: usize = 4;

pub const SUBJECT_FEATURE_DIM: usize = 3 * SUBJECT_GRID * SUBJECT_GRID;

impl Conditioning {
    pub fn from_sample(sample: &TrainingSample, token_dim: usize) -> Self {
        let reference = sample.image.tensor().clone();
        let subject_features = sample
            .subjects
            .iter()
            .map(|s| subject_feature(&reference, &s.bbox))
            .collect();
        let names: Vec<&str> = if sample.query.trim().is_empty() {
            sample.subjects.iter().map(|s| s.class_name.as_str()).collect()
        } else {
            sample.query.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
        };
        Self {
            reference,
            subject_features,
            query: query_embedding(&names, token_dim),
        }
    }

    /// No reference content: a flat grey image and no subjects.
    pub fn unconditional(height: usize, width: usize) -> Self {
        Self {
            reference: Tensor::full(&[3, height, width], 0.5),
            subject_features: Vec::new(),
            query: None,
        }
    }
}

/// Pooled colour grid of the box's pixel window.
pub fn subject_feature(image: &Tensor, bbox: &BBox) -> Tensor {
    let (_, h, w) = image.chw().expect("rank-3 image");
    let (rows, cols) = bbox.pixel_window(h, w);
    let (rows, cols) = if rows.is_empty() || cols.is_empty() {
        (0..h, 0..w)
    } else {
        (rows, cols)
    };
    let tape = Tape::new();
    let v = tape
        .constant(image.clone())
        .crop(0..3, rows, cols)
        .adaptive_avg_pool(SUBJECT_GRID, SUBJECT_GRID)
        .reshape(&[SUBJECT_FEATURE_DIM]);
    (*v.value()).clone()
}

/// Sum of fixed pseudo-random unit vectors, one per word, seeded by the
/// word's SHA-256. `None` for an empty word list.
pub fn query_embedding(words: &[&str], dim: usize) -> Option<Tensor> {
    if words.is_empty() || dim == 0 {
        return None;
    }
    let mut acc = vec![0.0; dim];
    for w in words {
        let digest = Sha256::digest(w.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..dim)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x / n;
        }
    }
    if acc.iter().all(|&v| v == 0.0) {
        return None;
    }
    Some(Tensor::new(vec![dim], acc).expect("shape"))
}

/// Predicted noise and, when there are subjects, the mean aligned subject
/// token.
pub struct DenoiserOutput<'t> {
    pub eps: Var<'t>,
    pub aligned: Option<Var<'t>>,
}

/// A conditional noise predictor `ε_θ(z_t, t, c)`.
pub trait DenoiserAdapter: Send + Sync {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Runs the network with `params` recorded on the tape in the order of
    /// [`DenoiserAdapter::params`].
    fn forward<'t>(
        &self,
        params: &[Var<'t>],
        zt: Var<'t>,
        t: usize,
        cond: &Conditioning,
    ) -> Result<DenoiserOutput<'t>>;

    fn predict_noise(&self, zt: &LatentGrid, t: usize, cond: &Conditioning) -> Result<LatentGrid> {
        let tape = Tape::new();
        let params = self.params().record(&tape, false);
        let out = self.forward(&params, tape.constant(zt.tensor().clone()), t, cond)?;
        LatentGrid::new((*out.eps.value()).clone())
    }
}

/// Small convolutional encoder-decoder.
///
/// The input is the noisy latent stacked with the reference image pooled to
/// a coarse grid. A sinusoidal timestep embedding enters as a channel bias,
/// and the mean subject token modulates the features channel-wise (scale and
/// shift) at both resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    params: ParamSet,
}

const PARAM_NAMES: [&str; 16] = [
    "conv_in.w", "conv_in.b", "time.w", "film1.scale", "film1.shift", "down.w", "down.b",
    "film2.scale", "film2.shift", "up.w", "up.b", "conv_mid.w", "conv_mid.b", "conv_out.w",
    "conv_out.b", "proj.w",
];

impl ToyDenoiser {
    pub fn new(config: &DenoiserConfig) -> Result<Self> {
        let DenoiserConfig {
            channels: c,
            time_dim: td,
            token_dim: d,
            ..
        } = *config;
        if c == 0 || td == 0 || d == 0 || config.cond_grid == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut normal = |shape: &[usize], fan_in: usize, gain: f64| {
            let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        use ParamGroup::*;
        let f = SUBJECT_FEATURE_DIM;
        let entries = [
            (Body, normal(&[c, 6, 3, 3], 54, 1.0)),
            (Body, Tensor::zeros(&[c])),
            (Body, normal(&[c, td], td, 1.0)),
            (Body, normal(&[c, d], d, 0.1)),
            (Body, normal(&[c, d], d, 0.1)),
            (Body, normal(&[c, c, 3, 3], 9 * c, 1.0)),
            (Body, Tensor::zeros(&[c])),
            (Body, normal(&[c, d], d, 0.1)),
            (Body, normal(&[c, d], d, 0.1)),
            (Body, normal(&[c, c, 3, 3], 9 * c, 1.0)),
            (Body, Tensor::zeros(&[c])),
            (Body, normal(&[c, c, 3, 3], 9 * c, 1.0)),
            (Body, Tensor::zeros(&[c])),
            (Body, normal(&[3, c, 3, 3], 9 * c, 0.1)),
            (Body, Tensor::zeros(&[3])),
            (Projector, normal(&[d, f], f, 1.0)),
        ];
        let params = ParamSet(
            PARAM_NAMES
                .iter()
                .zip(entries)
                .map(|(name, (group, value))| NamedParam {
                    name: name.to_string(),
                    group,
                    value,
                })
                .collect(),
        );
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Rebuilds a denoiser around saved parameters.
    pub fn from_params(config: &DenoiserConfig, params: ParamSet) -> Result<Self> {
        let fresh = Self::new(config)?;
        let compatible = fresh.params.len() == params.len()
            && fresh
                .params
                .iter()
                .zip(params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !compatible {
            return Err(Error::Config(
                "checkpoint parameters do not match the denoiser configuration".into(),
            ));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }
}

/// Sinusoidal embedding of `t`: `sin(t·ω_k)` then `cos(t·ω_k)` with
/// `ω_k = 10000^(−k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim.div_ceil(2);
    Tensor::from_fn(&[dim], |i| {
        let k = i % half;
        let arg = t as f64 * (10000f64).powf(-(k as f64) / half as f64);
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Average-pools `image` to a `grid × grid` layout and spreads every cell
/// back over its pixels.
pub fn pooled_reference(image: &Tensor, grid: usize, height: usize, width: usize) -> Tensor {
    let (c, h, w) = image.chw().expect("rank-3 reference");
    let ybins = adaptive_bins(h, grid);
    let xbins = adaptive_bins(w, grid);
    let mut cells = vec![0.0; c * grid * grid];
    for ch in 0..c {
        for (by, ys) in ybins.iter().enumerate() {
            for (bx, xs) in xbins.iter().enumerate() {
                let mut s = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += image.data()[(ch * h + y) * w + x];
                    }
                }
                cells[(ch * grid + by) * grid + bx] = s / (ys.len() * xs.len()) as f64;
            }
        }
    }
    Tensor::from_fn(&[c, height, width], |i| {
        let (ch, y, x) = (i / (height * width), (i / width) % height, i % width);
        cells[(ch * grid + y * grid / height) * grid + x * grid / width]
    })
}

impl DenoiserAdapter for ToyDenoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'t>(
        &self,
        p: &[Var<'t>],
        zt: Var<'t>,
        t: usize,
        cond: &Conditioning,
    ) -> Result<DenoiserOutput<'t>> {
        let tape = zt.tape();
        let shape = zt.shape();
        let (h, w) = match shape[..] {
            [3, h, w] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::invalid(
                    "z_t",
                    format!("expected [3, H, W] with even H and W, got {shape:?}"),
                ))
            }
        };
        let d = self.config.token_dim;
        let [conv_in_w, conv_in_b, time_w, f1s, f1b, down_w, down_b, f2s, f2b, up_w, up_b, mid_w, mid_b, out_w, out_b, proj_w]: [Var<'t>; 16] =
            p.try_into()
                .map_err(|_| Error::invalid("params", format!("{} tensors recorded", p.len())))?;

        let tokens: Vec<Var<'t>> = cond
            .subject_features
            .iter()
            .map(|f| proj_w.matvec(tape.constant(f.clone())))
            .collect();
        let aligned = if tokens.is_empty() {
            None
        } else {
            let n = tokens.len() as f64;
            Some(
                tokens
                    .into_iter()
                    .reduce(|a, b| a.add(b))
                    .expect("non-empty")
                    .scale(1.0 / n),
            )
        };
        let token = aligned.unwrap_or_else(|| tape.constant(Tensor::zeros(&[d])));

        let reference = pooled_reference(&cond.reference, self.config.cond_grid, h, w);
        let x = Var::concat(&[zt, tape.constant(reference)]);
        let temb = time_w.matvec(tape.constant(timestep_embedding(t, self.config.time_dim)));
        let film = |scale: Var<'t>, shift: Var<'t>, x: Var<'t>| {
            x.channel_affine(scale.matvec(token).add_scalar(1.0), shift.matvec(token))
        };

        let h1 = x.conv2d(conv_in_w, conv_in_b).add_channel_bias(temb).silu();
        let h1 = film(f1s, f1b, h1);
        let h2 = h1.avg_pool2().conv2d(down_w, down_b).silu();
        let h2 = film(f2s, f2b, h2);
        let h3 = h2.upsample(2).conv2d(up_w, up_b).silu().add(h1);
        let h4 = h3.conv2d(mid_w, mid_b).silu();
        let eps = h4.conv2d(out_w, out_b);
        Ok(DenoiserOutput { eps, aligned })
    }
}

/// Returns the true noise; used as an oracle in profiling and tests.
pub struct PerfectDenoiser {
    pub z0: Tensor,
    pub schedule: NoiseSchedule,
    empty: ParamSet,
}

impl PerfectDenoiser {
    pub fn new(z0: Tensor, schedule: NoiseSchedule) -> Self {
        Self {
            z0,
            schedule,
            empty: ParamSet::default(),
        }
    }
}

impl DenoiserAdapter for PerfectDenoiser {
    fn params(&self) -> &ParamSet {
        &self.empty
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.empty
    }

    /// `ε = (z_t − √ᾱ_t z0) / √(1 − ᾱ_t)`; at `ᾱ_t = 1` the noise is
    /// unobservable and zero is returned.
    fn forward<'t>(
        &self,
        _params: &[Var<'t>],
        zt: Var<'t>,
        t: usize,
        _cond: &Conditioning,
    ) -> Result<DenoiserOutput<'t>> {
        zt.value().ensure_shape(self.z0.shape())?;
        let (sa, sn) = self.schedule.coefficients(t)?;
        let eps = if sn == 0.0 {
            zt.tape().constant(Tensor::zeros(self.z0.shape()))
        } else {
            zt.sub_const(&self.z0.map(|v| sa * v)).scale(1.0 / sn)
        };
        Ok(DenoiserOutput { eps, aligned: None })
    }
}
