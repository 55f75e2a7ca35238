//! Noise schedules, forward noising and clean-sample reconstruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cumulative signal fractions `ᾱ_t` for `t ∈ [0, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear schedule: `√β` is linearly spaced between `√beta_start`
    /// and `√beta_end`, and `ᾱ_t = ∏_{s≤t} (1 − β_s)`.
    pub fn scaled_linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid("num_steps", format!("{num_steps} < 2")));
        }
        if !(beta_start > 0.0 && beta_end < 1.0) {
            return Err(Error::invalid(
                "beta",
                format!("betas must lie in (0, 1), got [{beta_start}, {beta_end}]"),
            ));
        }
        if beta_start > beta_end {
            return Err(Error::invalid(
                "beta",
                format!("non-monotone betas: start {beta_start} > end {beta_end}"),
            ));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (num_steps - 1) as f64;
        // Endpoints are taken verbatim so `ᾱ_0 = 1 − beta_start` exactly.
        let betas = (0..num_steps).map(|t| match t {
            0 => beta_start,
            t if t == num_steps - 1 => beta_end,
            t => {
                let s = s0 + (s1 - s0) * t as f64 / last;
                s * s
            }
        });
        let mut acc = 1.0;
        let alpha_bar = betas
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    /// Validates an explicit `ᾱ` sequence: strictly decreasing, in `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("alpha_bar", "need at least two steps"));
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(
                    "alpha_bar",
                    format!("alpha_bar[{t}] = {a} outside (0, 1]"),
                ));
            }
        }
        if let Some(t) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::invalid(
                "alpha_bar",
                format!("not strictly decreasing at t = {}", t + 1),
            ));
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                num_steps: self.num_steps(),
            })
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }
}

/// Latent tensor `[C, H, W]` holding `z_t`, `ẑ₀`, `ε` or `ε_θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        t.chw()?;
        if !t.all_finite() {
            return Err(Error::invalid("latent", "non-finite values"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

/// RGB image `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid(Tensor);

impl ImageGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 3 {
            return Err(Error::invalid("image", format!("expected 3 channels, got {c}")));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamped(t: Tensor) -> Result<Self> {
        Self::new(t.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn add_noise(
    z0: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    check_same(z0.tensor(), eps.tensor())?;
    let (sa, sn) = sched.coefficients(t)?;
    Ok(LatentGrid(
        z0.tensor().zip_map(eps.tensor(), |z, e| sa * z + sn * e),
    ))
}

/// Clean-latent estimate `ẑ₀ = (z_t − √(1 − ᾱ_t) ε_θ) / √ᾱ_t`.
pub fn reconstruct_x0_latent(
    zt: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    check_same(zt.tensor(), eps_pred.tensor())?;
    let (sa, sn) = sched.coefficients(t)?;
    if sa == 0.0 {
        return Err(Error::invalid("alpha_bar", format!("zero at t = {t}")));
    }
    Ok(LatentGrid(
        zt.tensor().zip_map(eps_pred.tensor(), |z, e| (z - sn * e) / sa),
    ))
}

/// Differentiable form of [`reconstruct_x0_latent`] for a given `ᾱ_t`.
pub fn reconstruct_x0_var<'t>(zt: Var<'t>, eps_pred: Var<'t>, alpha_bar: f64) -> Var<'t> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    zt.sub(eps_pred.scale(sn)).scale(1.0 / sa)
}

/// Maps latents to image space.
pub trait DecoderAdapter {
    /// Decodes without clamping, so gradients flow back to the latent.
    fn decode_var<'t>(&self, z: Var<'t>) -> Result<Var<'t>>;
}

/// Latent space equals image space (`[3, H, W]`).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl DecoderAdapter for IdentityDecoder {
    fn decode_var<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::invalid(
                "latent",
                format!("identity decoder needs [3, H, W], got {shape:?}"),
            ));
        }
        Ok(z)
    }
}

/// Decodes `ẑ₀` into an image clamped to `[0, 1]`.
pub fn decode(z0_hat: &LatentGrid, decoder: &dyn DecoderAdapter) -> Result<ImageGrid> {
    let tape = crate::autodiff::Tape::new();
    let x = decoder.decode_var(tape.constant(z0_hat.tensor().clone()))?;
    ImageGrid::clamped((*x.value()).clone())
}
