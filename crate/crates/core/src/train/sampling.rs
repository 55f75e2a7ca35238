//! Ancestral reverse-process sampling on a strided timestep grid.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::denoiser::{Conditioning, DenoiserAdapter};
use crate::diffusion::{add_noise, reconstruct_x0_latent, ImageGrid, LatentGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `steps` timesteps evenly spaced over `[0, start]`, descending, without
/// repeats.
pub fn sampling_timesteps(start: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 {
        return vec![start];
    }
    let mut out: Vec<usize> = (0..steps)
        .rev()
        .map(|i| ((i as f64) * start as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Samples an image from pure noise at `T − 1`.
pub fn toy_sample<R: Rng + ?Sized>(
    denoiser: &dyn DenoiserAdapter,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    shape: [usize; 3],
    steps: usize,
    rng: &mut R,
) -> Result<ImageGrid> {
    if steps == 0 {
        return Err(Error::invalid("steps", "at least one sampling step is required"));
    }
    let start = schedule.num_steps() - 1;
    let z = LatentGrid::new(gaussian(&shape, rng))?;
    reverse(denoiser, cond, schedule, z, &sampling_timesteps(start, steps), rng)
}

/// Noises `init` to `t_start` and runs the reverse process from there.
pub fn toy_sample_from<R: Rng + ?Sized>(
    denoiser: &dyn DenoiserAdapter,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    init: &ImageGrid,
    t_start: usize,
    steps: usize,
    rng: &mut R,
) -> Result<ImageGrid> {
    if steps == 0 {
        return Err(Error::invalid("steps", "at least one sampling step is required"));
    }
    let x0 = LatentGrid::new(init.tensor().clone())?;
    let eps = LatentGrid::new(gaussian(x0.shape(), rng))?;
    let z = add_noise(&x0, &eps, t_start, schedule)?;
    reverse(denoiser, cond, schedule, z, &sampling_timesteps(t_start, steps), rng)
}

fn reverse<R: Rng + ?Sized>(
    denoiser: &dyn DenoiserAdapter,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    mut z: LatentGrid,
    taus: &[usize],
    rng: &mut R,
) -> Result<ImageGrid> {
    for (i, &t) in taus.iter().enumerate() {
        let eps = denoiser.predict_noise(&z, t, cond)?;
        let x0 = reconstruct_x0_latent(&z, &eps, t, schedule)?
            .into_tensor()
            .map(|v| v.clamp(0.0, 1.0));
        let Some(&prev) = taus.get(i + 1) else {
            return ImageGrid::new(x0);
        };
        let (ab, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar(prev)?);
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
        let noise = gaussian(x0.shape(), rng);
        let mean = x0.zip_map(z.tensor(), |a, b| c0 * a + ct * b);
        z = LatentGrid::new(mean.zip_map(&noise, |m, n| m + std * n))?;
    }
    unreachable!("the timestep list is never empty")
}
