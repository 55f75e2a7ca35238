//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of the backward closures it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Finite-difference half step.
    pub step: f64,
    /// Relative error accepted per coordinate.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so coordinates where both
    /// gradients are ~0 compare absolutely.
    pub floor: f64,
    /// Check a random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-3,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub within_tolerance: usize,
    pub worst_relative_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tolerance as f64 / self.checked as f64
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(input: &Tensor, f: &F) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    f(tape.leaf(input.clone())).item()
}

/// Numeric gradient of the scalar function `f` at `input` for the given
/// flat coordinates.
pub fn numeric_gradient<F>(input: &Tensor, f: &F, coords: &[usize], step: f64) -> Vec<f64>
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    coords
        .iter()
        .map(|&i| {
            let mut plus = input.clone();
            plus.data_mut()[i] += step;
            let mut minus = input.clone();
            minus.data_mut()[i] -= step;
            (evaluate(&plus, f) - evaluate(&minus, f)) / (2.0 * step)
        })
        .collect()
}

pub fn check_gradient<F>(input: &Tensor, f: &F, cfg: &GradCheck) -> GradCheckReport
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(x);
    let analytic = tape.backward(y).get_or_zeros(x);

    let coords: Vec<usize> = match cfg.max_coords {
        Some(m) if m < input.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, input.len(), m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..input.len()).collect(),
    };
    let numeric = numeric_gradient(input, f, &coords, cfg.step);

    let mut report = GradCheckReport {
        checked: coords.len(),
        within_tolerance: 0,
        worst_relative_error: 0.0,
        worst_index: 0,
    };
    for (&i, &n) in coords.iter().zip(&numeric) {
        let err = relative_error(analytic.data()[i], n, cfg.floor);
        if err <= cfg.tolerance {
            report.within_tolerance += 1;
        }
        if err > report.worst_relative_error {
            report.worst_relative_error = err;
            report.worst_index = i;
        }
    }
    report
}
