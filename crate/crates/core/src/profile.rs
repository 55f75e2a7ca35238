//! Average feedback-loss values as a function of timestep.
//!
//! Every `(sample, t)` cell gets one noise draw from a seed derived from the
//! run seed, the sample index and `t`, so cells can be evaluated in any
//! order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::TrainingSample;
use crate::detectors::toy::ToyHoiDetector;
use crate::detectors::DetectorBundle;
use crate::diffusion::{ImageGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    boundary_loss, gaze_loss, id_loss_from_embeddings, interaction_loss, pose_loss, FocalParams,
};
use crate::policy::LossTerm;
use crate::tensor::Tensor;
use crate::train::{step_seed, Conditioning, DenoiserAdapter};

/// Per-timestep mean of one loss over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub term: LossTerm,
    pub t_grid: Vec<usize>,
    pub raw: Vec<f64>,
    /// Population variance over the samples of each cell.
    pub variance: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// `(v − min) / (max − min)`; a constant curve maps to zeros.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

impl LossCurve {
    pub fn new(term: LossTerm, t_grid: Vec<usize>, raw: Vec<f64>, variance: Vec<f64>) -> Self {
        let normalized = normalize(&raw);
        Self {
            term,
            t_grid,
            raw,
            variance,
            normalized,
        }
    }
}

/// Source of the noise prediction used to form `x̂₀`.
#[derive(Clone, Copy)]
pub enum NoisePredictor<'a> {
    Model(&'a dyn DenoiserAdapter),
    /// Returns the noise that was actually added.
    Oracle,
}

/// Loss values of one `(sample, t)` cell; `None` where the sample carries no
/// annotation for the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sample: usize,
    pub t: usize,
    pub values: BTreeMap<LossTerm, Option<f64>>,
    /// Whether the HOI detector's validity gate tripped on `x̂₀`.
    pub hoi_gate_tripped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub curves: Vec<LossCurve>,
    pub cells: Vec<Cell>,
}

pub struct ProfileSettings<'a> {
    pub schedule: &'a NoiseSchedule,
    pub detectors: &'a DetectorBundle,
    pub focal: FocalParams,
    pub token_dim: usize,
    pub seed: u64,
    /// Optional detector whose validity gate is reported per cell.
    pub hoi_gate: Option<&'a ToyHoiDetector>,
}

fn cell_seed(seed: u64, sample: usize, t: usize) -> u64 {
    step_seed(step_seed(seed, sample as u64), t as u64)
}

/// `x̂₀` for one cell, clamped to `[0, 1]` as in training.
pub fn reconstruct_cell(
    x0: &Tensor,
    cond: &Conditioning,
    t: usize,
    predictor: NoisePredictor<'_>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::from_fn(x0.shape(), |_| StandardNormal.sample(&mut rng));
    let (sa, sn) = schedule.coefficients(t)?;
    let zt = x0.zip_map(&eps, |z, e| sa * z + sn * e);
    let pred = match predictor {
        NoisePredictor::Oracle => eps,
        NoisePredictor::Model(m) => m
            .predict_noise(&crate::diffusion::LatentGrid::new(zt.clone())?, t, cond)?
            .into_tensor(),
    };
    Ok(zt.zip_map(&pred, |z, e| ((z - sn * e) / sa).clamp(0.0, 1.0)))
}

/// Every feedback loss of `sample` on a given `x̂₀`.
pub fn feedback_values(
    sample: &TrainingSample,
    x0_hat: &Tensor,
    detectors: &DetectorBundle,
    focal: FocalParams,
) -> Result<BTreeMap<LossTerm, Option<f64>>> {
    let tape = Tape::new();
    let x0 = tape.constant(sample.image.tensor().clone());
    let xh = tape.constant(x0_hat.clone());
    let mut out = BTreeMap::new();
    out.insert(LossTerm::Boundary, Some(boundary_loss(x0, xh, &sample.boundary())?.item()));
    let (faces, refs) = sample.faces_with_identity();
    out.insert(
        LossTerm::Id,
        (!faces.is_empty())
            .then(|| id_loss_from_embeddings(&refs, xh, &faces, detectors.face.as_ref()))
            .transpose()?
            .map(|v| v.value.item()),
    );
    out.insert(
        LossTerm::Gaze,
        (!sample.gaze.is_empty())
            .then(|| gaze_loss(&sample.gaze, xh, detectors.gaze.as_ref()))
            .transpose()?
            .map(|v| v.value.item()),
    );
    let pose_boxes = sample.pose_boxes();
    out.insert(
        LossTerm::Pose,
        (!pose_boxes.is_empty())
            .then(|| pose_loss(x0, xh, &pose_boxes, detectors.pose.as_ref()))
            .transpose()?
            .map(|v| v.value.item()),
    );
    out.insert(
        LossTerm::Interaction,
        Some(interaction_loss(&sample.hoi_labels, xh, detectors.hoi.as_ref(), focal)?.value.item()),
    );
    Ok(out)
}

fn mean_var(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

fn curves_from_cells(cells: &[Cell], t_grid: &[usize], terms: &[LossTerm]) -> Vec<LossCurve> {
    terms
        .iter()
        .map(|&term| {
            let (raw, var): (Vec<f64>, Vec<f64>) = t_grid
                .iter()
                .map(|&t| {
                    let vals: Vec<f64> = cells
                        .iter()
                        .filter(|c| c.t == t)
                        .filter_map(|c| c.values.get(&term).copied().flatten())
                        .collect();
                    mean_var(&vals)
                })
                .unzip();
            LossCurve::new(term, t_grid.to_vec(), raw, var)
        })
        .collect()
}

/// Mean of every feedback loss over `dataset` at each `t` of `t_grid`.
/// Samples without the annotation a loss needs do not enter its mean; a loss
/// that evaluates to zero because its detector declined (for instance a
/// tripped validity gate) does.
pub fn profile_losses(
    dataset: &[TrainingSample],
    predictor: NoisePredictor<'_>,
    t_grid: &[usize],
    settings: &ProfileSettings<'_>,
) -> Result<Profile> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("profile dataset".into()));
    }
    let steps = settings.schedule.num_steps();
    if let Some(&bad) = t_grid.iter().find(|&&t| t >= steps) {
        return Err(Error::TimestepOutOfRange { t: bad, num_steps: steps });
    }
    let mut cells = Vec::with_capacity(dataset.len() * t_grid.len());
    for (i, sample) in dataset.iter().enumerate() {
        let cond = Conditioning::from_sample(sample, settings.token_dim);
        for &t in t_grid {
            let x0_hat = reconstruct_cell(
                sample.image.tensor(),
                &cond,
                t,
                predictor,
                settings.schedule,
                cell_seed(settings.seed, i, t),
            )?;
            cells.push(Cell {
                sample: i,
                t,
                values: feedback_values(sample, &x0_hat, settings.detectors, settings.focal)?,
                hoi_gate_tripped: settings.hoi_gate.is_some_and(|g| g.gate_tripped(&x0_hat)),
            });
        }
    }
    Ok(Profile {
        curves: curves_from_cells(&cells, t_grid, &LossTerm::FEEDBACK),
        cells,
    })
}

/// Separable Gaussian blur with standard deviation `radius`, edge pixels
/// repeated; the kernel extends to `ceil(3·radius)`. Radius 0 is the
/// identity.
pub fn gaussian_blur(image: &Tensor, radius: f64) -> Result<Tensor> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::invalid("blur_radius", format!("must be >= 0, got {radius}")));
    }
    let (c, h, w) = image.chw()?;
    if radius == 0.0 {
        return Ok(image.clone());
    }
    let r = (3.0 * radius).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * radius * radius)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let d = image.data();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = (-r..=r)
                    .map(|k| kernel[(k + r) as usize] * d[(ch * h + y) * w + clampi(x as isize + k, w)])
                    .sum();
            }
        }
    }
    let out = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        (-r..=r)
            .map(|k| kernel[(k + r) as usize] * tmp[(ch * h + clampi(y as isize + k, h)) * w + x])
            .sum()
    });
    Ok(out)
}

/// Boundary-loss profile of one annotated image after blurring it.
pub fn blur_boundary_experiment(
    sample: &TrainingSample,
    predictor: NoisePredictor<'_>,
    t_grid: &[usize],
    blur_radius: f64,
    settings: &ProfileSettings<'_>,
) -> Result<LossCurve> {
    let mut blurred = sample.clone();
    blurred.image = ImageGrid::clamped(gaussian_blur(sample.image.tensor(), blur_radius)?)?;
    let cond = Conditioning::from_sample(&blurred, settings.token_dim);
    let band = blurred.boundary();
    let mut raw = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let x0_hat = reconstruct_cell(
            blurred.image.tensor(),
            &cond,
            t,
            predictor,
            settings.schedule,
            cell_seed(settings.seed, 0, t),
        )?;
        let tape = Tape::new();
        let v = boundary_loss(
            tape.constant(blurred.image.tensor().clone()),
            tape.constant(x0_hat),
            &band,
        )?;
        raw.push(v.item());
    }
    Ok(LossCurve::new(LossTerm::Boundary, t_grid.to_vec(), raw, vec![0.0; t_grid.len()]))
}

/// Raw curves in the form [`crate::policy::inverse_timestep_weights`]
/// consumes.
pub fn weight_input(curves: &[LossCurve]) -> BTreeMap<LossTerm, Vec<(usize, f64)>> {
    curves
        .iter()
        .map(|c| (c.term, c.t_grid.iter().copied().zip(c.raw.iter().copied()).collect()))
        .collect()
}

pub const CURVE_TABLE: &str = "curves.csv";
pub const CURVE_PLOT: &str = "curves.svg";

/// One row per `(loss, t)`: `loss,t,raw,variance,normalized`, after an
/// optional `# config_hash: ...` comment line.
pub fn curves_to_csv(curves: &[LossCurve], config_hash: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(h) = config_hash {
        let _ = writeln!(s, "# config_hash: {h}");
    }
    s.push_str("loss,t,raw,variance,normalized\n");
    for c in curves {
        for i in 0..c.t_grid.len() {
            let _ = writeln!(s, "{},{},{},{},{}", c.term, c.t_grid[i], c.raw[i], c.variance[i], c.normalized[i]);
        }
    }
    s
}

pub fn curves_from_csv(text: &str) -> Result<Vec<LossCurve>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some("loss,t,raw,variance,normalized") {
        return Err(Error::invalid("curve table", "missing header"));
    }
    let mut out: Vec<LossCurve> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| Error::invalid("curve table", format!("line {}: {what}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let term: LossTerm = f[0].parse()?;
        let t: usize = f[1].parse().map_err(|_| bad("bad t"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let (raw, var, norm) = (num(f[2])?, num(f[3])?, num(f[4])?);
        if out.last().is_none_or(|c| c.term != term) {
            out.push(LossCurve {
                term,
                t_grid: Vec::new(),
                raw: Vec::new(),
                variance: Vec::new(),
                normalized: Vec::new(),
            });
        }
        let c = out.last_mut().expect("pushed");
        c.t_grid.push(t);
        c.raw.push(raw);
        c.variance.push(var);
        c.normalized.push(norm);
    }
    Ok(out)
}

const COLORS: [&str; 7] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

/// Normalized curves as an SVG line plot over `t`.
pub fn render_svg(curves: &[LossCurve]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let t_max = curves
        .iter()
        .flat_map(|c| c.t_grid.iter().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} L{pad} {} L{} {}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">t</text>"#, w / 2.0, h - 10.0);
    for (k, c) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c
            .t_grid
            .iter()
            .zip(&c.normalized)
            .map(|(&t, &v)| {
                let x = pad + (w - 2.0 * pad) * t as f64 / t_max;
                let y = h - pad - (h - 2.0 * pad) * v;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            w - pad - 70.0,
            pad + 14.0 * k as f64,
            c.term
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the curve table and plot into `dir`; returns both paths.
pub fn emit_curves(curves: &[LossCurve], dir: &Path, config_hash: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join(CURVE_TABLE);
    let plot = dir.join(CURVE_PLOT);
    fs::write(&table, curves_to_csv(curves, Some(config_hash))).map_err(|e| Error::io(&table, e))?;
    let svg = format!("<!-- config_hash: {config_hash} -->\n{}", render_svg(curves));
    fs::write(&plot, svg).map_err(|e| Error::io(&plot, e))?;
    Ok((table, plot))
}
