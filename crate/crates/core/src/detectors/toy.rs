//! Deterministic, differentiable stand-ins for the production detectors.
//!
//! The toy gaze and pose detectors localize bright beacons with a spatial
//! soft-argmax: pixel weights are `softmax(v / τ)` over the searched region
//! and the prediction is the weighted mean of pixel centers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    FaceEmbedderAdapter, GazeAdapter, GazePrediction, HoiAdapter, HoiDetection, HoiPrediction,
    KeypointPrediction, PoseAdapter, SegmenterAdapter,
};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{BinaryMask, GAZE_NORM_EPS};
use crate::tensor::Tensor;

/// Soft-argmax temperature in units of pixel intensity.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Mean colour over a fixed pooling grid, flattened channel-major and
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct ToyFaceEmbedder {
    pub grid: usize,
    pub threshold: f64,
}

impl Default for ToyFaceEmbedder {
    fn default() -> Self {
        Self {
            grid: 4,
            threshold: 0.9,
        }
    }
}

impl ToyFaceEmbedder {
    pub fn dim(&self) -> usize {
        3 * self.grid * self.grid
    }
}

impl FaceEmbedderAdapter for ToyFaceEmbedder {
    fn embed<'t>(&self, crop: Var<'t>) -> Result<Var<'t>> {
        let shape = crop.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::invalid(
                "crop",
                format!("degenerate face crop {shape:?}"),
            ));
        }
        Ok(crop
            .adaptive_avg_pool(self.grid, self.grid)
            .reshape(&[self.dim()])
            .l2_normalize(1e-12))
    }

    fn match_threshold(&self) -> f64 {
        self.threshold
    }
}

/// Weighted mean of pixel centers under `softmax(values / τ)`.
///
/// `values` is a flattened `rows × cols` window that sits at `(row0, col0)`
/// inside a frame of `frame_h × frame_w` pixels; coordinates are normalized
/// to that frame. `mask` excludes pixels from the softmax.
#[allow(clippy::too_many_arguments)]
pub fn soft_argmax<'t>(
    values: Var<'t>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    frame_h: usize,
    frame_w: usize,
    temperature: f64,
    mask: Option<&[bool]>,
) -> Var<'t> {
    let tape = values.tape();
    let n = rows.len() * cols.len();
    let w = cols.len();
    let xs = Tensor::from_fn(&[n], |i| (cols.start + i % w) as f64 + 0.5).map(|v| v / frame_w as f64);
    let ys =
        Tensor::from_fn(&[n], |i| (rows.start + i / w) as f64 + 0.5).map(|v| v / frame_h as f64);
    let p = values
        .reshape(&[n])
        .scale(1.0 / temperature)
        .softmax(mask);
    let x = p.dot(tape.constant(xs));
    let y = p.dot(tape.constant(ys));
    Var::concat(&[x, y])
}

/// Gaze target = soft-argmax of the red channel outside the head box.
#[derive(Debug, Clone)]
pub struct ToyGazeDetector {
    pub temperature: f64,
}

impl ToyGazeDetector {
    pub fn new(temperature: f64) -> Self {
        Self { temperature }
    }
}

impl Default for ToyGazeDetector {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPERATURE)
    }
}

impl GazeAdapter for ToyGazeDetector {
    fn predict<'t>(
        &self,
        image: Var<'t>,
        head_boxes: &[BBox],
    ) -> Result<Vec<Option<GazePrediction<'t>>>> {
        let shape = image.shape();
        let (h, w) = match shape[..] {
            [3, h, w] => (h, w),
            _ => return Err(Error::invalid("image", format!("expected [3, H, W], got {shape:?}"))),
        };
        let tape = image.tape();
        let red = image.crop(0..1, 0..h, 0..w);
        head_boxes
            .iter()
            .map(|head| {
                let (rows, cols) = head.pixel_window(h, w);
                let mask: Vec<bool> = (0..h * w)
                    .map(|i| !(rows.contains(&(i / w)) && cols.contains(&(i % w))))
                    .collect();
                if !mask.iter().any(|&m| m) {
                    return Ok(None);
                }
                let target = soft_argmax(red, 0..h, 0..w, h, w, self.temperature, Some(&mask));
                let center = head.center();
                let center = Tensor::new(vec![2], center.to_vec())?;
                let vector = target.sub(tape.constant(center)).l2_normalize(GAZE_NORM_EPS);
                Ok(Some(GazePrediction { target, vector }))
            })
            .collect()
    }
}

/// Four keypoints: the soft-argmax of the green channel in each quadrant of
/// the crop (top-left, top-right, bottom-left, bottom-right).
#[derive(Debug, Clone)]
pub struct ToyPoseDetector {
    pub temperature: f64,
}

impl ToyPoseDetector {
    pub const NUM_KEYPOINTS: usize = 4;

    pub fn new(temperature: f64) -> Self {
        Self { temperature }
    }

    /// Quadrant windows `(rows, cols)` of an `h × w` crop.
    pub fn quadrants(h: usize, w: usize) -> [(std::ops::Range<usize>, std::ops::Range<usize>); 4] {
        let (mh, mw) = (h / 2, w / 2);
        [
            (0..mh, 0..mw),
            (0..mh, mw..w),
            (mh..h, 0..mw),
            (mh..h, mw..w),
        ]
    }
}

impl Default for ToyPoseDetector {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPERATURE)
    }
}

impl PoseAdapter for ToyPoseDetector {
    fn predict<'t>(&self, crop: Var<'t>) -> Result<KeypointPrediction<'t>> {
        let shape = crop.shape();
        let (h, w) = match shape[..] {
            [3, h, w] => (h, w),
            _ => return Err(Error::invalid("crop", format!("expected [3, h, w], got {shape:?}"))),
        };
        let k = Self::NUM_KEYPOINTS;
        if h < 2 || w < 2 {
            return Ok(KeypointPrediction {
                coords: crop.tape().constant(Tensor::zeros(&[k, 2])),
                visible: vec![false; k],
            });
        }
        let points: Vec<Var<'t>> = Self::quadrants(h, w)
            .into_iter()
            .map(|(rows, cols)| {
                let green = crop.crop(1..2, rows.clone(), cols.clone());
                soft_argmax(green, rows, cols, h, w, self.temperature, None)
            })
            .collect();
        Ok(KeypointPrediction {
            coords: Var::concat(&points).reshape(&[k, 2]),
            visible: vec![true; k],
        })
    }
}

/// Seeded linear map of global-average-pooled colour to interaction logits.
/// All classes turn invalid when the pixel variance exceeds `noise_gate`.
#[derive(Debug, Clone)]
pub struct ToyHoiDetector {
    weights: Tensor,
    bias: Tensor,
    pub noise_gate: f64,
}

impl ToyHoiDetector {
    pub fn new(num_classes: usize, seed: u64, noise_gate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let weights = Tensor::from_fn(&[num_classes, 3], |_| 4.0 * normal());
        let bias = Tensor::from_fn(&[num_classes], |_| normal());
        Self {
            weights,
            bias,
            noise_gate,
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Population variance over every value of the image.
    pub fn pixel_variance(image: &Tensor) -> f64 {
        let m = image.mean();
        image.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / image.len() as f64
    }

    pub fn gate_tripped(&self, image: &Tensor) -> bool {
        Self::pixel_variance(image) > self.noise_gate
    }
}

impl HoiAdapter for ToyHoiDetector {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn predict<'t>(&self, image: Var<'t>) -> Result<HoiPrediction<'t>> {
        let tape = image.tape();
        let value = image.value();
        value.chw()?;
        let pooled = image.adaptive_avg_pool(1, 1).reshape(&[value.shape()[0]]);
        if pooled.value().len() != self.weights.shape()[1] {
            return Err(Error::invalid("image", "toy HOI detector expects 3 channels"));
        }
        let logits = tape
            .constant(self.weights.clone())
            .matvec(pooled)
            .add(tape.constant(self.bias.clone()));
        let k = self.num_classes();
        let valid = vec![!self.gate_tripped(&value); k];
        let full = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        };
        let detections = logits
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(class_id, &l)| HoiDetection {
                class_id,
                score: 1.0 / (1.0 + (-l).exp()),
                bbox: full,
            })
            .collect();
        Ok(HoiPrediction {
            logits,
            valid,
            detections,
        })
    }
}

/// Marks the pixels inside each box whose colour differs from the image's
/// most frequent colour.
#[derive(Debug, Clone, Default)]
pub struct ToySegmenter;

impl ToySegmenter {
    pub fn modal_color(image: &Tensor) -> [f64; 3] {
        let (_, h, w) = image.chw().expect("rank-3 image");
        let mut counts: Vec<([u64; 3], usize)> = Vec::new();
        for i in 0..h * w {
            let key = [0, 1, 2].map(|c| image.data()[c * h * w + i].to_bits());
            match counts.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += 1,
                None => counts.push((key, 1)),
            }
        }
        let (key, _) = counts
            .into_iter()
            .max_by_key(|&(_, n)| n)
            .expect("non-empty image");
        key.map(f64::from_bits)
    }
}

impl SegmenterAdapter for ToySegmenter {
    fn masks(&self, image: &Tensor, boxes: &[BBox]) -> Result<Vec<BinaryMask>> {
        let (_, h, w) = image.chw()?;
        let bg = Self::modal_color(image);
        Ok(boxes
            .iter()
            .map(|b| {
                let mut m = BinaryMask::empty(h, w);
                let (rows, cols) = b.pixel_window(h, w);
                for y in rows {
                    for x in cols.clone() {
                        let differs = (0..3).any(|c| image.data()[(c * h + y) * w + x] != bg[c]);
                        m.set(y, x, differs);
                    }
                }
                m
            })
            .collect())
    }
}
