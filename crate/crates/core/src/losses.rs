//! Feedback losses on the clean-sample estimate and their gated combination.
//!
//! All image-space losses take the reference `x0` and the estimate `x̂0` as
//! tape variables (`[3, H, W]`) so the same code serves training, gradient
//! checks and profiling. Reduction conventions:
//!
//! - boundary: mean over channels and boundary-band pixels;
//! - id: mean over faces of the squared embedding distance;
//! - gaze: squared target error summed over both coordinates plus
//!   `1 − cos` of the gaze vectors, averaged over heads;
//! - pose: mean over coordinates of keypoints visible in both detections,
//!   averaged over subjects;
//! - focal: mean over (valid) classes.
//!
//! Instances that cannot be evaluated are skipped and counted; a loss with
//! nothing to evaluate is exactly zero and carries no gradient.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::detectors::{FaceEmbedderAdapter, GazeAdapter, HoiAdapter, PoseAdapter};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::policy::{FeedbackConfig, LossTerm};
use crate::tensor::Tensor;

/// Four-neighbour Laplacian.
pub const LAPLACIAN_KERNEL: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Added under the square root when normalizing gaze vectors.
pub const GAZE_NORM_EPS: f64 = 1e-12;

pub fn laplacian_kernel() -> Tensor {
    Tensor::new(vec![3, 3], LAPLACIAN_KERNEL.to_vec()).expect("3x3 kernel")
}

/// `H × W` binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "mask",
                format!("{height}x{width} mask needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Mask that is set on every pixel of the box's pixel window.
    pub fn from_box(bbox: &BBox, height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        let (rows, cols) = bbox.pixel_window(height, width);
        for y in rows {
            for x in cols.clone() {
                m.set(y, x, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Tight pixel bounds `(rows, cols)` of the set pixels.
    pub fn bounds(&self) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut rows: Option<(usize, usize)> = None;
        let mut cols: Option<(usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    rows = Some(rows.map_or((y, y), |(a, b)| (a.min(y), b.max(y))));
                    cols = Some(cols.map_or((x, x), |(a, b)| (a.min(x), b.max(x))));
                }
            }
        }
        Some((rows?.0..rows?.1 + 1, cols?.0..cols?.1 + 1))
    }

    fn window_op(&self, k: usize, dilate: bool) -> BinaryMask {
        let r = (k / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = BinaryMask::empty(self.height, self.width);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                let mut all = true;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = (y + dy, x + dx);
                        let v = (0..h).contains(&sy)
                            && (0..w).contains(&sx)
                            && self.get(sy as usize, sx as usize);
                        any |= v;
                        all &= v;
                    }
                }
                out.set(y as usize, x as usize, if dilate { any } else { all });
            }
        }
        out
    }

    /// `mask` as a `[C, H, W]` 0/1 tensor repeated over channels.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[channels, self.height, self.width], |i| {
            if self.data[i % hw] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Band between foreground and background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryMap(pub BinaryMask);

/// `dilate(mask) − erode(mask)` with a square `kernel_size` window and zero
/// padding, so foreground touching the image border keeps a band there.
pub fn morphological_gradient(mask: &BinaryMask, kernel_size: usize) -> Result<BoundaryMap> {
    if kernel_size % 2 == 0 {
        return Err(Error::invalid(
            "kernel_size",
            format!("{kernel_size} must be odd"),
        ));
    }
    let dil = mask.window_op(kernel_size, true);
    let ero = mask.window_op(kernel_size, false);
    let data = dil.data.iter().zip(&ero.data).map(|(d, e)| *d && !*e).collect();
    Ok(BoundaryMap(BinaryMask::new(mask.height, mask.width, data)?))
}

/// Unit-norm face identity descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct IdentityEmbedding(Vec<f64>);

impl TryFrom<Vec<f64>> for IdentityEmbedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || (norm - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(
                "identity_embedding",
                format!("expected unit L2 norm, got {norm}"),
            ));
        }
        Ok(Self(v))
    }
}

impl From<IdentityEmbedding> for Vec<f64> {
    fn from(e: IdentityEmbedding) -> Self {
        e.0
    }
}

impl IdentityEmbedding {
    /// Normalizes `v`; fails on a zero vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::invalid("identity_embedding", "zero vector"));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// One annotated head: where it is and what it looks at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeInstance {
    pub head_bbox: BBox,
    pub target: Point,
}

impl GazeInstance {
    pub fn head_center(&self) -> Point {
        self.head_bbox.center()
    }

    /// Unit vector from the head center to the target, if they differ.
    /// Normalized the same way the gaze detector normalizes its output.
    pub fn vector(&self) -> Option<[f64; 2]> {
        let c = self.head_center();
        let d = [self.target[0] - c[0], self.target[1] - c[1]];
        let n2 = d[0] * d[0] + d[1] * d[1];
        if n2 == 0.0 {
            return None;
        }
        let inv = 1.0 / (n2 + GAZE_NORM_EPS).sqrt();
        Some([d[0] * inv, d[1] * inv])
    }
}

/// Keypoints in coordinates normalized to their subject box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSet {
    pub coords: Vec<Point>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.visible.len() {
            return Err(Error::invalid(
                "keypoints",
                "coords and visible differ in length",
            ));
        }
        for (p, &v) in self.coords.iter().zip(&self.visible) {
            if v && !(0.0..=1.0).contains(&p[0]) || v && !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::invalid(
                    "keypoints",
                    format!("visible keypoint {p:?} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// Interaction class vocabulary; class id = index of the `(verb, object)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HoiVocabulary(Vec<(String, String)>);

impl HoiVocabulary {
    pub fn new(classes: Vec<(String, String)>) -> Result<Self> {
        let unique: BTreeSet<_> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::Config("duplicate (verb, object) class".into()));
        }
        Ok(Self(classes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id(&self, verb: &str, object: &str) -> Option<usize> {
        self.0.iter().position(|(v, o)| v == verb && o == object)
    }

    pub fn class(&self, id: usize) -> Option<(&str, &str)> {
        self.0.get(id).map(|(v, o)| (v.as_str(), o.as_str()))
    }
}

/// Set of interaction class ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HoiLabelSet(pub BTreeSet<usize>);

impl HoiLabelSet {
    pub fn contains(&self, id: usize) -> bool {
        self.0.contains(&id)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.0.iter().find(|&&c| c >= num_classes) {
            Some(c) => Err(Error::invalid(
                "interactions",
                format!("class id {c} outside vocabulary of {num_classes}"),
            )),
            None => Ok(()),
        }
    }

    /// Multi-hot targets over `num_classes`.
    pub fn targets(&self, num_classes: usize) -> Vec<bool> {
        (0..num_classes).map(|c| self.contains(c)).collect()
    }
}

/// A loss value with instance bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct LossValue<'t> {
    pub value: Var<'t>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl<'t> LossValue<'t> {
    fn zero(tape: &'t Tape, skipped: usize) -> Self {
        Self {
            value: tape.scalar(0.0),
            evaluated: 0,
            skipped,
        }
    }

    /// True when no instance contributed.
    pub fn is_skipped(&self) -> bool {
        self.evaluated == 0
    }
}

fn mean_of<'t>(tape: &'t Tape, terms: Vec<Var<'t>>, skipped: usize) -> LossValue<'t> {
    if terms.is_empty() {
        return LossValue::zero(tape, skipped);
    }
    let n = terms.len();
    let sum = terms
        .into_iter()
        .reduce(|a, b| a.add(b))
        .expect("non-empty");
    LossValue {
        value: sum.scale(1.0 / n as f64),
        evaluated: n,
        skipped,
    }
}

/// Crops the pixel window of `bbox` from a `[C, H, W]` variable.
pub fn crop_box<'t>(image: Var<'t>, bbox: &BBox) -> Var<'t> {
    let shape = image.shape();
    let (rows, cols) = bbox.pixel_window(shape[1], shape[2]);
    image.crop(0..shape[0], rows, cols)
}

/// Squared Laplacian-response difference on the boundary band, averaged over
/// channels and band pixels.
pub fn boundary_loss<'t>(x0: Var<'t>, x0_hat: Var<'t>, boundary: &BoundaryMap) -> Result<Var<'t>> {
    let tape = x0_hat.tape();
    let shape = x0_hat.shape();
    if x0.shape() != shape {
        return Err(Error::Shape {
            expected: shape,
            actual: x0.shape(),
        });
    }
    let band = &boundary.0;
    if shape.len() != 3 || (band.height, band.width) != (shape[1], shape[2]) {
        return Err(Error::Shape {
            expected: shape,
            actual: vec![band.height, band.width],
        });
    }
    let n = band.count();
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let kernel = laplacian_kernel();
    let mask = band.to_tensor(shape[0]);
    let diff = x0_hat
        .depthwise_filter(&kernel)
        .sub(x0.depthwise_filter(&kernel));
    Ok(diff
        .square()
        .mul_const(&mask)
        .sum()
        .scale(1.0 / (shape[0] * n) as f64))
}

/// Identity loss with reference embeddings computed from `x0`.
pub fn id_loss<'t>(
    x0: Var<'t>,
    x0_hat: Var<'t>,
    face_boxes: &[BBox],
    embedder: &dyn FaceEmbedderAdapter,
) -> Result<LossValue<'t>> {
    let tape = x0_hat.tape();
    let mut terms = Vec::with_capacity(face_boxes.len());
    for b in face_boxes {
        b.validate()?;
        let a = embedder.embed(crop_box(x0, b))?;
        let e = embedder.embed(crop_box(x0_hat, b))?;
        terms.push(e.sub(a).norm_sq());
    }
    Ok(mean_of(tape, terms, 0))
}

/// Identity loss against precomputed reference embeddings, one per box.
pub fn id_loss_from_embeddings<'t>(
    reference: &[IdentityEmbedding],
    x0_hat: Var<'t>,
    face_boxes: &[BBox],
    embedder: &dyn FaceEmbedderAdapter,
) -> Result<LossValue<'t>> {
    if reference.len() != face_boxes.len() {
        return Err(Error::invalid(
            "reference",
            format!("{} embeddings for {} faces", reference.len(), face_boxes.len()),
        ));
    }
    let tape = x0_hat.tape();
    let mut terms = Vec::with_capacity(face_boxes.len());
    for (r, b) in reference.iter().zip(face_boxes) {
        let e = embedder.embed(crop_box(x0_hat, b))?;
        let shape = e.shape();
        let r = Tensor::new(shape, r.values().to_vec())?;
        terms.push(e.sub_const(&r).norm_sq());
    }
    Ok(mean_of(tape, terms, 0))
}

/// Gaze loss over annotated heads; heads without a prediction are skipped.
pub fn gaze_loss<'t>(
    gaze_gt: &[GazeInstance],
    x0_hat: Var<'t>,
    detector: &dyn GazeAdapter,
) -> Result<LossValue<'t>> {
    let tape = x0_hat.tape();
    if gaze_gt.is_empty() {
        return Ok(LossValue::zero(tape, 0));
    }
    let heads: Vec<BBox> = gaze_gt.iter().map(|g| g.head_bbox).collect();
    let preds = detector.predict(x0_hat, &heads)?;
    if preds.len() != gaze_gt.len() {
        return Err(Error::Adapter {
            name: "gaze".into(),
            reason: format!("{} predictions for {} heads", preds.len(), gaze_gt.len()),
        });
    }
    let mut terms = Vec::new();
    let mut skipped = 0;
    for (gt, pred) in gaze_gt.iter().zip(preds) {
        let Some(pred) = pred else {
            skipped += 1;
            continue;
        };
        let target = Tensor::new(vec![2], gt.target.to_vec())?;
        let mut term = pred.target.sub_const(&target).norm_sq();
        if let Some(gv) = gt.vector() {
            let gv = tape.constant(Tensor::new(vec![2], gv.to_vec())?);
            let norms = pred.vector.norm_sq().mul_scalar(gv.norm_sq());
            let cos = pred.vector.dot(gv).div(norms.add_scalar(1e-24).sqrt());
            term = term.add(cos.neg().add_scalar(1.0));
        }
        terms.push(term);
    }
    Ok(mean_of(tape, terms, skipped))
}

/// Keypoint loss over subject crops; subjects without commonly visible
/// keypoints are skipped.
pub fn pose_loss<'t>(
    x0: Var<'t>,
    x0_hat: Var<'t>,
    subject_boxes: &[BBox],
    detector: &dyn PoseAdapter,
) -> Result<LossValue<'t>> {
    let tape = x0_hat.tape();
    let mut terms = Vec::new();
    let mut skipped = 0;
    for b in subject_boxes {
        b.validate()?;
        let reference = detector.predict(crop_box(x0, b))?;
        let estimate = detector.predict(crop_box(x0_hat, b))?;
        let k = reference.visible.len();
        let common: Vec<usize> = (0..k)
            .filter(|&i| reference.visible[i] && estimate.visible.get(i).copied().unwrap_or(false))
            .collect();
        if common.is_empty() {
            skipped += 1;
            continue;
        }
        let mut mask = Tensor::zeros(&[k, 2]);
        for &i in &common {
            mask.data_mut()[2 * i] = 1.0;
            mask.data_mut()[2 * i + 1] = 1.0;
        }
        let term = estimate
            .coords
            .sub(reference.coords)
            .square()
            .mul_const(&mask)
            .sum()
            .scale(1.0 / (2 * common.len()) as f64);
        terms.push(term);
    }
    Ok(mean_of(tape, terms, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Multi-label binary focal loss averaged over the classes marked in
/// `valid` (all classes when `None`). Zero when no class is valid.
pub fn focal_loss<'t>(
    targets: &[bool],
    logits: Var<'t>,
    params: FocalParams,
    valid: Option<&[bool]>,
) -> Result<Var<'t>> {
    let tape = logits.tape();
    let k = logits.value().len();
    if targets.len() != k {
        return Err(Error::invalid(
            "targets",
            format!("{} targets for {k} logits", targets.len()),
        ));
    }
    if !logits.value().all_finite() {
        return Err(Error::invalid("logits", "non-finite logits"));
    }
    let valid: Vec<bool> = match valid {
        Some(v) if v.len() != k => {
            return Err(Error::invalid("valid", format!("{} flags for {k} classes", v.len())))
        }
        Some(v) => v.to_vec(),
        None => vec![true; k],
    };
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Ok(tape.scalar(0.0));
    }
    let FocalParams { gamma, alpha } = params;
    let logits = logits.reshape(&[k]);
    let log_p = logits.log_sigmoid();
    let log_q = logits.neg().log_sigmoid();
    let pos = log_q.scale(gamma).exp().mul(log_p).scale(-alpha);
    let neg = log_p.scale(gamma).exp().mul(log_q).scale(-(1.0 - alpha));
    let pos_mask = Tensor::from_fn(&[k], |i| if valid[i] && targets[i] { 1.0 } else { 0.0 });
    let neg_mask = Tensor::from_fn(&[k], |i| if valid[i] && !targets[i] { 1.0 } else { 0.0 });
    Ok(pos
        .mul_const(&pos_mask)
        .add(neg.mul_const(&neg_mask))
        .sum()
        .scale(1.0 / n_valid as f64))
}

/// Focal loss between annotated interaction labels and the detector's
/// logits on `x̂0`, restricted to the classes the detector marks valid.
pub fn interaction_loss<'t>(
    hoi_gt: &HoiLabelSet,
    x0_hat: Var<'t>,
    detector: &dyn HoiAdapter,
    params: FocalParams,
) -> Result<LossValue<'t>> {
    let tape = x0_hat.tape();
    let pred = detector.predict(x0_hat)?;
    let k = detector.num_classes();
    hoi_gt.validate(k)?;
    if !pred.valid.iter().any(|&v| v) {
        return Ok(LossValue::zero(tape, 1));
    }
    let value = focal_loss(&hoi_gt.targets(k), pred.logits, params, Some(&pred.valid))?;
    Ok(LossValue {
        value,
        evaluated: 1,
        skipped: 0,
    })
}

/// `1 − cos(query, aligned)`.
pub fn reg_loss<'t>(query_embedding: Var<'t>, mean_aligned: Var<'t>) -> Result<Var<'t>> {
    let (q, a) = (query_embedding.value(), mean_aligned.value());
    if q.len() != a.len() {
        return Err(Error::Shape {
            expected: q.shape().to_vec(),
            actual: a.shape().to_vec(),
        });
    }
    if q.data().iter().all(|&v| v == 0.0) || a.data().iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("reg_loss", "zero vector"));
    }
    let q = query_embedding.reshape(&[q.len()]);
    let a = mean_aligned.reshape(&[a.len()]);
    let inv_norms = q.norm_sq().mul(a.norm_sq()).sqrt().recip();
    Ok(q.dot(a).mul(inv_norms).neg().add_scalar(1.0))
}

/// Per-term scalars plus the weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub denoise: f64,
    pub reg: f64,
    pub boundary: f64,
    pub id: f64,
    pub gaze: f64,
    pub pose: f64,
    pub interaction: f64,
    pub total: f64,
    /// Terms whose timestep gate was open.
    #[serde(default)]
    pub active: BTreeSet<LossTerm>,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Denoise => self.denoise,
            LossTerm::Reg => self.reg,
            LossTerm::Boundary => self.boundary,
            LossTerm::Id => self.id,
            LossTerm::Gaze => self.gaze,
            LossTerm::Pose => self.pose,
            LossTerm::Interaction => self.interaction,
        }
    }

    pub fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Denoise => self.denoise = v,
            LossTerm::Reg => self.reg = v,
            LossTerm::Boundary => self.boundary = v,
            LossTerm::Id => self.id = v,
            LossTerm::Gaze => self.gaze = v,
            LossTerm::Pose => self.pose = v,
            LossTerm::Interaction => self.interaction = v,
        }
    }

    /// First non-finite entry, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        LossTerm::ALL
            .into_iter()
            .find(|&t| !self.get(t).is_finite())
            .map(LossTerm::name)
            .or_else(|| (!self.total.is_finite()).then_some("total"))
    }
}

/// `total = denoise + Σ_k λ_k(t) · gate_k(t) · loss_k`. Gated-off terms are
/// reported as zero; terms with a zero coefficient are left out of the sum
/// rather than multiplied by zero.
pub fn combined_loss(
    parts: &BTreeMap<LossTerm, f64>,
    t: usize,
    config: &FeedbackConfig,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    for (&term, &v) in parts {
        if !v.is_finite() {
            return Err(Error::invalid("parts", format!("{term} = {v} is not finite")));
        }
    }
    out.denoise = parts.get(&LossTerm::Denoise).copied().unwrap_or(0.0);
    let mut total = out.denoise;
    out.active.insert(LossTerm::Denoise);
    for term in LossTerm::AUXILIARY {
        if !config.gates.active(term, t) {
            continue;
        }
        out.active.insert(term);
        let v = parts.get(&term).copied().unwrap_or(0.0);
        out.set(term, v);
        let c = config.coefficient(term, t);
        if c != 0.0 {
            total += c * v;
        }
    }
    out.total = total;
    Ok(out)
}
