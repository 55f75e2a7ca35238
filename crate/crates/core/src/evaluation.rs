//! Social-fidelity metrics for generated images: IoU-free interaction mAP,
//! greedy identity similarity and gaze accuracy, plus embedding-based
//! alignment scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::TrainingSample;
use crate::detectors::synth::{object_color, BODY};
use crate::detectors::DetectorBundle;
use crate::diffusion::ImageGrid;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::losses::{crop_box, HoiLabelSet, IdentityEmbedding};
use crate::tensor::Tensor;

/// Classes seen in fewer training images than this are rare.
pub const RARE_THRESHOLD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedDetection {
    pub class_id: usize,
    pub score: f64,
    pub image_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// `None` when no class has ground truth.
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
    /// Classes with detections but no ground-truth instance.
    pub excluded: BTreeSet<usize>,
}

/// Classes annotated in fewer than [`RARE_THRESHOLD`] training images.
pub fn rare_classes(train: &[HoiLabelSet], num_classes: usize) -> BTreeSet<usize> {
    let mut counts = vec![0usize; num_classes];
    for labels in train {
        for &c in &labels.0 {
            if c < num_classes {
                counts[c] += 1;
            }
        }
    }
    (0..num_classes).filter(|&c| counts[c] < RARE_THRESHOLD).collect()
}

/// Area under the precision envelope of a ranked hit list.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    // Recall grows by exactly 1/num_gt at each hit.
    hits.iter()
        .zip(&precision)
        .filter(|(&h, _)| h)
        .fold(0.0, |ap, (_, p)| ap + p / num_gt as f64)
}

/// IoU-free mAP: a detection of class `c` in image `i` is a true positive
/// when image `i` is annotated with `c` and that annotation is not yet
/// matched. Detections are ranked by score, then by image id.
pub fn interaction_map(
    detections: &[RankedDetection],
    gt: &[HoiLabelSet],
    rare: &BTreeSet<usize>,
) -> Result<MapResult> {
    for d in detections {
        if !d.score.is_finite() {
            return Err(Error::invalid("detections", format!("non-finite score {}", d.score)));
        }
        if d.image_id >= gt.len() {
            return Err(Error::invalid(
                "detections",
                format!("image id {} outside {} images", d.image_id, gt.len()),
            ));
        }
    }
    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for labels in gt {
        for &c in &labels.0 {
            *num_gt.entry(c).or_default() += 1;
        }
    }
    let mut by_class: BTreeMap<usize, Vec<&RankedDetection>> = BTreeMap::new();
    for d in detections {
        by_class.entry(d.class_id).or_default().push(d);
    }
    let mut out = MapResult {
        excluded: by_class.keys().filter(|c| !num_gt.contains_key(c)).copied().collect(),
        ..MapResult::default()
    };
    for (&c, &n) in &num_gt {
        let mut ranked = by_class.remove(&c).unwrap_or_default();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
        let mut matched = BTreeSet::new();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|d| gt[d.image_id].contains(c) && matched.insert(d.image_id))
            .collect();
        out.per_class.insert(c, average_precision(&hits, n));
    }
    let mean = |it: Vec<f64>| (!it.is_empty()).then(|| it.iter().sum::<f64>() / it.len() as f64);
    out.full = mean(out.per_class.values().copied().collect());
    out.rare = mean(out.per_class.iter().filter(|(c, _)| rare.contains(c)).map(|(_, &v)| v).collect());
    out.non_rare =
        mean(out.per_class.iter().filter(|(c, _)| !rare.contains(c)).map(|(_, &v)| v).collect());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityPair {
    pub image: usize,
    pub reference: usize,
    pub generated: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityResult {
    /// Mean cosine over all pairs; `None` without pairs.
    pub mean: Option<f64>,
    pub pairs: Vec<IdentityPair>,
}

/// Greedy one-to-one matching on a similarity matrix (`sim[r][g]`), in
/// selection order. Ties go to the lower row, then the lower column.
pub fn greedy_match(sim: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let mut cand: Vec<(f64, usize, usize)> = sim
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(g, &v)| (v, r, g)))
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_r, mut used_g) = (BTreeSet::new(), BTreeSet::new());
    let mut out = Vec::new();
    for (v, r, g) in cand {
        if !used_r.contains(&r) && !used_g.contains(&g) {
            used_r.insert(r);
            used_g.insert(g);
            out.push((r, g, v));
        }
    }
    out
}

/// Per image, repeatedly pairs the most similar unmatched reference and
/// generated faces. Ties go to the lower reference index, then the lower
/// generated index.
pub fn greedy_identity_similarity(
    reference: &[Vec<IdentityEmbedding>],
    generated: &[Vec<IdentityEmbedding>],
) -> Result<IdentityResult> {
    if reference.len() != generated.len() {
        return Err(Error::invalid(
            "embeddings",
            format!("{} reference images, {} generated", reference.len(), generated.len()),
        ));
    }
    let mut pairs = Vec::new();
    for (image, (refs, gens)) in reference.iter().zip(generated).enumerate() {
        let mut sim = Vec::with_capacity(refs.len());
        for re in refs {
            let mut row = Vec::with_capacity(gens.len());
            for ge in gens {
                if re.dim() != ge.dim() {
                    return Err(Error::invalid("embeddings", "dimension mismatch"));
                }
                row.push(re.cosine(ge));
            }
            sim.push(row);
        }
        pairs.extend(greedy_match(&sim).into_iter().map(|(r, g, cosine)| IdentityPair {
            image,
            reference: r,
            generated: g,
            cosine,
        }));
    }
    let mean = (!pairs.is_empty())
        .then(|| pairs.iter().map(|p| p.cosine).sum::<f64>() / pairs.len() as f64);
    Ok(IdentityResult { mean, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
    Excluded,
}

/// One annotated head evaluated on a generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeCase {
    pub head_id: usize,
    /// Labels of the reference-image objects containing the annotated
    /// target; empty when the target lies in no object box.
    pub target_labels: BTreeSet<String>,
    /// Labelled object boxes of the generated image.
    pub generated_boxes: Vec<(String, BBox)>,
    /// Detector's target on the generated image; `None` without a prediction.
    pub predicted: Option<Point>,
}

impl GazeCase {
    pub fn verdict(&self) -> Verdict {
        if self.target_labels.is_empty() {
            return Verdict::Excluded;
        }
        let hit = self.predicted.is_some_and(|p| {
            self.generated_boxes
                .iter()
                .any(|(label, b)| self.target_labels.contains(label) && b.contains(p))
        });
        if hit {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeAccuracy {
    pub correct: usize,
    pub incorrect: usize,
    pub excluded: usize,
    /// `100 · correct / (correct + incorrect)`; `None` when every case is
    /// excluded.
    pub percent: Option<f64>,
}

pub fn gaze_accuracy(cases: &[GazeCase]) -> GazeAccuracy {
    let mut out = GazeAccuracy::default();
    for c in cases {
        match c.verdict() {
            Verdict::Correct => out.correct += 1,
            Verdict::Incorrect => out.incorrect += 1,
            Verdict::Excluded => out.excluded += 1,
        }
    }
    let judged = out.correct + out.incorrect;
    out.percent = (judged > 0).then(|| 100.0 * out.correct as f64 / judged as f64);
    out
}

/// Labelled boxes of every subject except the one whose face is `head`.
fn object_boxes(sample: &TrainingSample, head: &BBox) -> Vec<(String, BBox)> {
    sample
        .subjects
        .iter()
        .filter(|s| s.face_bbox.as_ref() != Some(head))
        .map(|s| (s.class_name.clone(), s.bbox))
        .collect()
}

/// Gaze cases for the annotated heads of `reference`, predicted on
/// `generated`. Generated-image boxes are the reference annotations.
pub fn gaze_cases(
    generated: &ImageGrid,
    reference: &TrainingSample,
    detectors: &DetectorBundle,
) -> Result<Vec<GazeCase>> {
    if reference.gaze.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let img = tape.constant(generated.tensor().clone());
    let heads: Vec<BBox> = reference.gaze.iter().map(|g| g.head_bbox).collect();
    let preds = detectors.gaze.predict(img, &heads)?;
    Ok(reference
        .gaze
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(head_id, (g, pred))| {
            let boxes = object_boxes(reference, &g.head_bbox);
            let target_labels = boxes
                .iter()
                .filter(|(_, b)| b.contains(g.target))
                .map(|(l, _)| l.clone())
                .collect();
            let predicted = pred.map(|p| {
                let v = p.target.value();
                [v.data()[0], v.data()[1]]
            });
            GazeCase {
                head_id,
                target_labels,
                generated_boxes: boxes,
                predicted,
            }
        })
        .collect())
}

/// Maps an image to a feature vector.
pub trait ImageEmbedderAdapter: Send + Sync {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Maps a prompt into the space of an [`ImageEmbedderAdapter`].
pub trait TextEmbedderAdapter: Send + Sync {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Joint toy space: one axis per known entity class. Images embed as the
/// fraction of pixels whose colour is nearest to each class colour; prompts
/// as class-name indicators.
#[derive(Debug, Clone)]
pub struct ToyConceptEmbedder {
    pub classes: Vec<(String, [f64; 3])>,
    /// Pixels farther than this from every class colour count for nothing.
    pub max_distance: f64,
}

impl Default for ToyConceptEmbedder {
    fn default() -> Self {
        let mut classes = vec![("person".to_string(), BODY)];
        for name in ["ball", "box", "cup", "book"] {
            classes.push((name.to_string(), object_color(name).expect("known object")));
        }
        Self {
            classes,
            max_distance: 0.1,
        }
    }
}

impl ImageEmbedderAdapter for ToyConceptEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (_, h, w) = image.chw()?;
        let d = image.data();
        let mut out = vec![0.0; self.classes.len()];
        for p in 0..h * w {
            let px = [d[p], d[h * w + p], d[2 * h * w + p]];
            let best = self
                .classes
                .iter()
                .enumerate()
                .map(|(i, (_, c))| (i, (0..3).map(|k| (px[k] - c[k]).powi(2)).sum::<f64>().sqrt()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, dist)) = best {
                if dist <= self.max_distance {
                    out[i] += 1.0 / (h * w) as f64;
                }
            }
        }
        Ok(out)
    }
}

impl TextEmbedderAdapter for ToyConceptEmbedder {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let words: BTreeSet<String> = prompt
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .map(str::to_lowercase)
            .collect();
        Ok(self
            .classes
            .iter()
            .map(|(name, _)| if words.contains(name) { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Mean colour on a `grid × grid` layout, centred per channel.
#[derive(Debug, Clone)]
pub struct ToyPatchEmbedder {
    pub grid: usize,
}

impl Default for ToyPatchEmbedder {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl ImageEmbedderAdapter for ToyPatchEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (c, _, _) = image.chw()?;
        let tape = Tape::new();
        let pooled = tape.constant(image.clone()).adaptive_avg_pool(self.grid, self.grid);
        let v = pooled.value();
        let g2 = self.grid * self.grid;
        let mut out = v.data().to_vec();
        for ch in 0..c {
            let s = &mut out[ch * g2..(ch + 1) * g2];
            let m = s.iter().sum::<f64>() / g2 as f64;
            s.iter_mut().for_each(|x| *x -= m);
        }
        Ok(out)
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("embeddings", format!("dimensions {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub text_image: f64,
    pub image_image: f64,
    pub self_supervised: f64,
}

pub struct AlignmentEmbedders<'a> {
    pub text: &'a dyn TextEmbedderAdapter,
    pub image: &'a dyn ImageEmbedderAdapter,
    pub self_supervised: &'a dyn ImageEmbedderAdapter,
}

/// Mean pairwise cosines: prompt vs generated image, generated vs reference
/// image in two image spaces.
pub fn alignment_scores(
    generated: &[ImageGrid],
    reference: &[ImageGrid],
    prompts: &[String],
    embedders: &AlignmentEmbedders<'_>,
) -> Result<AlignmentScores> {
    if generated.len() != reference.len() || generated.len() != prompts.len() {
        return Err(Error::invalid(
            "alignment",
            format!(
                "{} generated, {} reference images and {} prompts",
                generated.len(),
                reference.len(),
                prompts.len()
            ),
        ));
    }
    if generated.is_empty() {
        return Err(Error::EmptyDataset("alignment inputs".into()));
    }
    let mut s = AlignmentScores::default();
    for ((g, r), p) in generated.iter().zip(reference).zip(prompts) {
        let gi = embedders.image.embed_image(g.tensor())?;
        s.text_image += cosine(&embedders.text.embed_text(p)?, &gi)?;
        s.image_image += cosine(&gi, &embedders.image.embed_image(r.tensor())?)?;
        s.self_supervised += cosine(
            &embedders.self_supervised.embed_image(g.tensor())?,
            &embedders.self_supervised.embed_image(r.tensor())?,
        )?;
    }
    let n = generated.len() as f64;
    s.text_image /= n;
    s.image_image /= n;
    s.self_supervised /= n;
    Ok(s)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub detections: usize,
    pub classes_evaluated: usize,
    pub classes_excluded: usize,
    pub identity_pairs: usize,
    pub gaze_correct: usize,
    pub gaze_incorrect: usize,
    pub gaze_excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_non_rare: Option<f64>,
    pub facial_cos_sim: Option<f64>,
    pub gaze_accuracy: Option<f64>,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
    pub counts: EvalCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>, scale: f64| v.map_or("n/a".to_string(), |x| format!("{:.2}", x * scale));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<12} {:<14} {:<15} {:<14} {:<8} {:<8} {:<8}",
            "mAP (full)", "mAP (rare)", "mAP (non-rare)", "Facial cos sim", "Gaze Accuracy", "CLIP-T", "CLIP-I", "DINO"
        );
        let _ = writeln!(
            s,
            "{:<12} {:<12} {:<14} {:<15} {:<14} {:<8.4} {:<8.4} {:<8.4}",
            f(self.map_full, 100.0),
            f(self.map_rare, 100.0),
            f(self.map_non_rare, 100.0),
            self.facial_cos_sim.map_or("n/a".into(), |v| format!("{v:.4}")),
            f(self.gaze_accuracy, 1.0),
            self.clip_t,
            self.clip_i,
            self.dino
        );
        let c = &self.counts;
        let _ = writeln!(
            s,
            "images {} | detections {} | classes {} evaluated, {} without ground truth | identity pairs {} | gaze {} correct, {} incorrect, {} excluded",
            c.images, c.detections, c.classes_evaluated, c.classes_excluded, c.identity_pairs, c.gaze_correct, c.gaze_incorrect, c.gaze_excluded
        );
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "config {h}");
        }
        s
    }
}

/// Scores generated images against their annotated references with the
/// given detectors. Generated-image face and object boxes are taken from
/// the reference annotations.
pub fn evaluate(
    generated: &[ImageGrid],
    reference: &[TrainingSample],
    detectors: &DetectorBundle,
    rare: &BTreeSet<usize>,
) -> Result<EvalReport> {
    if generated.len() != reference.len() {
        return Err(Error::invalid(
            "generated",
            format!("{} generated images for {} references", generated.len(), reference.len()),
        ));
    }
    if generated.is_empty() {
        return Err(Error::EmptyDataset("no generated images".into()));
    }
    let mut detections = Vec::new();
    let mut ref_ids = Vec::new();
    let mut gen_ids = Vec::new();
    let mut cases = Vec::new();
    for (i, (g, r)) in generated.iter().zip(reference).enumerate() {
        if g.tensor().shape() != r.image.tensor().shape() {
            return Err(Error::Shape {
                expected: r.image.tensor().shape().to_vec(),
                actual: g.tensor().shape().to_vec(),
            });
        }
        let tape = Tape::new();
        let gv = tape.constant(g.tensor().clone());
        for d in detectors.hoi.predict(gv)?.detections {
            detections.push(RankedDetection {
                class_id: d.class_id,
                score: d.score,
                image_id: i,
            });
        }
        let (boxes, refs) = r.faces_with_identity();
        let mut gens = Vec::with_capacity(boxes.len());
        for b in &boxes {
            let e = detectors.face.embed(crop_box(gv, b))?;
            gens.push(IdentityEmbedding::normalized(e.value().data().to_vec())?);
        }
        ref_ids.push(refs);
        gen_ids.push(gens);
        cases.extend(gaze_cases(g, r, detectors)?);
    }
    let gt: Vec<HoiLabelSet> = reference.iter().map(|r| r.hoi_labels.clone()).collect();
    let map = interaction_map(&detections, &gt, rare)?;
    let ident = greedy_identity_similarity(&ref_ids, &gen_ids)?;
    let gaze = gaze_accuracy(&cases);
    let concept = ToyConceptEmbedder::default();
    let patches = ToyPatchEmbedder::default();
    let refs: Vec<ImageGrid> = reference.iter().map(|r| r.image.clone()).collect();
    let prompts: Vec<String> = reference.iter().map(|r| r.caption.clone()).collect();
    let align = alignment_scores(
        generated,
        &refs,
        &prompts,
        &AlignmentEmbedders {
            text: &concept,
            image: &concept,
            self_supervised: &patches,
        },
    )?;
    Ok(EvalReport {
        map_full: map.full,
        map_rare: map.rare,
        map_non_rare: map.non_rare,
        facial_cos_sim: ident.mean,
        gaze_accuracy: gaze.percent,
        clip_t: align.text_image,
        clip_i: align.image_image,
        dino: align.self_supervised,
        counts: EvalCounts {
            images: generated.len(),
            detections: detections.len(),
            classes_evaluated: map.per_class.len(),
            classes_excluded: map.excluded.len(),
            identity_pairs: ident.pairs.len(),
            gaze_correct: gaze.correct,
            gaze_incorrect: gaze.incorrect,
            gaze_excluded: gaze.excluded,
        },
        config_hash: None,
    })
}
