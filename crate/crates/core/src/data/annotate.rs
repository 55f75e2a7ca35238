//! Assembling annotations from captioning, tagging, grounding, segmentation,
//! face and keypoint extractors.

use crate::autodiff::Tape;
use crate::detectors::synth::{caption_for, BACKGROUND, BODY, FACE_ROWS, OBJECTS};
use crate::detectors::{
    FaceEmbedderAdapter, PoseAdapter, SegmenterAdapter, ToyFaceEmbedder, ToyPoseDetector,
    ToySegmenter,
};
use crate::diffusion::ImageGrid;
use crate::error::{Error, Result};
use crate::geometry::{pixel_center, BBox};
use crate::losses::{crop_box, HoiLabelSet, IdentityEmbedding, KeypointSet};

use super::{Subject, TrainingSample};

/// The per-stage extractors behind dataset annotation.
pub trait ExtractorBundle {
    fn caption(&self, image: &ImageGrid) -> Result<String>;
    /// Entity nouns mentioned in a caption.
    fn entities(&self, caption: &str) -> Result<Vec<String>>;
    /// Instance boxes for each requested noun, as `(noun, box)`.
    fn ground(&self, image: &ImageGrid, nouns: &[String]) -> Result<Vec<(String, BBox)>>;
    fn segmenter(&self) -> &dyn SegmenterAdapter;
    /// Face box inside a subject, if the subject has one.
    fn face(&self, image: &ImageGrid, class_name: &str, bbox: &BBox) -> Result<Option<BBox>>;
    fn face_embedder(&self) -> &dyn FaceEmbedderAdapter;
    fn keypoints(&self, image: &ImageGrid, class_name: &str, bbox: &BBox) -> Result<Option<KeypointSet>>;
}

fn stage(stage: &str, id: &str, e: Error) -> Error {
    Error::Adapter {
        name: stage.into(),
        reason: format!("sample {id}: {e}"),
    }
}

/// Builds an annotated sample from extractor outputs. Gaze and interaction
/// labels come from dataset annotations, not extractors, and start empty.
pub fn annotation_builder(
    id: &str,
    image: &ImageGrid,
    caption: Option<&str>,
    extractors: &dyn ExtractorBundle,
) -> Result<TrainingSample> {
    let caption = match caption {
        Some(c) => c.to_string(),
        None => extractors.caption(image).map_err(|e| stage("captioner", id, e))?,
    };
    let mut nouns = extractors.entities(&caption).map_err(|e| stage("tagger", id, e))?;
    let mut seen = std::collections::BTreeSet::new();
    nouns.retain(|n| seen.insert(n.clone()));
    let grounded = extractors.ground(image, &nouns).map_err(|e| stage("grounding", id, e))?;
    let boxes: Vec<BBox> = grounded.iter().map(|(_, b)| *b).collect();
    let masks = extractors
        .segmenter()
        .masks(image.tensor(), &boxes)
        .map_err(|e| stage("segmenter", id, e))?;
    let mut subjects = Vec::with_capacity(grounded.len());
    for ((class_name, bbox), mask) in grounded.into_iter().zip(masks) {
        let face_bbox = extractors
            .face(image, &class_name, &bbox)
            .map_err(|e| stage("face", id, e))?;
        let identity = match face_bbox {
            Some(fb) => {
                let tape = Tape::new();
                let crop = crop_box(tape.constant(image.tensor().clone()), &fb);
                let v = extractors
                    .face_embedder()
                    .embed(crop)
                    .map_err(|e| stage("face embedder", id, e))?
                    .value();
                Some(IdentityEmbedding::normalized(v.data().to_vec()).map_err(|e| stage("face embedder", id, e))?)
            }
            None => None,
        };
        let keypoints = extractors
            .keypoints(image, &class_name, &bbox)
            .map_err(|e| stage("keypoints", id, e))?;
        subjects.push(Subject {
            class_name,
            bbox,
            mask,
            face_bbox,
            keypoints,
            identity,
        });
    }
    let query = subjects
        .iter()
        .map(|s| s.class_name.as_str())
        .collect::<Vec<_>>()
        .join(",");
    Ok(TrainingSample {
        id: id.into(),
        image: image.clone(),
        caption,
        query,
        subjects,
        gaze: Vec::new(),
        interactions: Vec::new(),
        hoi_labels: HoiLabelSet::default(),
    })
}

/// Extractors for synthetic scenes: connected components of non-background
/// pixels, labelled by their majority colour.
#[derive(Debug, Default)]
pub struct ToyExtractors {
    segmenter: ToySegmenter,
    embedder: ToyFaceEmbedder,
    pose: ToyPoseDetector,
}

impl ToyExtractors {
    fn class_of(color: [f64; 3]) -> Option<&'static str> {
        if color == BODY {
            return Some("person");
        }
        OBJECTS.iter().find(|(_, c)| *c == color).map(|(n, _)| *n)
    }

    /// Non-background 4-connected components as `(class, rows, cols)`, in
    /// row-major order of their first pixel.
    pub fn components(image: &ImageGrid) -> Vec<(Option<&'static str>, BBox)> {
        let (h, w) = (image.height(), image.width());
        let d = image.tensor().data();
        let color = |i: usize| [0, 1, 2].map(|c| d[c * h * w + i]);
        let mut seen = vec![false; h * w];
        let mut out = Vec::new();
        for start in 0..h * w {
            if seen[start] || color(start) == BACKGROUND {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut pixels = Vec::new();
            while let Some(i) = stack.pop() {
                pixels.push(i);
                let (y, x) = (i / w, i % w);
                let mut push = |j: usize| {
                    if !seen[j] && color(j) != BACKGROUND {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
            }
            let mut counts: Vec<([f64; 3], usize)> = Vec::new();
            for &i in &pixels {
                let c = color(i);
                match counts.iter_mut().find(|(k, _)| *k == c) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((c, 1)),
                }
            }
            let majority = counts.iter().max_by_key(|(_, n)| *n).map(|(c, _)| *c);
            let rows = pixels.iter().map(|i| i / w);
            let cols = pixels.iter().map(|i| i % w);
            let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap() + 1);
            let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap() + 1);
            out.push((
                majority.and_then(Self::class_of),
                BBox::from_pixels(r0..r1, c0..c1, h, w),
            ));
        }
        out
    }
}

impl ExtractorBundle for ToyExtractors {
    fn caption(&self, image: &ImageGrid) -> Result<String> {
        let names: Vec<&str> = Self::components(image).into_iter().filter_map(|(c, _)| c).collect();
        Ok(caption_for(&names))
    }

    fn entities(&self, caption: &str) -> Result<Vec<String>> {
        let known: Vec<&str> = std::iter::once("person")
            .chain(OBJECTS.iter().map(|(n, _)| *n))
            .collect();
        Ok(caption
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|w| known.contains(w))
            .map(String::from)
            .collect())
    }

    fn ground(&self, image: &ImageGrid, nouns: &[String]) -> Result<Vec<(String, BBox)>> {
        Ok(Self::components(image)
            .into_iter()
            .filter_map(|(c, b)| {
                let c = c?;
                nouns.iter().any(|n| n == c).then(|| (c.to_string(), b))
            })
            .collect())
    }

    fn segmenter(&self) -> &dyn SegmenterAdapter {
        &self.segmenter
    }

    fn face(&self, image: &ImageGrid, class_name: &str, bbox: &BBox) -> Result<Option<BBox>> {
        if class_name != "person" {
            return Ok(None);
        }
        let (h, w) = (image.height(), image.width());
        let (rows, cols) = bbox.pixel_window(h, w);
        let end = (rows.start + FACE_ROWS).min(rows.end);
        Ok(Some(BBox::from_pixels(rows.start..end, cols, h, w)))
    }

    fn face_embedder(&self) -> &dyn FaceEmbedderAdapter {
        &self.embedder
    }

    /// Soft-argmax keypoints snapped to the nearest pixel center of the crop.
    fn keypoints(&self, image: &ImageGrid, class_name: &str, bbox: &BBox) -> Result<Option<KeypointSet>> {
        if class_name != "person" {
            return Ok(None);
        }
        let tape = Tape::new();
        let crop = crop_box(tape.constant(image.tensor().clone()), bbox);
        let s = crop.shape();
        let (ch, cw) = (s[1], s[2]);
        let pred = self.pose.predict(crop)?;
        let c = pred.coords.value();
        let snap = |v: f64, n: usize| ((v * n as f64 - 0.5).round().max(0.0) as usize).min(n - 1);
        let coords = c
            .data()
            .chunks(2)
            .map(|p| pixel_center(snap(p[1], ch), snap(p[0], cw), ch, cw))
            .collect();
        Ok(Some(KeypointSet {
            coords,
            visible: pred.visible,
        }))
    }
}
