//! Synthetic scenes whose annotations the toy detectors recover exactly.
//!
//! People are solid rectangles whose top two rows form a two-tone face,
//! with one green keypoint beacon per quadrant below the face rows. Objects
//! are solid squares. The gazed object carries a red beacon pixel. Non-beacon
//! colours keep red and green low so the beacons dominate every soft-argmax.

use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::toy::{ToyFaceEmbedder, ToyPoseDetector};
use super::FaceEmbedderAdapter;
use crate::autodiff::Tape;
use crate::data::{labels_for, Interaction, Subject, TrainingSample};
use crate::diffusion::ImageGrid;
use crate::error::{Error, Result};
use crate::geometry::{pixel_center, BBox, Point};
use crate::losses::{BinaryMask, GazeInstance, HoiVocabulary, IdentityEmbedding, KeypointSet};
use crate::tensor::Tensor;

/// An 8-bit colour level, so scenes saved as PNG reload unchanged.
const fn lv(k: u8) -> f64 {
    k as f64 / 255.0
}

pub const BACKGROUND: [f64; 3] = [lv(76), lv(76), lv(76)];
pub const GAZE_BEACON: [f64; 3] = [lv(255), lv(51), lv(51)];
pub const KEYPOINT_BEACON: [f64; 3] = [lv(51), lv(255), lv(51)];
pub const BODY: [f64; 3] = [lv(51), lv(38), lv(140)];
pub const FACE_ROWS: usize = 2;

pub const OBJECTS: [(&str, [f64; 3]); 4] = [
    ("ball", [lv(26), lv(26), lv(204)]),
    ("box", [lv(89), lv(26), lv(76)]),
    ("cup", [lv(26), lv(89), lv(153)]),
    ("book", [lv(64), lv(51), lv(13)]),
];

pub const FACE_TONES: [[f64; 3]; 5] = [
    [lv(153), lv(115), lv(89)],
    [lv(128), lv(76), lv(64)],
    [lv(115), lv(89), lv(153)],
    [lv(140), lv(128), lv(51)],
    [lv(89), lv(64), lv(38)],
];

pub const VERBS: [&str; 2] = ["look_at", "next_to"];

/// Every `(verb, object)` pair of the synthetic world, verb-major.
pub fn toy_vocabulary() -> HoiVocabulary {
    let pairs = VERBS
        .iter()
        .flat_map(|v| OBJECTS.iter().map(move |(o, _)| (v.to_string(), o.to_string())))
        .collect();
    HoiVocabulary::new(pairs).expect("distinct pairs")
}

pub fn object_color(class_name: &str) -> Option<[f64; 3]> {
    OBJECTS.iter().find(|(n, _)| *n == class_name).map(|&(_, c)| c)
}

/// A rectangle in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub class_name: String,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub color: [f64; 3],
    /// Left and right face tones; present for people.
    pub face: Option<[[f64; 3]; 2]>,
    /// Keypoint beacon pixels `(row, col)` relative to the entity.
    pub keypoints: Vec<(usize, usize)>,
}

impl SceneEntity {
    pub fn object(class_name: &str, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        let color = object_color(class_name)
            .ok_or_else(|| Error::invalid("class_name", format!("unknown object `{class_name}`")))?;
        Ok(Self {
            class_name: class_name.into(),
            rows,
            cols,
            color,
            face: None,
            keypoints: Vec::new(),
        })
    }

    pub fn person(
        rows: Range<usize>,
        cols: Range<usize>,
        face: [[f64; 3]; 2],
        keypoints: Vec<(usize, usize)>,
    ) -> Self {
        Self {
            class_name: "person".into(),
            rows,
            cols,
            color: BODY,
            face: Some(face),
            keypoints,
        }
    }

    fn bbox(&self, h: usize, w: usize) -> BBox {
        BBox::from_pixels(self.rows.clone(), self.cols.clone(), h, w)
    }

    fn face_rows(&self) -> Range<usize> {
        self.rows.start..(self.rows.start + FACE_ROWS).min(self.rows.end)
    }
}

/// Person `person` looks at `target`; the beacon is drawn in the pixel that
/// contains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGaze {
    pub person: usize,
    pub object: Option<usize>,
    pub target: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub entities: Vec<SceneEntity>,
    pub gaze: Option<SceneGaze>,
    /// Largest IoU tolerated between two entities.
    pub max_iou: f64,
}

impl SceneSpec {
    pub fn empty(id: &str, height: usize, width: usize) -> Self {
        Self {
            id: id.into(),
            height,
            width,
            entities: Vec::new(),
            gaze: None,
            max_iou: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 {
            return Err(Error::invalid("scene", "zero-sized scene"));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.rows.is_empty() || e.cols.is_empty() || e.rows.end > h || e.cols.end > w {
                return Err(Error::invalid("scene", format!("entity {i} outside the canvas")));
            }
            let (eh, ew) = (e.rows.len(), e.cols.len());
            if e.keypoints.iter().any(|&(r, c)| r >= eh || c >= ew) {
                return Err(Error::invalid("scene", format!("entity {i} keypoint outside its box")));
            }
            for (j, f) in self.entities.iter().enumerate().skip(i + 1) {
                let iou = e.bbox(h, w).iou(&f.bbox(h, w));
                if iou > self.max_iou {
                    return Err(Error::invalid(
                        "scene",
                        format!("entities {i} and {j} overlap with IoU {iou:.3} > {}", self.max_iou),
                    ));
                }
            }
        }
        if let Some(g) = &self.gaze {
            let p = self
                .entities
                .get(g.person)
                .filter(|p| p.face.is_some())
                .ok_or_else(|| Error::invalid("scene", "gaze subject is not a person"))?;
            if g.object.is_some_and(|o| o >= self.entities.len()) {
                return Err(Error::invalid("scene", "gaze object index out of range"));
            }
            if !(0.0..1.0).contains(&g.target[0]) || !(0.0..1.0).contains(&g.target[1]) {
                return Err(Error::invalid("scene", "gaze target outside [0, 1)"));
            }
            let (r, c) = target_pixel(g.target, h, w);
            if p.face_rows().contains(&r) && p.cols.contains(&c) {
                return Err(Error::invalid("scene", "gaze target inside the head"));
            }
        }
        Ok(())
    }
}

fn target_pixel(p: Point, h: usize, w: usize) -> (usize, usize) {
    (
        ((p[1] * h as f64) as usize).min(h - 1),
        ((p[0] * w as f64) as usize).min(w - 1),
    )
}

/// Renders `spec` and derives its annotations.
pub fn synth_scene(spec: &SceneSpec) -> Result<(ImageGrid, TrainingSample)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut img = Tensor::from_fn(&[3, h, w], |i| BACKGROUND[i / (h * w)]);
    let mut paint = |r: usize, c: usize, color: [f64; 3]| {
        for (ch, v) in color.into_iter().enumerate() {
            img.data_mut()[(ch * h + r) * w + c] = v;
        }
    };
    for e in &spec.entities {
        for r in e.rows.clone() {
            for c in e.cols.clone() {
                paint(r, c, e.color);
            }
        }
        if let Some([left, right]) = e.face {
            let mid = e.cols.start + e.cols.len() / 2;
            for r in e.face_rows() {
                for c in e.cols.clone() {
                    paint(r, c, if c < mid { left } else { right });
                }
            }
        }
        for &(r, c) in &e.keypoints {
            paint(e.rows.start + r, e.cols.start + c, KEYPOINT_BEACON);
        }
    }
    let gaze_pixel = spec.gaze.as_ref().map(|g| target_pixel(g.target, h, w));
    if let Some((r, c)) = gaze_pixel {
        paint(r, c, GAZE_BEACON);
    }
    let image = ImageGrid::new(img)?;

    let embedder = ToyFaceEmbedder::default();
    let mut subjects = Vec::with_capacity(spec.entities.len());
    for e in &spec.entities {
        let bbox = e.bbox(h, w);
        let mut mask = BinaryMask::empty(h, w);
        for r in e.rows.clone() {
            for c in e.cols.clone() {
                mask.set(r, c, true);
            }
        }
        let face_bbox = e
            .face
            .map(|_| BBox::from_pixels(e.face_rows(), e.cols.clone(), h, w));
        let identity = match face_bbox {
            Some(fb) => {
                let (rows, cols) = fb.pixel_window(h, w);
                let tape = Tape::new();
                let crop = tape.constant(image.tensor().clone()).crop(0..3, rows, cols);
                let v = embedder.embed(crop)?.value();
                Some(IdentityEmbedding::normalized(v.data().to_vec())?)
            }
            None => None,
        };
        let keypoints = (!e.keypoints.is_empty()).then(|| KeypointSet {
            coords: e
                .keypoints
                .iter()
                .map(|&(r, c)| pixel_center(r, c, e.rows.len(), e.cols.len()))
                .collect(),
            visible: vec![true; e.keypoints.len()],
        });
        subjects.push(Subject {
            class_name: e.class_name.clone(),
            bbox,
            mask,
            face_bbox,
            keypoints,
            identity,
        });
    }

    let mut gaze = Vec::new();
    let mut interactions = Vec::new();
    if let (Some(g), Some((r, c))) = (&spec.gaze, gaze_pixel) {
        let head = subjects[g.person].face_bbox.expect("validated person");
        gaze.push(GazeInstance {
            head_bbox: head,
            target: pixel_center(r, c, h, w),
        });
        if let Some(o) = g.object {
            interactions.push(Interaction::new("look_at", &spec.entities[o].class_name));
        }
    }
    let has_person = spec.entities.iter().any(|e| e.face.is_some());
    if has_person {
        for (i, e) in spec.entities.iter().enumerate() {
            let gazed = spec.gaze.as_ref().and_then(|g| g.object) == Some(i);
            if e.face.is_none() && !gazed {
                interactions.push(Interaction::new("next_to", &e.class_name));
            }
        }
    }
    let vocab = toy_vocabulary();
    let known: Vec<Interaction> = interactions
        .into_iter()
        .filter(|i| vocab.id(&i.verb, &i.object).is_some())
        .collect();
    let hoi_labels = labels_for(&known, &vocab)?;

    let names: Vec<&str> = spec.entities.iter().map(|e| e.class_name.as_str()).collect();
    let caption = caption_for(&names);
    let sample = TrainingSample {
        id: spec.id.clone(),
        image: image.clone(),
        caption,
        query: names.join(","),
        subjects,
        gaze,
        interactions: known,
        hoi_labels,
    };
    Ok((image, sample))
}

/// Caption listing the entity classes, e.g. `"a person and a ball"`.
pub fn caption_for(names: &[&str]) -> String {
    if names.is_empty() {
        return "an empty room".into();
    }
    names
        .iter()
        .map(|n| format!("a {n}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Random scene layouts: people with faces and keypoints, distinct objects,
/// and a 1-pixel gap between any two entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub people: usize,
    pub objects: usize,
    /// Person box `(rows, cols)`.
    pub person_size: (usize, usize),
    pub object_size: usize,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            people: 1,
            objects: 2,
            person_size: (7, 5),
            object_size: 4,
        }
    }
}

impl SceneSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, id: &str) -> Result<SceneSpec> {
        let (ph, pw) = self.person_size;
        if ph < 6 || pw < 2 {
            return Err(Error::invalid("person_size", "people need at least 6x2 pixels"));
        }
        if self.objects > OBJECTS.len() {
            return Err(Error::invalid("objects", "more objects than object classes"));
        }
        if self.object_size < 3 {
            return Err(Error::invalid("object_size", "objects need at least 3x3 pixels"));
        }
        for _ in 0..1000 {
            if let Some(spec) = self.try_layout(rng, id) {
                return Ok(spec);
            }
        }
        Err(Error::invalid("scene", "could not place all entities"))
    }

    fn try_layout<R: Rng + ?Sized>(&self, rng: &mut R, id: &str) -> Option<SceneSpec> {
        let (h, w) = (self.height, self.width);
        let mut placed: Vec<(Range<usize>, Range<usize>)> = Vec::new();
        let mut place = |rng: &mut R, eh: usize, ew: usize| {
            if eh > h || ew > w {
                return None;
            }
            let r0 = rng.random_range(0..=h - eh);
            let c0 = rng.random_range(0..=w - ew);
            let (rows, cols) = (r0..r0 + eh, c0..c0 + ew);
            let clear = placed.iter().all(|(pr, pc)| {
                rows.end < pr.start || pr.end < rows.start || cols.end < pc.start || pc.end < cols.start
            });
            clear.then(|| {
                placed.push((rows.clone(), cols.clone()));
                (rows, cols)
            })
        };
        let (ph, pw) = self.person_size;
        let mut entities = Vec::new();
        for _ in 0..self.people {
            let (rows, cols) = place(rng, ph, pw)?;
            let face = [
                *FACE_TONES.choose(rng).expect("non-empty"),
                *FACE_TONES.choose(rng).expect("non-empty"),
            ];
            let keypoints = ToyPoseDetector::quadrants(ph, pw)
                .into_iter()
                .map(|(qr, qc)| {
                    let lo = qr.start.max(FACE_ROWS);
                    (rng.random_range(lo..qr.end), rng.random_range(qc))
                })
                .collect();
            entities.push(SceneEntity::person(rows, cols, face, keypoints));
        }
        let classes: Vec<&(&str, [f64; 3])> = OBJECTS.choose_multiple(rng, self.objects).collect();
        let s = self.object_size;
        for (name, _) in classes {
            let (rows, cols) = place(rng, s, s)?;
            entities.push(SceneEntity::object(name, rows, cols).ok()?);
        }
        let gaze = if self.people > 0 && self.objects > 0 {
            let o = self.people + rng.random_range(0..self.objects);
            let e = &entities[o];
            let r = e.rows.start + rng.random_range(1..s - 1);
            let c = e.cols.start + rng.random_range(1..s - 1);
            Some(SceneGaze {
                person: 0,
                object: Some(o),
                target: pixel_center(r, c, h, w),
            })
        } else {
            None
        };
        Some(SceneSpec {
            id: id.into(),
            height: h,
            width: w,
            entities,
            gaze,
            max_iou: 0.0,
        })
    }
}
