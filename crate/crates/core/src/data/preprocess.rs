//! Shortest-side resize plus square crop, with annotations carried along.

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, Rgb32FImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Subject, TrainingSample};
use crate::diffusion::ImageGrid;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::losses::{BinaryMask, GazeInstance, KeypointSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropPolicy {
    Random,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    /// Side of the square training crop; the shortest image side is resized
    /// to this first.
    pub target_side: usize,
    pub crop: CropPolicy,
    /// Side of the square conditioning input.
    pub condition_side: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_side: 512,
            crop: CropPolicy::Random,
            condition_side: 224,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_side == 0 || self.condition_side == 0 {
            return Err(Error::Config("preprocess sides must be positive".into()));
        }
        Ok(())
    }
}

/// Per-axis map `x' = sx·x + tx` between normalized coordinate frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        sx: 1.0,
        tx: 0.0,
        sy: 1.0,
        ty: 0.0,
    };

    pub fn apply(&self, p: Point) -> Point {
        [self.sx * p[0] + self.tx, self.sy * p[1] + self.ty]
    }

    pub fn inverse(&self) -> AffineMap {
        AffineMap {
            sx: 1.0 / self.sx,
            tx: -self.tx / self.sx,
            sy: 1.0 / self.sy,
            ty: -self.ty / self.sy,
        }
    }

    /// Maps a box and clips it to the unit square; `None` when nothing is
    /// left.
    pub fn apply_box(&self, b: &BBox) -> Option<BBox> {
        let [x0, y0] = self.apply([b.x_min, b.y_min]);
        let [x1, y1] = self.apply([b.x_max, b.y_max]);
        let clipped = BBox {
            x_min: x0.clamp(0.0, 1.0),
            y_min: y0.clamp(0.0, 1.0),
            x_max: x1.clamp(0.0, 1.0),
            y_max: y1.clamp(0.0, 1.0),
        };
        (clipped.x_min < clipped.x_max && clipped.y_min < clipped.y_max).then_some(clipped)
    }
}

/// Annotations removed because the crop cut them away.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub subjects: usize,
    pub faces: usize,
    pub keypoints: usize,
    pub gaze: usize,
}

impl DropCounts {
    pub fn add(&mut self, other: &DropCounts) {
        self.subjects += other.subjects;
        self.faces += other.faces;
        self.keypoints += other.keypoints;
        self.gaze += other.gaze;
    }
}

fn inside(p: Point) -> bool {
    (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
}

fn to_rgb32f(image: &ImageGrid) -> Rgb32FImage {
    let (h, w) = (image.height(), image.width());
    let d = image.tensor().data();
    Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| d[(c * h + y) * w + x] as f32))
    })
}

fn from_rgb32f(img: &Rgb32FImage) -> Result<ImageGrid> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageGrid::clamped(Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.get_pixel(x as u32, y as u32)[c] as f64
    }))
}

/// Bilinear resize to `h × w`; a same-size resize is the identity.
pub fn resize_image(image: &ImageGrid, h: usize, w: usize) -> Result<ImageGrid> {
    if (image.height(), image.width()) == (h, w) {
        return Ok(image.clone());
    }
    let out = imageops::resize(&to_rgb32f(image), w as u32, h as u32, FilterType::Triangle);
    from_rgb32f(&out)
}

fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    if (mask.height(), mask.width()) == (h, w) {
        return mask.clone();
    }
    let g = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let r = imageops::resize(&g, w as u32, h as u32, FilterType::Nearest);
    BinaryMask::new(h, w, r.pixels().map(|p| p[0] != 0).collect()).expect("sized buffer")
}

fn crop_mask(mask: &BinaryMask, y0: usize, x0: usize, side: usize) -> BinaryMask {
    let mut out = BinaryMask::empty(side, side);
    for y in 0..side {
        for x in 0..side {
            out.set(y, x, mask.get(y0 + y, x0 + x));
        }
    }
    out
}

fn crop_image(image: &ImageGrid, y0: usize, x0: usize, side: usize) -> Result<ImageGrid> {
    let (h, w) = (image.height(), image.width());
    let d = image.tensor().data();
    ImageGrid::new(Tensor::from_fn(&[3, side, side], |i| {
        let (c, y, x) = (i / (side * side), (i / side) % side, i % side);
        d[(c * h + y0 + y) * w + x0 + x]
    }))
}

/// Re-expresses box-relative keypoints after their box moved from `old` to
/// `new` (both in the output frame before and after clipping).
fn remap_keypoints(k: &KeypointSet, old: &BBox, new: &BBox, drops: &mut usize) -> KeypointSet {
    let mut out = k.clone();
    for (i, p) in k.coords.iter().enumerate() {
        let abs = [
            old.x_min + p[0] * old.width(),
            old.y_min + p[1] * old.height(),
        ];
        let q = [
            (abs[0] - new.x_min) / new.width(),
            (abs[1] - new.y_min) / new.height(),
        ];
        out.coords[i] = q;
        if k.visible[i] && !inside(q) {
            out.visible[i] = false;
            *drops += 1;
        }
    }
    out
}

/// Resizes the shortest side to `spec.target_side`, takes a square crop and
/// maps every annotation into crop coordinates.
pub fn preprocess<R: Rng + ?Sized>(
    sample: &TrainingSample,
    spec: &PreprocessSpec,
    rng: &mut R,
) -> Result<(TrainingSample, AffineMap, DropCounts)> {
    spec.validate()?;
    let (h, w) = (sample.image.height(), sample.image.width());
    let side = spec.target_side;
    let scale = side as f64 / h.min(w) as f64;
    let (rh, rw) = if h <= w {
        (side, ((w as f64 * scale).round() as usize).max(side))
    } else {
        (((h as f64 * scale).round() as usize).max(side), side)
    };
    if rh < side || rw < side {
        return Err(Error::invalid("image", "resized image smaller than the crop"));
    }
    let (y0, x0) = match spec.crop {
        CropPolicy::Center => ((rh - side) / 2, (rw - side) / 2),
        CropPolicy::Random => (rng.random_range(0..=rh - side), rng.random_range(0..=rw - side)),
    };
    let map = AffineMap {
        sx: rw as f64 / side as f64,
        tx: -(x0 as f64) / side as f64,
        sy: rh as f64 / side as f64,
        ty: -(y0 as f64) / side as f64,
    };

    let image = crop_image(&resize_image(&sample.image, rh, rw)?, y0, x0, side)?;
    let mut drops = DropCounts::default();
    let mut subjects = Vec::new();
    for s in &sample.subjects {
        let Some(bbox) = map.apply_box(&s.bbox) else {
            drops.subjects += 1;
            continue;
        };
        let unclipped = BBox {
            x_min: map.apply([s.bbox.x_min, 0.0])[0],
            y_min: map.apply([0.0, s.bbox.y_min])[1],
            x_max: map.apply([s.bbox.x_max, 0.0])[0],
            y_max: map.apply([0.0, s.bbox.y_max])[1],
        };
        let face_bbox = match s.face_bbox {
            Some(f) => {
                let m = map.apply_box(&f);
                drops.faces += m.is_none() as usize;
                m
            }
            None => None,
        };
        let keypoints = s
            .keypoints
            .as_ref()
            .map(|k| remap_keypoints(k, &unclipped, &bbox, &mut drops.keypoints));
        subjects.push(Subject {
            class_name: s.class_name.clone(),
            bbox,
            mask: crop_mask(&resize_mask(&s.mask, rh, rw), y0, x0, side),
            face_bbox,
            keypoints,
            identity: if face_bbox.is_some() { s.identity.clone() } else { None },
        });
    }
    let mut gaze = Vec::new();
    for g in &sample.gaze {
        let target = map.apply(g.target);
        let center = map.apply(g.head_center());
        match map.apply_box(&g.head_bbox) {
            Some(head) if inside(target) && inside(center) => gaze.push(GazeInstance {
                head_bbox: head,
                target,
            }),
            _ => drops.gaze += 1,
        }
    }
    let out = TrainingSample {
        id: sample.id.clone(),
        image,
        caption: sample.caption.clone(),
        query: sample.query.clone(),
        subjects,
        gaze,
        interactions: sample.interactions.clone(),
        hoi_labels: sample.hoi_labels.clone(),
    };
    Ok((out, map, drops))
}

/// The conditioning input: the processed image resized to a square.
pub fn conditioning_image(sample: &TrainingSample, spec: &PreprocessSpec) -> Result<ImageGrid> {
    resize_image(&sample.image, spec.condition_side, spec.condition_side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::HoiLabelSet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blank(h: usize, w: usize) -> TrainingSample {
        TrainingSample {
            id: "x".into(),
            image: ImageGrid::new(Tensor::from_fn(&[3, h, w], |i| (i % 13) as f64 / 13.0)).unwrap(),
            caption: String::new(),
            query: String::new(),
            subjects: Vec::new(),
            gaze: Vec::new(),
            interactions: Vec::new(),
            hoi_labels: HoiLabelSet::default(),
        }
    }

    fn center(side: usize) -> PreprocessSpec {
        PreprocessSpec {
            target_side: side,
            crop: CropPolicy::Center,
            condition_side: 8,
        }
    }

    #[test]
    fn square_center_crop_is_identity() {
        let mut s = blank(16, 16);
        s.gaze.push(GazeInstance {
            head_bbox: BBox::new(0.1, 0.1, 0.3, 0.2).unwrap(),
            target: [0.7, 0.9],
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, map, drops) = preprocess(&s, &center(16), &mut rng).unwrap();
        assert_eq!(map, AffineMap::IDENTITY);
        assert_eq!(out.gaze, s.gaze);
        assert_eq!(out.image, s.image);
        assert_eq!(drops, DropCounts::default());
    }

    #[test]
    fn wide_image_crop_offset_maps_points() {
        // 1024×512 with the crop starting at column 256: x = 0.75 → 1.0.
        let map = AffineMap {
            sx: 1024.0 / 512.0,
            tx: -256.0 / 512.0,
            sy: 1.0,
            ty: 0.0,
        };
        assert_eq!(map.apply([0.75, 0.3]), [1.0, 0.3]);
        // Same geometry at 1/32 scale through the full pipeline.
        let s = blank(16, 32);
        let (out, map, _) = preprocess(&s, &center(16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((map.sx, map.tx), (2.0, -0.5));
        assert_eq!(map.apply([0.75, 0.0])[0], 1.0);
        assert_eq!(out.image.width(), 16);
        // Pixel column 8 of the crop is column 16 of the original.
        assert_eq!(out.image.tensor().data()[8], s.image.tensor().data()[16]);
    }

    #[test]
    fn cropped_out_gaze_is_dropped() {
        let mut s = blank(16, 32);
        s.gaze.push(GazeInstance {
            head_bbox: BBox::new(0.4, 0.1, 0.5, 0.2).unwrap(),
            target: [0.95, 0.5],
        });
        let (out, _, drops) = preprocess(&s, &center(16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.gaze.is_empty());
        assert_eq!(drops.gaze, 1);
    }

    #[test]
    fn partial_subject_box_is_clipped() {
        let mut s = blank(16, 32);
        let b = BBox::new(0.1, 0.2, 0.4, 0.6).unwrap();
        s.subjects.push(Subject {
            class_name: "person".into(),
            bbox: b,
            mask: BinaryMask::from_box(&b, 16, 32),
            face_bbox: Some(BBox::new(0.1, 0.2, 0.2, 0.3).unwrap()),
            keypoints: Some(KeypointSet {
                coords: vec![[0.1, 0.5], [0.9, 0.5]],
                visible: vec![true, true],
            }),
            identity: None,
        });
        let (out, _, drops) = preprocess(&s, &center(16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let sub = &out.subjects[0];
        assert_eq!(sub.bbox.x_min, 0.0);
        assert!((sub.bbox.x_max - 0.3).abs() < 1e-12);
        assert_eq!(sub.face_bbox, None);
        assert_eq!(drops.faces, 1);
        assert_eq!(sub.keypoints.as_ref().unwrap().visible, vec![false, true]);
        assert_eq!(drops.keypoints, 1);
    }

    #[test]
    fn random_crop_is_seed_deterministic() {
        let s = blank(12, 40);
        let spec = PreprocessSpec {
            crop: CropPolicy::Random,
            ..center(12)
        };
        let run = |seed| {
            let (o, m, _) = preprocess(&s, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            (serde_json::to_vec(&o).unwrap(), m)
        };
        assert_eq!(run(4), run(4));
    }

    proptest! {
        #[test]
        fn inverse_restores_coordinates(
            h in 8usize..40, w in 8usize..40, side in 4usize..8, seed in any::<u64>(),
            x in 0.0f64..1.0, y in 0.0f64..1.0,
        ) {
            let s = blank(h, w);
            let spec = PreprocessSpec { target_side: side, crop: CropPolicy::Random, condition_side: 4 };
            let (_, map, _) = preprocess(&s, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let back = map.inverse().apply(map.apply([x, y]));
            prop_assert!((back[0] - x).abs() < 1e-6 && (back[1] - y).abs() < 1e-6);
        }

        #[test]
        fn masks_stay_within_expanded_boxes(seed in any::<u64>(), r0 in 0usize..10, c0 in 0usize..20) {
            let mut s = blank(20, 30);
            let b = BBox::from_pixels(r0..r0 + 8, c0..c0 + 6, 20, 30);
            s.subjects.push(Subject {
                class_name: "box".into(), bbox: b, mask: BinaryMask::from_box(&b, 20, 30),
                face_bbox: None, keypoints: None, identity: None,
            });
            let spec = PreprocessSpec { target_side: 13, crop: CropPolicy::Random, condition_side: 4 };
            let (out, _, _) = preprocess(&s, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for sub in &out.subjects {
                if let Some((rows, cols)) = sub.mask.bounds() {
                    let n = 13.0;
                    prop_assert!(rows.start as f64 >= sub.bbox.y_min * n - 2.0);
                    prop_assert!(rows.end as f64 <= sub.bbox.y_max * n + 2.0);
                    prop_assert!(cols.start as f64 >= sub.bbox.x_min * n - 2.0);
                    prop_assert!(cols.end as f64 <= sub.bbox.x_max * n + 2.0);
                }
            }
        }
    }
}
