//! Samples, manifests, preprocessing and annotation assembly.

use serde::{Deserialize, Serialize};

use crate::diffusion::ImageGrid;
use crate::error::Result;
use crate::geometry::BBox;
use crate::losses::{
    morphological_gradient, BinaryMask, BoundaryMap, GazeInstance, HoiLabelSet, HoiVocabulary,
    IdentityEmbedding, KeypointSet,
};

pub mod annotate;
pub mod io;
pub mod manifest;
pub mod preprocess;

pub use annotate::{annotation_builder, ExtractorBundle, ToyExtractors};
pub use manifest::{load_dataset, load_manifest, write_manifest, SampleManifest, SubjectRecord};
pub use preprocess::{preprocess, AffineMap, CropPolicy, DropCounts, PreprocessSpec};

/// A `(verb, object)` interaction label with an implicit human subject.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub verb: String,
    pub object: String,
}

impl Interaction {
    pub fn new(verb: &str, object: &str) -> Self {
        Self {
            verb: verb.into(),
            object: object.into(),
        }
    }
}

/// One reference subject with everything the feedback losses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub class_name: String,
    pub bbox: BBox,
    pub mask: BinaryMask,
    pub face_bbox: Option<BBox>,
    /// Keypoints normalized to `bbox`.
    pub keypoints: Option<KeypointSet>,
    pub identity: Option<IdentityEmbedding>,
}

/// An in-memory training example: image plus annotations, all in
/// coordinates normalized to `image`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub id: String,
    pub image: ImageGrid,
    pub caption: String,
    /// Comma-separated class names of the reference subjects.
    pub query: String,
    pub subjects: Vec<Subject>,
    pub gaze: Vec<GazeInstance>,
    pub interactions: Vec<Interaction>,
    pub hoi_labels: HoiLabelSet,
}

impl TrainingSample {
    /// Union of all subject masks.
    pub fn foreground(&self) -> BinaryMask {
        let mut m = BinaryMask::empty(self.image.height(), self.image.width());
        for s in &self.subjects {
            if let Ok(u) = m.union(&s.mask) {
                m = u;
            }
        }
        m
    }

    /// Boundary band of the foreground with a 3×3 structuring element.
    pub fn boundary(&self) -> BoundaryMap {
        morphological_gradient(&self.foreground(), 3).expect("odd kernel")
    }

    pub fn face_boxes(&self) -> Vec<BBox> {
        self.subjects.iter().filter_map(|s| s.face_bbox).collect()
    }

    /// Face boxes paired with their precomputed reference embeddings.
    pub fn faces_with_identity(&self) -> (Vec<BBox>, Vec<IdentityEmbedding>) {
        self.subjects
            .iter()
            .filter_map(|s| Some((s.face_bbox?, s.identity.clone()?)))
            .unzip()
    }

    /// Boxes of subjects carrying keypoint annotations.
    pub fn pose_boxes(&self) -> Vec<BBox> {
        self.subjects
            .iter()
            .filter(|s| s.keypoints.is_some())
            .map(|s| s.bbox)
            .collect()
    }

    /// Recomputes `hoi_labels` from `interactions`.
    pub fn label_interactions(&mut self, vocab: &HoiVocabulary) -> Result<()> {
        self.hoi_labels = labels_for(&self.interactions, vocab)?;
        Ok(())
    }
}

pub(crate) fn labels_for(interactions: &[Interaction], vocab: &HoiVocabulary) -> Result<HoiLabelSet> {
    interactions
        .iter()
        .map(|i| {
            vocab.id(&i.verb, &i.object).ok_or_else(|| crate::error::Error::Schema {
                location: "interactions".into(),
                field: "verb/object".into(),
                reason: format!("unknown interaction ({}, {})", i.verb, i.object),
            })
        })
        .collect::<Result<_>>()
        .map(HoiLabelSet)
}
