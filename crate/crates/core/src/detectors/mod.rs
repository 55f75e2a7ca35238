//! Frozen detector interfaces and their toy stand-ins.
//!
//! Every adapter consumes tape variables so feedback losses can
//! differentiate through it. Production models (face recognition, gaze
//! following, keypoint and interaction detectors, segmenters) plug in by
//! implementing these traits; the crate ships only the toy implementations
//! in [`toy`], which are deterministic and differentiable everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::BinaryMask;
use crate::tensor::Tensor;

pub mod synth;
pub mod toy;

pub use synth::{synth_scene, SceneEntity, SceneGaze, SceneSampler, SceneSpec};
pub use toy::{
    ToyFaceEmbedder, ToyGazeDetector, ToyHoiDetector, ToyPoseDetector, ToySegmenter,
};

/// Maps a face crop `[3, h, w]` to a unit-norm identity embedding.
pub trait FaceEmbedderAdapter: Send + Sync {
    fn embed<'t>(&self, crop: Var<'t>) -> Result<Var<'t>>;

    /// Minimum cosine similarity for two faces to count as the same person.
    fn match_threshold(&self) -> f64;

    fn differentiable(&self) -> bool {
        true
    }
}

/// Predicted gaze for one head.
#[derive(Debug, Clone, Copy)]
pub struct GazePrediction<'t> {
    /// `[2]` target point `(x, y)`.
    pub target: Var<'t>,
    /// `[2]` unit vector from the head center to the target.
    pub vector: Var<'t>,
}

pub trait GazeAdapter: Send + Sync {
    /// One entry per head box; `None` when the detector has no prediction.
    fn predict<'t>(
        &self,
        image: Var<'t>,
        head_boxes: &[BBox],
    ) -> Result<Vec<Option<GazePrediction<'t>>>>;
}

/// Keypoints of one subject crop, normalized to the crop.
#[derive(Debug, Clone)]
pub struct KeypointPrediction<'t> {
    /// `[K, 2]` coordinates `(x, y)`.
    pub coords: Var<'t>,
    pub visible: Vec<bool>,
}

pub trait PoseAdapter: Send + Sync {
    fn predict<'t>(&self, crop: Var<'t>) -> Result<KeypointPrediction<'t>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiDetection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct HoiPrediction<'t> {
    /// `[num_classes]` logits.
    pub logits: Var<'t>,
    /// Classes whose prediction the detector considers usable.
    pub valid: Vec<bool>,
    pub detections: Vec<HoiDetection>,
}

pub trait HoiAdapter: Send + Sync {
    fn num_classes(&self) -> usize;

    fn predict<'t>(&self, image: Var<'t>) -> Result<HoiPrediction<'t>>;
}

/// Produces binary masks for subject boxes; not differentiated through.
pub trait SegmenterAdapter: Send + Sync {
    fn masks(&self, image: &Tensor, boxes: &[BBox]) -> Result<Vec<BinaryMask>>;
}

/// The five detectors used by training and evaluation.
pub struct DetectorBundle {
    pub face: Box<dyn FaceEmbedderAdapter>,
    pub gaze: Box<dyn GazeAdapter>,
    pub pose: Box<dyn PoseAdapter>,
    pub hoi: Box<dyn HoiAdapter>,
    pub segmenter: Box<dyn SegmenterAdapter>,
}

impl DetectorBundle {
    pub fn toy(config: &AdapterRegistry) -> Self {
        Self {
            face: Box::new(ToyFaceEmbedder::default()),
            gaze: Box::new(ToyGazeDetector::new(config.temperature)),
            pose: Box::new(ToyPoseDetector::new(config.temperature)),
            hoi: Box::new(ToyHoiDetector::new(
                config.hoi_classes,
                config.hoi_seed,
                config.hoi_noise_gate,
            )),
            segmenter: Box::new(ToySegmenter::default()),
        }
    }
}

/// Names of production models that are interface-only in this crate.
pub const EXTERNAL_ADAPTERS: [&str; 5] = ["arcface", "sharingan", "xpose", "cmmp", "sam"];

/// Detector selection and toy-detector settings, as read from a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterRegistry {
    /// Adapter name per role: `face`, `gaze`, `pose`, `hoi`, `segmenter`.
    pub adapters: BTreeMap<String, String>,
    /// Soft-argmax temperature of the toy gaze and pose detectors.
    pub temperature: f64,
    pub hoi_classes: usize,
    pub hoi_seed: u64,
    /// Pixel-variance threshold above which the toy interaction detector
    /// marks every class invalid.
    pub hoi_noise_gate: f64,
    /// Face crop side expected by a production face embedder.
    pub face_input_size: usize,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        Self {
            adapters: ["face", "gaze", "pose", "hoi", "segmenter"]
                .into_iter()
                .map(|r| (r.to_string(), "toy".to_string()))
                .collect(),
            temperature: toy::DEFAULT_TEMPERATURE,
            hoi_classes: 8,
            hoi_seed: 7,
            hoi_noise_gate: 0.1,
            face_input_size: 112,
        }
    }
}

impl AdapterRegistry {
    /// Builds the configured detectors. Only toy adapters are bundled.
    pub fn build(&self) -> Result<DetectorBundle> {
        for role in ["face", "gaze", "pose", "hoi", "segmenter"] {
            let name = self.adapters.get(role).map(String::as_str).unwrap_or("toy");
            match name {
                "toy" => {}
                n if EXTERNAL_ADAPTERS.contains(&n) => {
                    return Err(Error::Adapter {
                        name: n.to_string(),
                        reason: format!(
                            "external model for role `{role}` is not bundled; implement the \
                             adapter trait and register it programmatically"
                        ),
                    })
                }
                n => {
                    return Err(Error::Adapter {
                        name: n.to_string(),
                        reason: format!("unknown adapter for role `{role}`"),
                    })
                }
            }
        }
        if let Some(role) = self
            .adapters
            .keys()
            .find(|r| !["face", "gaze", "pose", "hoi", "segmenter"].contains(&r.as_str()))
        {
            return Err(Error::Config(format!("unknown adapter role `{role}`")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.hoi_classes == 0 {
            return Err(Error::Config("hoi_classes must be positive".into()));
        }
        Ok(DetectorBundle::toy(self))
    }
}
