//! Line-delimited JSON manifests.
//!
//! One record per line. File paths are relative to the manifest's directory
//! unless absolute. Boxes are `[x_min, y_min, x_max, y_max]` normalized to the
//! original image.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::io::{read_embedding, read_image, read_mask, write_embedding, write_image, write_mask};
use super::{labels_for, Interaction, Subject, TrainingSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{GazeInstance, HoiVocabulary, KeypointSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub class_name: String,
    pub bbox: BBox,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<KeypointSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub id: String,
    pub image: PathBuf,
    pub caption: String,
    pub query: String,
    #[serde(default)]
    pub subjects: Vec<SubjectRecord>,
    #[serde(default)]
    pub gaze: Vec<GazeInstance>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
}

fn schema(location: &str, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Schema {
        location: location.into(),
        field: field.into(),
        reason: reason.into(),
    }
}

/// Checks every box of a raw record so errors can name the exact field.
fn check_boxes(record: &Value, location: &str) -> Result<()> {
    let check = |v: &Value, path: String| -> Result<()> {
        let Some(arr) = v.as_array() else {
            return Err(schema(location, path, "expected [x_min, y_min, x_max, y_max]"));
        };
        let nums: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
        if nums.len() != 4 || arr.len() != 4 {
            return Err(schema(location, path, "expected 4 numbers"));
        }
        BBox::new(nums[0], nums[1], nums[2], nums[3]).map(|_| ()).map_err(|e| match e {
            Error::Schema { field, reason, .. } => schema(location, format!("{path}.{field}"), reason),
            e => e,
        })
    };
    if let Some(subjects) = record.get("subjects").and_then(Value::as_array) {
        for (i, s) in subjects.iter().enumerate() {
            if let Some(b) = s.get("bbox") {
                check(b, format!("subjects[{i}].bbox"))?;
            }
            if let Some(b) = s.get("face_bbox").filter(|b| !b.is_null()) {
                check(b, format!("subjects[{i}].face_bbox"))?;
            }
        }
    }
    if let Some(gaze) = record.get("gaze").and_then(Value::as_array) {
        for (i, g) in gaze.iter().enumerate() {
            if let Some(b) = g.get("head_bbox") {
                check(b, format!("gaze[{i}].head_bbox"))?;
            }
        }
    }
    Ok(())
}

impl SampleManifest {
    /// Semantic checks that do not touch the filesystem.
    pub fn validate(&self, location: &str, vocab: Option<&HoiVocabulary>) -> Result<()> {
        for (i, s) in self.subjects.iter().enumerate() {
            if let Some(k) = &s.keypoints {
                k.validate()
                    .map_err(|e| schema(location, format!("subjects[{i}].keypoints"), e.to_string()))?;
            }
        }
        for (i, g) in self.gaze.iter().enumerate() {
            if !g.target.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(schema(location, format!("gaze[{i}].target"), "outside [0, 1]"));
            }
        }
        if let Some(vocab) = vocab {
            for (i, it) in self.interactions.iter().enumerate() {
                if vocab.id(&it.verb, &it.object).is_none() {
                    return Err(schema(
                        location,
                        format!("interactions[{i}]"),
                        format!("unknown interaction ({}, {})", it.verb, it.object),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every file the record refers to, resolved against `base`.
    pub fn files(&self, base: &Path) -> Vec<PathBuf> {
        let mut out = vec![base.join(&self.image)];
        for s in &self.subjects {
            out.push(base.join(&s.mask));
            if let Some(e) = &s.embedding {
                out.push(base.join(e));
            }
        }
        out
    }

    /// Reads the referenced files into an in-memory sample.
    pub fn load(&self, base: &Path, vocab: &HoiVocabulary) -> Result<TrainingSample> {
        let image = read_image(&base.join(&self.image))?;
        let mut subjects = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            let mask = read_mask(&base.join(&s.mask))?;
            if (mask.height(), mask.width()) != (image.height(), image.width()) {
                return Err(Error::Shape {
                    expected: vec![image.height(), image.width()],
                    actual: vec![mask.height(), mask.width()],
                });
            }
            let identity = s
                .embedding
                .as_ref()
                .map(|p| read_embedding(&base.join(p)))
                .transpose()?;
            subjects.push(Subject {
                class_name: s.class_name.clone(),
                bbox: s.bbox,
                mask,
                face_bbox: s.face_bbox,
                keypoints: s.keypoints.clone(),
                identity,
            });
        }
        Ok(TrainingSample {
            id: self.id.clone(),
            image,
            caption: self.caption.clone(),
            query: self.query.clone(),
            subjects,
            gaze: self.gaze.clone(),
            hoi_labels: labels_for(&self.interactions, vocab)?,
            interactions: self.interactions.clone(),
        })
    }

    /// Writes the sample's image, masks and embeddings under `dir` and
    /// returns the record pointing at them (paths relative to `dir`).
    pub fn save(sample: &TrainingSample, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let image = PathBuf::from(format!("{}.png", sample.id));
        write_image(&dir.join(&image), &sample.image)?;
        let mut subjects = Vec::new();
        for (i, s) in sample.subjects.iter().enumerate() {
            let mask = PathBuf::from(format!("{}_mask{i}.png", sample.id));
            write_mask(&dir.join(&mask), &s.mask)?;
            let embedding = match &s.identity {
                Some(e) => {
                    let p = PathBuf::from(format!("{}_face{i}.emb", sample.id));
                    write_embedding(&dir.join(&p), e)?;
                    Some(p)
                }
                None => None,
            };
            subjects.push(SubjectRecord {
                class_name: s.class_name.clone(),
                bbox: s.bbox,
                mask,
                face_bbox: s.face_bbox,
                keypoints: s.keypoints.clone(),
                embedding,
            });
        }
        Ok(Self {
            id: sample.id.clone(),
            image,
            caption: sample.caption.clone(),
            query: sample.query.clone(),
            subjects,
            gaze: sample.gaze.clone(),
            interactions: sample.interactions.clone(),
        })
    }
}

/// Parses and validates a manifest. Errors carry `file:line` and the field.
/// Referenced files must exist.
pub fn load_manifest(path: &Path, vocab: Option<&HoiVocabulary>) -> Result<Vec<SampleManifest>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", path.display(), n + 1);
        let value: Value =
            serde_json::from_str(line).map_err(|e| schema(&location, "record", e.to_string()))?;
        check_boxes(&value, &location)?;
        let record: SampleManifest =
            serde_json::from_value(value).map_err(|e| schema(&location, "record", e.to_string()))?;
        record.validate(&location, vocab)?;
        for f in record.files(base) {
            if !f.is_file() {
                return Err(Error::MissingFile(f));
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleManifest]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a manifest and every sample it references.
pub fn load_dataset(path: &Path, vocab: &HoiVocabulary) -> Result<Vec<TrainingSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    load_manifest(path, Some(vocab))?
        .iter()
        .map(|r| r.load(base, vocab))
        .collect()
}
