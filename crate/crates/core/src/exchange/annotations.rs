//! Pseudo-annotation sets: `annotations.json` plus one u8 mask tensor per entry.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{read_json, write_json};
use super::tensor::{read_tensor, write_tensor, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::types::BinaryMask;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Which pseudo-labelling route produced an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Point-prompted mask for a detected class.
    #[serde(rename = "1.1")]
    PointPrompt,
    /// Automatic mask labelled by its mean feature.
    #[serde(rename = "1.2")]
    AutoMask,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PointPrompt => "1.1",
            Stage::AutoMask => "1.2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAnnotation {
    pub image_id: String,
    pub class_id: u32,
    pub mask: BinaryMask,
    pub confidence: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub annotations: Vec<PseudoAnnotation>,
}

impl AnnotationSet {
    pub fn new(annotations: Vec<PseudoAnnotation>) -> Self {
        Self { annotations }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn for_image<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a PseudoAnnotation> + 'a {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    pub fn count_stage(&self, stage: Stage) -> usize {
        self.annotations.iter().filter(|a| a.stage == stage).count()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationEntry {
    image_id: String,
    class_id: u32,
    mask: String,
    confidence: f64,
    stage: Stage,
}

/// Writes `dir/annotations.json` and `dir/masks/NNNNNN.fmsg`, replacing any
/// previous set in `dir`.
pub fn write_annotation_set(dir: &Path, set: &AnnotationSet, num_classes: usize) -> Result<()> {
    let masks_dir = dir.join("masks");
    if masks_dir.exists() {
        std::fs::remove_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let mut entries = Vec::with_capacity(set.len());
    for (i, a) in set.annotations.iter().enumerate() {
        validate(a, num_classes)?;
        let rel = format!("masks/{i:06}.fmsg");
        let t = TensorFile::u8(
            vec![a.mask.height() as u32, a.mask.width() as u32],
            a.mask.data().to_vec(),
        )?;
        write_tensor(dir.join(&rel), &t)?;
        entries.push(AnnotationEntry {
            image_id: a.image_id.clone(),
            class_id: a.class_id,
            mask: rel,
            confidence: a.confidence,
            stage: a.stage,
        });
    }
    write_json(&dir.join(ANNOTATIONS_FILE), &AnnotationFile { annotations: entries })
}

pub fn read_annotation_set(dir: &Path, num_classes: usize) -> Result<AnnotationSet> {
    let file: AnnotationFile = read_json(&dir.join(ANNOTATIONS_FILE))?;
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for (i, e) in file.annotations.into_iter().enumerate() {
        let t = read_tensor(dir.join(&e.mask))?;
        let dims = t.dims_usize();
        let TensorData::U8(bytes) = t.data else {
            return Err(Error::validation(format!("annotation {i}: mask must be u8")));
        };
        if dims.len() != 2 {
            return Err(Error::validation(format!("annotation {i}: mask dims {dims:?}")));
        }
        let mask = BinaryMask::from_vec(dims[0], dims[1], bytes).map_err(|err| match err {
            Error::Validation(v) => Error::Validation(v.into_iter().map(|m| format!("annotation {i}: {m}")).collect()),
            other => other,
        })?;
        let a = PseudoAnnotation {
            image_id: e.image_id,
            class_id: e.class_id,
            mask,
            confidence: e.confidence,
            stage: e.stage,
        };
        validate(&a, num_classes).map_err(|err| Error::validation(format!("annotation {i}: {err}")))?;
        annotations.push(a);
    }
    Ok(AnnotationSet { annotations })
}

fn validate(a: &PseudoAnnotation, num_classes: usize) -> Result<()> {
    if a.class_id as usize >= num_classes {
        return Err(Error::validation(format!(
            "class_id {} >= number of classes {num_classes}",
            a.class_id
        )));
    }
    if !(0.0..=1.0).contains(&a.confidence) {
        return Err(Error::validation(format!("confidence {} outside [0, 1]", a.confidence)));
    }
    Ok(())
}
