//! Dataset layout: `manifest.json`, `vocab.json` and the tensors they point at.
//!
//! ```text
//! dataset_root/
//!   manifest.json
//!   vocab.json
//!   tensors/<image_id>/{crop_<r>_<c>,cls,grid,vision}.fmsg
//!   masks/<image_id>/{auto,points_<class>,gt}.fmsg
//! ```
//!
//! All paths inside JSON files are relative to the dataset root. Loaders
//! check every declared shape and report all violations at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{f32_tensor, read_tensor, write_tensor, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::numerics::{Tensor2D, Tensor3D};
use crate::types::{check_unit_rows, BinaryMask, MaskProposal, SegmentationMap, TextPrototypeSet, IGNORE_INDEX};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const FORMAT_VERSION: u32 = 1;

/// Stored vectors are f32; this is the norm slack accepted on load before
/// re-normalizing in f64.
const STORED_UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub vocab: String,
    pub images: Vec<ImageRecord>,
}

/// Pixel coordinate `[x, y]` in mask space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPoint(pub u32, pub u32);

impl PixelPoint {
    pub fn x(self) -> u32 {
        self.0
    }

    pub fn y(self) -> u32 {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMaskEntry {
    pub class_id: u32,
    pub points: Vec<PixelPoint>,
    /// `3 × H × W` u8 tensor.
    pub masks: String,
    pub confidences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoMaskEntry {
    /// `M × H × W` u8 tensor.
    pub masks: String,
    pub confidences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    /// Mask / ground-truth resolution `[H, W]`.
    pub pixel_size: [u32; 2],
    /// Resolution the crop grid was cut from, `[H, W]`.
    pub source_size: [u32; 2],
    /// Side length of one image-text patch in source pixels.
    pub patch_px: u32,
    pub crop_grid: [u32; 2],
    pub patch_grid: [u32; 2],
    /// One `h × w × D` f32 tensor per crop, row-major over the crop grid.
    pub crop_features: Vec<String>,
    /// `C × D` f32.
    pub cls_tokens: String,
    /// Optional precomputed `H_p × W_p × D` mosaic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_grid: Option<String>,
    pub vision_grid: [u32; 2],
    /// `H_v × W_v × D_in` f32 features of the encoder being aligned.
    pub vision_features: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub point_masks: Vec<PointMaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_masks: Option<AutoMaskEntry>,
    /// `H × W` u8 or i32 labels; 255 = ignore.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_level_labels: Option<Vec<u32>>,
}

impl ImageRecord {
    pub fn pixel_hw(&self) -> (usize, usize) {
        (self.pixel_size[0] as usize, self.pixel_size[1] as usize)
    }

    pub fn patch_hw(&self) -> (usize, usize) {
        (self.patch_grid[0] as usize, self.patch_grid[1] as usize)
    }

    pub fn vision_hw(&self) -> (usize, usize) {
        (self.vision_grid[0] as usize, self.vision_grid[1] as usize)
    }

    pub fn crop_count(&self) -> usize {
        (self.crop_grid[0] * self.crop_grid[1]) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyFile {
    pub class_names: Vec<String>,
    /// `K × D` f32.
    pub prototypes: String,
    pub template: String,
}

/// Point-prompt masks precomputed for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMaskSet {
    pub class_id: u32,
    pub points: Vec<PixelPoint>,
    pub proposals: Vec<MaskProposal>,
}

/// Everything a record references, loaded and shape-checked.
#[derive(Debug, Clone)]
pub struct ImageBundle {
    pub record: ImageRecord,
    pub crop_features: Vec<Tensor3D>,
    pub cls_tokens: Tensor2D,
    pub feature_grid: Option<Tensor3D>,
    pub vision_features: Tensor3D,
    pub point_masks: Vec<PointMaskSet>,
    pub auto_masks: Option<Vec<MaskProposal>>,
    pub ground_truth: Option<SegmentationMap>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "manifest format_version {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for r in &m.images {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::validation(format!("duplicate image_id {:?}", r.image_id)));
        }
    }
    Ok(m)
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_json(&root.join(MANIFEST_FILE), manifest)
}

pub fn load_vocabulary(root: &Path, vocab_path: &str) -> Result<TextPrototypeSet> {
    let vf: VocabularyFile = read_json(&root.join(vocab_path))?;
    if vf.class_names.is_empty() {
        return Err(Error::validation("vocabulary has no classes"));
    }
    let t = read_tensor(root.join(&vf.prototypes))?;
    let dims = t.dims_usize();
    if dims.len() != 2 || dims[0] != vf.class_names.len() {
        return Err(Error::validation(format!(
            "prototypes: dims {dims:?} do not match {} class names",
            vf.class_names.len()
        )));
    }
    let values = t.to_f64()?;
    check_unit_rows(&values, dims[1], STORED_UNIT_TOL).map_err(|m| Error::validation(format!("prototypes: {m}")))?;
    let protos = crate::numerics::l2_normalize_rows(&Tensor2D::from_vec(dims[0], dims[1], values)?)?;
    TextPrototypeSet::new(vf.class_names, protos, vf.template)
}

pub fn write_vocabulary(root: &Path, vocab: &TextPrototypeSet) -> Result<()> {
    let rel = "tensors/prototypes.fmsg";
    let (k, d) = vocab.prototypes.shape();
    write_tensor(
        root.join(rel),
        &f32_tensor(vec![k as u32, d as u32], vocab.prototypes.data())?,
    )?;
    write_json(
        &root.join(VOCAB_FILE),
        &VocabularyFile {
            class_names: vocab.names.clone(),
            prototypes: rel.into(),
            template: vocab.template.clone(),
        },
    )
}

/// Collects violations so a broken record reports every bad field at once.
struct Checker {
    image_id: String,
    problems: Vec<String>,
}

impl Checker {
    fn fail(&mut self, field: &str, msg: impl std::fmt::Display) {
        self.problems.push(format!("{}.{field}: {msg}", self.image_id));
    }

    fn finish(self) -> Result<()> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self.problems))
        }
    }
}

fn read_or_missing(root: &Path, rel: &str) -> Result<TensorFile> {
    read_tensor(root.join(rel))
}

fn unit_grid(
    t: &TensorFile,
    field: &str,
    ck: &mut Checker,
    expect: Option<[usize; 2]>,
    dim: Option<usize>,
) -> Option<Tensor3D> {
    let dims = t.dims_usize();
    if dims.len() != 3 {
        ck.fail(field, format!("expected rank 3, got dims {dims:?}"));
        return None;
    }
    if let Some([h, w]) = expect {
        if dims[0] != h || dims[1] != w {
            ck.fail(
                field,
                format!("grid {}x{} does not match declared {h}x{w}", dims[0], dims[1]),
            );
            return None;
        }
    }
    if let Some(d) = dim {
        if dims[2] != d {
            ck.fail(field, format!("feature dim {} does not match {d}", dims[2]));
            return None;
        }
    }
    let values = match t.to_f64() {
        Ok(v) => v,
        Err(e) => {
            ck.fail(field, e);
            return None;
        }
    };
    if let Err(m) = check_unit_rows(&values, dims[2], STORED_UNIT_TOL) {
        ck.fail(field, m);
        return None;
    }
    let m = Tensor2D::from_vec(dims[0] * dims[1], dims[2], values).ok()?;
    let m = crate::numerics::l2_normalize_rows(&m).ok()?;
    Tensor3D::from_matrix(m, dims[0], dims[1]).ok()
}

fn mask_stack(
    t: &TensorFile,
    field: &str,
    ck: &mut Checker,
    hw: (usize, usize),
    confidences: &[f64],
) -> Option<Vec<MaskProposal>> {
    let dims = t.dims_usize();
    if dims.len() != 3 || dims[1] != hw.0 || dims[2] != hw.1 {
        ck.fail(
            field,
            format!("expected M x {} x {} masks, got dims {dims:?}", hw.0, hw.1),
        );
        return None;
    }
    if dims[0] != confidences.len() {
        ck.fail(
            field,
            format!("{} masks but {} confidences", dims[0], confidences.len()),
        );
        return None;
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        ck.fail(field, format!("confidence {c} outside [0, 1]"));
        return None;
    }
    let TensorData::U8(bytes) = &t.data else {
        ck.fail(field, "masks must be u8");
        return None;
    };
    let plane = hw.0 * hw.1;
    let mut out = Vec::with_capacity(dims[0]);
    for (i, chunk) in bytes.chunks(plane).enumerate() {
        match BinaryMask::from_vec(hw.0, hw.1, chunk.to_vec()) {
            Ok(mask) => out.push(MaskProposal {
                mask,
                confidence: confidences[i],
                class_id: None,
            }),
            Err(e) => {
                ck.fail(field, format!("mask {i}: {e}"));
                return None;
            }
        }
    }
    Some(out)
}

/// Reads a label map stored as u8 or i32.
pub fn read_label_map(path: &Path) -> Result<SegmentationMap> {
    let t = read_tensor(path)?;
    let dims = t.dims_usize();
    if dims.len() != 2 {
        return Err(Error::validation(format!("label map must be rank 2, got {dims:?}")));
    }
    let values: Vec<u32> = match &t.data {
        TensorData::U8(v) => v.iter().map(|&x| u32::from(x)).collect(),
        TensorData::I32(v) => {
            if let Some(bad) = v.iter().find(|&&x| x < 0) {
                return Err(Error::validation(format!("negative label {bad}")));
            }
            v.iter().map(|&x| x as u32).collect()
        }
        TensorData::F32(_) => return Err(Error::validation("label map must be u8 or i32")),
    };
    SegmentationMap::from_vec(dims[0], dims[1], values)
}

/// Writes a label map as u8 when every id fits, i32 otherwise.
pub fn write_label_map(path: &Path, map: &SegmentationMap) -> Result<()> {
    let dims = vec![map.height() as u32, map.width() as u32];
    let t = if map.data().iter().all(|&v| v <= u32::from(u8::MAX)) {
        TensorFile::u8(dims, map.data().iter().map(|&v| v as u8).collect())?
    } else {
        TensorFile::i32(dims, map.data().iter().map(|&v| v as i32).collect())?
    };
    write_tensor(path, &t)
}

/// Loads and validates the record for `image_id`. `num_classes` bounds every
/// class id the record mentions.
pub fn load_image_record(
    root: &Path,
    manifest: &DatasetManifest,
    image_id: &str,
    num_classes: usize,
) -> Result<ImageBundle> {
    let record = manifest
        .images
        .iter()
        .find(|r| r.image_id == image_id)
        .ok_or_else(|| Error::validation(format!("image {image_id:?} not in manifest")))?
        .clone();
    load_record(root, record, num_classes)
}

pub fn load_record(root: &Path, record: ImageRecord, num_classes: usize) -> Result<ImageBundle> {
    let mut ck = Checker {
        image_id: record.image_id.clone(),
        problems: Vec::new(),
    };
    let (rows, cols) = (record.crop_grid[0] as usize, record.crop_grid[1] as usize);
    let (hp, wp) = record.patch_hw();
    let hw = record.pixel_hw();
    if rows == 0 || cols == 0 || hp % rows != 0 || wp % cols != 0 {
        ck.fail(
            "patch_grid",
            format!("{hp}x{wp} is not a whole number of crops on a {rows}x{cols} grid"),
        );
        return Err(Error::Validation(ck.problems));
    }
    let crop_hw = [hp / rows, wp / cols];
    if record.crop_features.len() != rows * cols {
        ck.fail(
            "crop_features",
            format!("{} paths for a {rows}x{cols} crop grid", record.crop_features.len()),
        );
    }
    if hw.0 == 0 || hw.1 == 0 {
        ck.fail("pixel_size", "zero-sized canvas");
    }

    // Files that do not exist are reported as such rather than as validation errors.
    let mut crop_features = Vec::new();
    let mut dim = None;
    for (i, rel) in record.crop_features.iter().enumerate() {
        let t = read_or_missing(root, rel)?;
        if let Some(g) = unit_grid(&t, &format!("crop_features[{i}]"), &mut ck, Some(crop_hw), dim) {
            dim = Some(g.channels());
            crop_features.push(g);
        }
    }

    let cls = read_or_missing(root, &record.cls_tokens)?;
    let cls_dims = cls.dims_usize();
    let mut cls_tokens = Tensor2D::zeros(0, 0);
    if cls_dims.len() != 2 || cls_dims[0] != rows * cols || dim.is_some_and(|d| d != cls_dims[1]) {
        ck.fail(
            "cls_tokens",
            format!("dims {cls_dims:?} do not match {} crops of dim {dim:?}", rows * cols),
        );
    } else {
        let values = cls.to_f64()?;
        match check_unit_rows(&values, cls_dims[1], STORED_UNIT_TOL) {
            Ok(()) => {
                cls_tokens = crate::numerics::l2_normalize_rows(&Tensor2D::from_vec(cls_dims[0], cls_dims[1], values)?)?
            }
            Err(m) => ck.fail("cls_tokens", m),
        }
    }

    let feature_grid = match &record.feature_grid {
        Some(rel) => {
            let t = read_or_missing(root, rel)?;
            unit_grid(&t, "feature_grid", &mut ck, Some([hp, wp]), dim)
        }
        None => None,
    };

    let vt = read_or_missing(root, &record.vision_features)?;
    let vhw = record.vision_hw();
    let vision_features = unit_grid(&vt, "vision_features", &mut ck, Some([vhw.0, vhw.1]), None);

    let mut point_masks = Vec::new();
    for (i, entry) in record.point_masks.iter().enumerate() {
        let field = format!("point_masks[{i}]");
        if entry.class_id as usize >= num_classes {
            ck.fail(&field, format!("unknown class id {}", entry.class_id));
            continue;
        }
        let t = read_or_missing(root, &entry.masks)?;
        if let Some(props) = mask_stack(&t, &field, &mut ck, hw, &entry.confidences) {
            point_masks.push(PointMaskSet {
                class_id: entry.class_id,
                points: entry.points.clone(),
                proposals: props,
            });
        }
    }

    let auto_masks = match &record.auto_masks {
        Some(entry) => {
            let t = read_or_missing(root, &entry.masks)?;
            mask_stack(&t, "auto_masks", &mut ck, hw, &entry.confidences)
        }
        None => None,
    };

    let ground_truth = match &record.ground_truth {
        Some(rel) => {
            let gt = read_label_map(&root.join(rel))?;
            if gt.shape() != hw {
                ck.fail(
                    "ground_truth",
                    format!("{:?} does not match pixel_size {hw:?}", gt.shape()),
                );
                None
            } else if let Some(bad) = gt
                .data()
                .iter()
                .find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes)
            {
                ck.fail("ground_truth", format!("unknown class id {bad}"));
                None
            } else {
                Some(gt)
            }
        }
        None => None,
    };

    if let Some(labels) = &record.image_level_labels {
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            ck.fail("image_level_labels", format!("unknown class id {bad}"));
        }
    }

    ck.finish()?;
    Ok(ImageBundle {
        record,
        crop_features,
        cls_tokens,
        feature_grid,
        vision_features: vision_features.expect("checked above"),
        point_masks,
        auto_masks,
        ground_truth,
    })
}

fn mask_stack_tensor(masks: &[&BinaryMask], hw: (usize, usize)) -> Result<TensorFile> {
    let mut bytes = Vec::with_capacity(masks.len() * hw.0 * hw.1);
    for m in masks {
        bytes.extend_from_slice(m.data());
    }
    TensorFile::u8(vec![masks.len() as u32, hw.0 as u32, hw.1 as u32], bytes)
}

/// Payload for [`save_image`]; the record is derived from it.
pub struct ImageExport<'a> {
    pub image_id: &'a str,
    pub pixel_size: [u32; 2],
    pub source_size: [u32; 2],
    pub patch_px: u32,
    pub crop_grid: [u32; 2],
    pub crop_features: &'a [Tensor3D],
    pub cls_tokens: &'a Tensor2D,
    pub feature_grid: Option<&'a Tensor3D>,
    pub vision_features: &'a Tensor3D,
    pub point_masks: &'a [PointMaskSet],
    pub auto_masks: Option<&'a [MaskProposal]>,
    pub ground_truth: Option<&'a SegmentationMap>,
    pub image_level_labels: Option<Vec<u32>>,
}

/// Writes every tensor of one image under the canonical layout and returns its record.
pub fn save_image(root: &Path, ex: &ImageExport<'_>) -> Result<ImageRecord> {
    let id = ex.image_id;
    let tdir = PathBuf::from("tensors").join(id);
    let mdir = PathBuf::from("masks").join(id);
    let rel = |p: PathBuf| p.to_string_lossy().replace('\\', "/");
    let grid3 = |g: &Tensor3D| vec![g.height() as u32, g.width() as u32, g.channels() as u32];

    let (rows, cols) = (ex.crop_grid[0] as usize, ex.crop_grid[1] as usize);
    if ex.crop_features.len() != rows * cols {
        return Err(Error::shape(format!(
            "{} crops for a {rows}x{cols} grid",
            ex.crop_features.len()
        )));
    }
    let mut crop_paths = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let g = &ex.crop_features[r * cols + c];
            let p = rel(tdir.join(format!("crop_{r}_{c}.fmsg")));
            write_tensor(root.join(&p), &f32_tensor(grid3(g), g.data())?)?;
            crop_paths.push(p);
        }
    }
    let (ch, cw) = (ex.crop_features[0].height(), ex.crop_features[0].width());

    let cls_path = rel(tdir.join("cls.fmsg"));
    let (n, d) = ex.cls_tokens.shape();
    write_tensor(
        root.join(&cls_path),
        &f32_tensor(vec![n as u32, d as u32], ex.cls_tokens.data())?,
    )?;

    let feature_grid = match ex.feature_grid {
        Some(g) => {
            let p = rel(tdir.join("grid.fmsg"));
            write_tensor(root.join(&p), &f32_tensor(grid3(g), g.data())?)?;
            Some(p)
        }
        None => None,
    };

    let vision_path = rel(tdir.join("vision.fmsg"));
    let v = ex.vision_features;
    write_tensor(root.join(&vision_path), &f32_tensor(grid3(v), v.data())?)?;

    let hw = (ex.pixel_size[0] as usize, ex.pixel_size[1] as usize);
    let mut point_masks = Vec::new();
    for set in ex.point_masks {
        let p = rel(mdir.join(format!("points_{}.fmsg", set.class_id)));
        let masks: Vec<&BinaryMask> = set.proposals.iter().map(|m| &m.mask).collect();
        write_tensor(root.join(&p), &mask_stack_tensor(&masks, hw)?)?;
        point_masks.push(PointMaskEntry {
            class_id: set.class_id,
            points: set.points.clone(),
            masks: p,
            confidences: set.proposals.iter().map(|m| m.confidence).collect(),
        });
    }

    let auto_masks = match ex.auto_masks {
        Some(props) if !props.is_empty() => {
            let p = rel(mdir.join("auto.fmsg"));
            let masks: Vec<&BinaryMask> = props.iter().map(|m| &m.mask).collect();
            write_tensor(root.join(&p), &mask_stack_tensor(&masks, hw)?)?;
            Some(AutoMaskEntry {
                masks: p,
                confidences: props.iter().map(|m| m.confidence).collect(),
            })
        }
        _ => None,
    };

    let ground_truth = match ex.ground_truth {
        Some(gt) => {
            let p = rel(mdir.join("gt.fmsg"));
            write_label_map(&root.join(&p), gt)?;
            Some(p)
        }
        None => None,
    };

    Ok(ImageRecord {
        image_id: id.to_string(),
        pixel_size: ex.pixel_size,
        source_size: ex.source_size,
        patch_px: ex.patch_px,
        crop_grid: ex.crop_grid,
        patch_grid: [(rows * ch) as u32, (cols * cw) as u32],
        crop_features: crop_paths,
        cls_tokens: cls_path,
        feature_grid,
        vision_grid: [v.height() as u32, v.width() as u32],
        vision_features: vision_path,
        point_masks,
        auto_masks,
        ground_truth,
        image_level_labels: ex.image_level_labels.clone(),
    })
}
