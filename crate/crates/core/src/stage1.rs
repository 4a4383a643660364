//! Training-free pseudo-label generation.
//!
//! Per image: crop classification tokens vote for the classes present; for
//! each detected class the hottest patches of its heatmap become point
//! prompts for the mask oracle (stage 1.1). Independently, automatic masks
//! are labelled by the nearest detected prototype to their mean patch
//! feature (stage 1.2). The two sets are fused with a seeded subsample of
//! the second.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::{AnnotationSet, ImageBundle, PixelPoint, PseudoAnnotation, Stage};
use crate::numerics::{argmax, dot, l2_normalize, SeededRng, Tensor2D, Tensor3D};
use crate::types::{FeatureGrid, MaskProposal, PatchGeometry, TextPrototypeSet};

/// Source of point-prompted masks.
pub trait MaskOracle: Sync {
    /// Masks for a set of point prompts, in the oracle's own order.
    fn point_masks(&self, bundle: &ImageBundle, class_id: u32, points: &[PixelPoint]) -> Result<Vec<MaskProposal>>;
}

/// Serves point masks precomputed by an exporter and stored in the record.
///
/// Entries are matched by class id; prompts that differ from the exported
/// ones are logged, since the exporter chose its own points.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileOracle;

impl MaskOracle for FileOracle {
    fn point_masks(&self, bundle: &ImageBundle, class_id: u32, points: &[PixelPoint]) -> Result<Vec<MaskProposal>> {
        let set = bundle
            .point_masks
            .iter()
            .find(|s| s.class_id == class_id)
            .ok_or_else(|| {
                Error::Oracle(format!(
                    "no exported point masks for class {class_id} in {}",
                    bundle.record.image_id
                ))
            })?;
        if set.points != points {
            log::info!(
                "image {}: exported prompts for class {class_id} differ from requested ones",
                bundle.record.image_id
            );
        }
        Ok(set.proposals.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// Crop-vote threshold `T`.
    pub vote_threshold: usize,
    /// `count > T` when true, `count >= T` otherwise.
    pub strict_votes: bool,
    /// Use the record's image-level labels instead of crop votes.
    pub semi_supervised: bool,
    pub query_points: usize,
    pub auto_mask_min_confidence: f64,
    /// Minimum mask area as a fraction of the image.
    pub auto_mask_min_area: f64,
    /// Fraction of stage 1.2 annotations kept when fusing.
    pub balance_ratio: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            vote_threshold: 1,
            strict_votes: true,
            semi_supervised: false,
            query_points: 5,
            auto_mask_min_confidence: 0.97,
            auto_mask_min_area: 0.001,
            balance_ratio: 0.75,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("auto_mask_min_confidence", self.auto_mask_min_confidence),
            ("auto_mask_min_area", self.auto_mask_min_area),
            ("balance_ratio", self.balance_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("detection.{name} = {v} is outside [0, 1]")));
            }
        }
        if self.query_points == 0 {
            return Err(Error::Config("detection.query_points must be positive".into()));
        }
        Ok(())
    }
}

/// One crop's patch features and its position in the crop grid.
#[derive(Debug, Clone)]
pub struct CropFeatures {
    pub row: usize,
    pub col: usize,
    pub features: Tensor3D,
}

/// Tiles per-crop patch grids into one full-image grid: crop `(r, c)` patch
/// `(i, j)` lands at `(r·h + i, c·w + j)`.
pub fn mosaic_crop_features(crops: &[CropFeatures], rows: usize, cols: usize) -> Result<Tensor3D> {
    let first = crops.first().ok_or_else(|| Error::shape("no crops to mosaic"))?;
    let (h, w, d) = first.features.shape();
    let mut placed = vec![false; rows * cols];
    let mut out = Tensor3D::zeros(rows * h, cols * w, d);
    for crop in crops {
        if crop.features.shape() != (h, w, d) {
            return Err(Error::shape(format!(
                "crop ({}, {}) is {:?}, expected {:?}",
                crop.row,
                crop.col,
                crop.features.shape(),
                (h, w, d)
            )));
        }
        if crop.row >= rows || crop.col >= cols {
            return Err(Error::shape(format!(
                "crop ({}, {}) outside the {rows}x{cols} grid",
                crop.row, crop.col
            )));
        }
        let slot = &mut placed[crop.row * cols + crop.col];
        if *slot {
            return Err(Error::shape(format!("crop ({}, {}) given twice", crop.row, crop.col)));
        }
        *slot = true;
        for i in 0..h {
            let src = &crop.features.data()[i * w * d..(i + 1) * w * d];
            let y = crop.row * h + i;
            let o = (y * cols * w + crop.col * w) * d;
            out.data_mut()[o..o + w * d].copy_from_slice(src);
        }
    }
    if let Some(missing) = placed.iter().position(|p| !p) {
        return Err(Error::shape(format!(
            "missing crop ({}, {})",
            missing / cols,
            missing % cols
        )));
    }
    Ok(out)
}

/// Inverse of [`mosaic_crop_features`], row-major over the crop grid.
pub fn demosaic(grid: &Tensor3D, rows: usize, cols: usize) -> Result<Vec<CropFeatures>> {
    let (gh, gw, d) = grid.shape();
    if rows == 0 || cols == 0 || gh % rows != 0 || gw % cols != 0 {
        return Err(Error::shape(format!(
            "{gh}x{gw} grid does not split into {rows}x{cols} crops"
        )));
    }
    let (h, w) = (gh / rows, gw / cols);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = Vec::with_capacity(h * w * d);
            for i in 0..h {
                let o = ((r * h + i) * gw + c * w) * d;
                data.extend_from_slice(&grid.data()[o..o + w * d]);
            }
            out.push(CropFeatures {
                row: r,
                col: c,
                features: Tensor3D::from_vec(h, w, d, data)?,
            });
        }
    }
    Ok(out)
}

/// Full-image feature grid for a bundle: the stored mosaic if present,
/// otherwise tiled from the crops.
pub fn image_feature_grid(bundle: &ImageBundle) -> Result<FeatureGrid> {
    let id = bundle.record.image_id.clone();
    if let Some(g) = &bundle.feature_grid {
        return FeatureGrid::new(id, g.clone());
    }
    let (rows, cols) = (bundle.record.crop_grid[0] as usize, bundle.record.crop_grid[1] as usize);
    let crops: Vec<CropFeatures> = bundle
        .crop_features
        .iter()
        .enumerate()
        .map(|(i, f)| CropFeatures {
            row: i / cols,
            col: i % cols,
            features: f.clone(),
        })
        .collect();
    FeatureGrid::new(id, mosaic_crop_features(&crops, rows, cols)?)
}

/// Nearest prototype per crop token; ties go to the lowest class index.
pub fn classify_crops(cls_tokens: &Tensor2D, prototypes: &Tensor2D) -> Result<Vec<u32>> {
    let sims = crate::numerics::similarity_matrix(cls_tokens, prototypes)?;
    Ok((0..sims.rows()).map(|i| argmax(sims.row(i)) as u32).collect())
}

/// Classes voted for by enough crops, ascending. In semi-supervised mode the
/// image-level labels are returned as given.
pub fn detect_classes(
    crop_classes: &[u32],
    num_classes: usize,
    config: &DetectionConfig,
    image_level_labels: Option<&[u32]>,
) -> Result<Vec<u32>> {
    if config.semi_supervised {
        let labels = image_level_labels
            .ok_or_else(|| Error::validation("semi-supervised detection needs image-level labels"))?;
        return Ok(labels.to_vec());
    }
    let mut votes = vec![0usize; num_classes];
    for &c in crop_classes {
        *votes
            .get_mut(c as usize)
            .ok_or_else(|| Error::domain(format!("crop class {c} >= {num_classes}")))? += 1;
    }
    let t = config.vote_threshold;
    Ok(votes
        .iter()
        .enumerate()
        .filter(|&(_, &n)| if config.strict_votes { n > t } else { n >= t && n > 0 })
        .map(|(k, _)| k as u32)
        .collect())
}

/// `H_p × W_p` map of patch–prototype dot products.
pub fn class_heatmap(grid: &FeatureGrid, prototype: &[f64]) -> Result<Tensor2D> {
    if prototype.len() != grid.dim() {
        return Err(Error::shape(format!(
            "prototype dim {} vs feature dim {}",
            prototype.len(),
            grid.dim()
        )));
    }
    let data = grid.grid.data().chunks(grid.dim()).map(|p| dot(p, prototype)).collect();
    Tensor2D::from_vec(grid.height(), grid.width(), data)
}

/// Geometry for mapping patch indices to prompt coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSpace {
    /// Patch side in source pixels.
    pub patch_px: u32,
    /// Source resolution `[H, W]` the patch grid was computed at.
    pub source: [u32; 2],
    /// Mask-oracle resolution `[H, W]`.
    pub target: [u32; 2],
}

/// The `k` hottest patches (descending; ties in row-major order), each mapped
/// from its center in source pixels to target pixels, rounded half-up and
/// clamped to the target canvas.
pub fn select_query_points(heatmap: &Tensor2D, k: usize, space: PromptSpace) -> Result<Vec<PixelPoint>> {
    let n = heatmap.data().len();
    if k > n {
        return Err(Error::domain(format!("{k} query points requested from {n} patches")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps row-major order among equal values
    order.sort_by(|&a, &b| heatmap.data()[b].total_cmp(&heatmap.data()[a]));
    let map = |idx: usize, src: u32, dst: u32| -> u32 {
        let center = (idx as f64 + 0.5) * f64::from(space.patch_px);
        let scaled = center * f64::from(dst) / f64::from(src);
        ((scaled + 0.5).floor() as i64).clamp(0, i64::from(dst) - 1) as u32
    };
    let w = heatmap.cols();
    Ok(order[..k]
        .iter()
        .map(|&p| {
            let (r, c) = (p / w, p % w);
            PixelPoint(
                map(c, space.source[1], space.target[1]),
                map(r, space.source[0], space.target[0]),
            )
        })
        .collect())
}

/// Point-prompted masks for every detected class, keeping the oracle's most
/// confident mask (first on ties). Oracle failures skip the class.
pub fn stage11_generate(
    bundle: &ImageBundle,
    grid: &FeatureGrid,
    vocab: &TextPrototypeSet,
    detected: &[u32],
    oracle: &dyn MaskOracle,
    config: &DetectionConfig,
) -> Result<AnnotationSet> {
    let rec = &bundle.record;
    let space = PromptSpace {
        patch_px: rec.patch_px,
        source: rec.source_size,
        target: rec.pixel_size,
    };
    let mut out = Vec::new();
    for &class_id in detected {
        let heat = class_heatmap(grid, vocab.prototypes.row(class_id as usize))?;
        let points = select_query_points(&heat, config.query_points, space)?;
        let proposals = match oracle.point_masks(bundle, class_id, &points) {
            Ok(p) if !p.is_empty() => p,
            Ok(_) => {
                log::warn!("image {}: oracle returned no masks for class {class_id}", rec.image_id);
                continue;
            }
            Err(e) => {
                log::warn!("image {}: skipping class {class_id}: {e}", rec.image_id);
                continue;
            }
        };
        let best = pick_most_confident(&proposals);
        let chosen = &proposals[best];
        if chosen.mask.height() != rec.pixel_size[0] as usize || chosen.mask.width() != rec.pixel_size[1] as usize {
            log::warn!(
                "image {}: oracle mask has the wrong size, skipping class {class_id}",
                rec.image_id
            );
            continue;
        }
        out.push(PseudoAnnotation {
            image_id: rec.image_id.clone(),
            class_id,
            mask: chosen.mask.clone(),
            confidence: chosen.confidence,
            stage: Stage::PointPrompt,
        });
    }
    Ok(AnnotationSet::new(out))
}

/// Index of the highest-confidence proposal; ties keep the earliest.
pub fn pick_most_confident(proposals: &[MaskProposal]) -> usize {
    let mut best = 0;
    for (i, p) in proposals.iter().enumerate().skip(1) {
        if p.confidence > proposals[best].confidence {
            best = i;
        }
    }
    best
}

/// Labels automatic masks with the detected class whose prototype is nearest
/// to the mask's mean patch feature. Masks below the confidence or area
/// thresholds, or covering no patch, are dropped.
pub fn stage12_label(
    bundle: &ImageBundle,
    grid: &FeatureGrid,
    vocab: &TextPrototypeSet,
    detected: &[u32],
    auto_masks: &[MaskProposal],
    config: &DetectionConfig,
) -> Result<AnnotationSet> {
    let rec = &bundle.record;
    if detected.is_empty() {
        return Ok(AnnotationSet::default());
    }
    let (h, w) = rec.pixel_hw();
    let geom = PatchGeometry::new(h, w, grid.height(), grid.width())?;
    let protos = vocab.subset(detected);
    let d = grid.dim();
    let min_area = config.auto_mask_min_area * (h * w) as f64;
    let mut out = Vec::new();
    for (mi, m) in auto_masks.iter().enumerate() {
        if m.confidence < config.auto_mask_min_confidence || (m.mask.area() as f64) < min_area {
            continue;
        }
        let covered = geom.covered_patches(&m.mask)?;
        let mut mean = vec![0.0; d];
        let mut n = 0usize;
        for (p, _) in covered.iter().enumerate().filter(|(_, &c)| c) {
            let f = &grid.grid.data()[p * d..(p + 1) * d];
            mean.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            n += 1;
        }
        if n == 0 {
            log::warn!("image {}: auto mask {mi} covers no patch, dropped", rec.image_id);
            continue;
        }
        let Ok(mean) = l2_normalize(&mean) else {
            log::warn!(
                "image {}: auto mask {mi} has a zero mean feature, dropped",
                rec.image_id
            );
            continue;
        };
        let sims: Vec<f64> = (0..protos.rows()).map(|k| dot(protos.row(k), &mean)).collect();
        out.push(PseudoAnnotation {
            image_id: rec.image_id.clone(),
            class_id: detected[argmax(&sims)],
            mask: m.mask.clone(),
            confidence: m.confidence,
            stage: Stage::AutoMask,
        });
    }
    Ok(AnnotationSet::new(out))
}

/// All of `set11` followed by a seeded uniform sample of
/// `⌊ratio·|set12|⌋` entries of `set12` (original order kept).
pub fn fuse_and_balance(set11: &AnnotationSet, set12: &AnnotationSet, ratio: f64, seed: u64) -> Result<AnnotationSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain(format!("balance ratio {ratio} outside [0, 1]")));
    }
    let n = set12.len();
    let keep = (ratio * n as f64).floor() as usize;
    let mut rng = SeededRng::new(seed);
    let picked = rng.sample_indices(n, keep);
    let mut out = set11.annotations.clone();
    out.extend(picked.into_iter().map(|i| set12.annotations[i].clone()));
    Ok(AnnotationSet::new(out))
}

/// Stage 1 results for one image.
#[derive(Debug, Clone)]
pub struct ImageLabels {
    pub image_id: String,
    pub detected: Vec<u32>,
    pub point_prompt: AnnotationSet,
    pub auto_mask: AnnotationSet,
}

pub fn label_image(
    bundle: &ImageBundle,
    vocab: &TextPrototypeSet,
    oracle: &dyn MaskOracle,
    config: &DetectionConfig,
) -> Result<ImageLabels> {
    let grid = image_feature_grid(bundle)?;
    if grid.dim() != vocab.dim() {
        return Err(Error::shape(format!(
            "{}: feature dim {} vs prototype dim {}",
            bundle.record.image_id,
            grid.dim(),
            vocab.dim()
        )));
    }
    let crop_classes = classify_crops(&bundle.cls_tokens, &vocab.prototypes)?;
    let detected = detect_classes(
        &crop_classes,
        vocab.len(),
        config,
        bundle.record.image_level_labels.as_deref(),
    )?;
    let point_prompt = stage11_generate(bundle, &grid, vocab, &detected, oracle, config)?;
    let auto = bundle.auto_masks.as_deref().unwrap_or(&[]);
    let auto_mask = stage12_label(bundle, &grid, vocab, &detected, auto, config)?;
    log::debug!(
        "image {}: detected {:?}, {} point-prompt and {} auto-mask annotations",
        bundle.record.image_id,
        detected,
        point_prompt.len(),
        auto_mask.len()
    );
    Ok(ImageLabels {
        image_id: bundle.record.image_id.clone(),
        detected,
        point_prompt,
        auto_mask,
    })
}

/// Runs [`label_image`] over every bundle (in parallel; output order follows
/// the input) and fuses the results.
pub fn run_stage1(
    bundles: &[ImageBundle],
    vocab: &TextPrototypeSet,
    oracle: &dyn MaskOracle,
    config: &DetectionConfig,
) -> Result<(Vec<ImageLabels>, AnnotationSet)> {
    config.validate()?;
    let per_image: Vec<ImageLabels> = bundles
        .par_iter()
        .map(|b| label_image(b, vocab, oracle, config))
        .collect::<Result<_>>()?;
    let set11 = AnnotationSet::new(
        per_image
            .iter()
            .flat_map(|l| l.point_prompt.annotations.iter().cloned())
            .collect(),
    );
    let set12 = AnnotationSet::new(
        per_image
            .iter()
            .flat_map(|l| l.auto_mask.annotations.iter().cloned())
            .collect(),
    );
    let fused = fuse_and_balance(&set11, &set12, config.balance_ratio, config.seed)?;
    Ok((per_image, fused))
}
