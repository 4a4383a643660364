//! Zero-shot inference against text prototypes and mIoU evaluation.

use serde::{Deserialize, Serialize};

use crate::align::AlignmentHead;
use crate::error::{Error, Result};
use crate::numerics::{argmax, bilinear_resize, similarity_matrix, Tensor2D, Tensor3D};
use crate::types::{BinaryMask, PatchGeometry, SegmentationMap, IGNORE_INDEX};

/// Patch-to-prototype similarities (`H_p × W_p × K`) and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub sims: Tensor3D,
    pub labels: SegmentationMap,
}

pub fn classify_patches(head: &AlignmentHead, vision: &Tensor3D, prototypes: &Tensor2D) -> Result<PatchPrediction> {
    let (h, w, _) = vision.shape();
    let z = head.forward(&vision.to_matrix())?;
    let sims = similarity_matrix(&z, prototypes)?;
    let labels = (0..sims.rows()).map(|i| argmax(sims.row(i)) as u32).collect();
    Ok(PatchPrediction {
        sims: Tensor3D::from_matrix(sims, h, w)?,
        labels: SegmentationMap::from_vec(h, w, labels)?,
    })
}

/// Upsamples every similarity channel to `out_h × out_w`, then takes the
/// per-pixel argmax.
pub fn base_segmentation(sims: &Tensor3D, out_h: usize, out_w: usize) -> Result<SegmentationMap> {
    let up = bilinear_resize(sims, out_h, out_w)?;
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            data.push(argmax(up.at(y, x)) as u32);
        }
    }
    SegmentationMap::from_vec(out_h, out_w, data)
}

/// Label of a mask by majority vote over the patches it covers by more than
/// half; ties go to the lowest class. `None` when it covers no patch.
pub fn mask_vote(mask: &BinaryMask, patch_labels: &SegmentationMap, geometry: &PatchGeometry) -> Result<Option<u32>> {
    if patch_labels.shape() != (geometry.grid_h, geometry.grid_w) {
        return Err(Error::shape(format!(
            "patch labels {:?} vs geometry grid {}x{}",
            patch_labels.shape(),
            geometry.grid_h,
            geometry.grid_w
        )));
    }
    let covered = geometry.covered_patches(mask)?;
    let mut votes: Vec<(u32, usize)> = Vec::new();
    for (hit, &label) in covered.iter().zip(patch_labels.data()) {
        if !hit {
            continue;
        }
        match votes.iter_mut().find(|(l, _)| *l == label) {
            Some(v) => v.1 += 1,
            None => votes.push((label, 1)),
        }
    }
    Ok(votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l))
}

/// Paints each voted mask over a copy of `base`, largest first so smaller
/// masks win overlaps. Equal areas keep input order.
pub fn refined_segmentation(
    base: &SegmentationMap,
    masks: &[BinaryMask],
    patch_labels: &SegmentationMap,
    geometry: &PatchGeometry,
) -> Result<SegmentationMap> {
    if base.shape() != (geometry.image_h, geometry.image_w) {
        return Err(Error::shape(format!(
            "base map {:?} vs geometry canvas {}x{}",
            base.shape(),
            geometry.image_h,
            geometry.image_w
        )));
    }
    let mut voted = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        if let Some(label) = mask_vote(m, patch_labels, geometry)? {
            voted.push((m.area(), i, label));
        }
    }
    voted.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out = base.clone();
    let w = out.width();
    for (_, i, label) in voted {
        for (p, &on) in masks[i].data().iter().enumerate() {
            if on == 1 {
                out.set(p / w, p % w, label);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub num_classes: usize,
    /// Class that absorbs every id in `background_set`.
    #[serde(default)]
    pub background_id: Option<u32>,
    #[serde(default)]
    pub background_set: Vec<u32>,
}

impl EvalProtocol {
    pub fn plain(num_classes: usize) -> Self {
        Self {
            num_classes,
            background_id: None,
            background_set: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes == 0 || self.num_classes > IGNORE_INDEX as usize {
            problems.push(format!("num_classes {} must be in 1..=255", self.num_classes));
        }
        match self.background_id {
            Some(bg) => {
                if bg as usize >= self.num_classes {
                    problems.push(format!("background_id {bg} >= num_classes {}", self.num_classes));
                }
                if self.background_set.contains(&bg) {
                    problems.push(format!("background_id {bg} is also in background_set"));
                }
            }
            None if !self.background_set.is_empty() => {
                problems.push("background_set given without background_id".into());
            }
            None => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Replaces every id in the protocol's background set by its background id.
pub fn remap_background(map: &SegmentationMap, protocol: &EvalProtocol) -> SegmentationMap {
    let mut out = map.clone();
    if let Some(bg) = protocol.background_id {
        for v in out.data_mut() {
            if protocol.background_set.contains(v) {
                *v = bg;
            }
        }
    }
    out
}

/// Pixel counts indexed `[gt][pred]`, accumulated over any number of images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds one image; ground-truth pixels equal to 255 are skipped.
    pub fn add(&mut self, pred: &SegmentationMap, gt: &SegmentationMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_INDEX {
                continue;
            }
            if g as usize >= k {
                return Err(Error::domain(format!("ground-truth id {g} >= {k} classes")));
            }
            if p as usize >= k {
                return Err(Error::domain(format!("predicted id {p} >= {k} classes")));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices over different class counts"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn pixel_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let gt_total: u64 = (0..k).map(|p| self.count(c, p)).sum();
                let pred_total: u64 = (0..k).map(|g| self.count(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> Result<EvalReport> {
        let per_class_iou = self.per_class_iou();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::domain("no evaluable pixels"));
        }
        Ok(EvalReport {
            miou: defined.iter().sum::<f64>() / defined.len() as f64,
            per_class_iou,
            pixel_count: self.pixel_count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_count: u64,
}

/// Per-class IoU and mIoU for one prediction, after background remapping
/// of both maps.
pub fn miou(pred: &SegmentationMap, gt: &SegmentationMap, protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    let mut cm = ConfusionMatrix::new(protocol.num_classes);
    cm.add(&remap_background(pred, protocol), &remap_background(gt, protocol))?;
    cm.report()
}
