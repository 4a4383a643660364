//! Stage 2: align frozen vision features with frozen text prototypes.
//!
//! Pseudo annotations become per-patch labels, a small head maps vision
//! patches into the prototype space, and the head is trained with a
//! contrastive objective over patch–text and patch–patch pairs.

mod checkpoint;
mod head;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointDescriptor, ParamEntry, CHECKPOINT_FILE};
pub use head::{AlignmentHead, ForwardPass, HeadGrads, HeadSpec, HeadVariant, Param};
pub use loss::{loss, prototype_loss, supcon_loss, tsupcon_loss, LossBatch, LossKind, LossOutput};
pub use train::{batch_loss, train, TrainConfig, TrainLogEntry, TrainSample};

use crate::error::Result;
use crate::exchange::PseudoAnnotation;
use crate::types::PatchGeometry;

/// Per-patch pseudo labels; `None` marks unlabeled patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Option<u32>>,
}

impl PatchLabelGrid {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![None; height * width],
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// A patch takes the class of a mask covering more than half its pixels.
/// Where several masks qualify, the most confident wins, then the lowest
/// class id.
pub fn assign_patch_labels<'a>(
    annotations: impl IntoIterator<Item = &'a PseudoAnnotation>,
    geometry: &PatchGeometry,
) -> Result<PatchLabelGrid> {
    let mut ranked: Vec<&PseudoAnnotation> = annotations.into_iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.class_id.cmp(&b.class_id)));
    let mut grid = PatchLabelGrid::unlabeled(geometry.grid_h, geometry.grid_w);
    for ann in ranked {
        let covered = geometry.covered_patches(&ann.mask)?;
        for (slot, hit) in grid.labels.iter_mut().zip(covered) {
            if hit && slot.is_none() {
                *slot = Some(ann.class_id);
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exchange::Stage;
    use crate::types::BinaryMask;

    fn ann(class_id: u32, confidence: f64, mask: BinaryMask) -> PseudoAnnotation {
        PseudoAnnotation {
            image_id: "x".into(),
            class_id,
            mask,
            confidence,
            stage: Stage::PointPrompt,
        }
    }

    #[test]
    fn half_mask_on_boundary() {
        let geom = PatchGeometry::new(8, 8, 2, 2).unwrap();
        let left = BinaryMask::from_fn(8, 8, |_, x| x < 4);
        let g = assign_patch_labels([&ann(1, 1.0, left)], &geom).unwrap();
        assert_eq!(g.labels, vec![Some(1), None, Some(1), None]);
    }

    #[test]
    fn overlap_goes_to_more_confident() {
        let geom = PatchGeometry::new(8, 8, 2, 2).unwrap();
        let all = BinaryMask::from_fn(8, 8, |_, _| true);
        let a = ann(0, 0.8, all.clone());
        let b = ann(2, 0.9, all);
        let g = assign_patch_labels([&a, &b], &geom).unwrap();
        assert!(g.labels.iter().all(|&l| l == Some(2)));
    }

    #[test]
    fn equal_confidence_prefers_lower_class() {
        let geom = PatchGeometry::new(4, 4, 1, 1).unwrap();
        let all = BinaryMask::from_fn(4, 4, |_, _| true);
        let g = assign_patch_labels([&ann(3, 0.9, all.clone()), &ann(1, 0.9, all)], &geom).unwrap();
        assert_eq!(g.labels, vec![Some(1)]);
    }

    #[test]
    fn no_annotations_leaves_everything_unlabeled() {
        let geom = PatchGeometry::new(8, 8, 2, 2).unwrap();
        let g = assign_patch_labels(std::iter::empty(), &geom).unwrap();
        assert_eq!(g.labeled_count(), 0);
    }

    #[test]
    fn exactly_half_is_not_enough() {
        let geom = PatchGeometry::new(4, 4, 1, 1).unwrap();
        let half = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let g = assign_patch_labels([&ann(0, 1.0, half)], &geom).unwrap();
        assert_eq!(g.labels, vec![None]);
    }
}
