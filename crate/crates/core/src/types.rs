//! Domain carriers shared across stages: binary masks, label maps, patch
//! geometry, feature grids and text prototypes.

use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor2D, Tensor3D};

/// Label value marking pixels excluded from evaluation.
pub const IGNORE_INDEX: u32 = 255;

/// `h × w` mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::validation(format!(
                "mask value {} at index {pos} is not 0/1",
                data[pos]
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a & b);
            union += usize::from(a | b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Square (Chebyshev) dilation; the canvas border clips the result.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        self.morph(radius, true)
    }

    /// Square erosion; pixels beyond the canvas count as outside the mask.
    pub fn erode(&self, radius: usize) -> BinaryMask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let r = radius as isize;
        BinaryMask::from_fn(h, w, |y, x| {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    let inside = yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && self.get(yy as usize, xx as usize);
                    any |= inside;
                    all &= inside;
                }
            }
            if dilate {
                any
            } else {
                all
            }
        })
    }
}

/// A mask returned by a mask oracle, with its predicted quality.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProposal {
    pub mask: BinaryMask,
    pub confidence: f64,
    pub class_id: Option<u32>,
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl SegmentationMap {
    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    pub fn class_mask(&self, class_id: u32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v == class_id)).collect(),
        }
    }
}

/// Relation between a pixel canvas and a patch grid laid over it.
///
/// A pixel belongs to the patch containing its center, so on non-integer
/// patch sizes every pixel still has exactly one owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    row_of: Vec<usize>,
    col_of: Vec<usize>,
}

impl PatchGeometry {
    pub fn new(image_h: usize, image_w: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if image_h == 0 || image_w == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::domain("patch geometry needs non-zero sizes"));
        }
        if grid_h > image_h || grid_w > image_w {
            return Err(Error::domain(format!(
                "{grid_h}x{grid_w} patch grid is finer than the {image_h}x{image_w} canvas"
            )));
        }
        let owner = |px: usize, n_img: usize, n_grid: usize| (2 * px + 1) * n_grid / (2 * n_img);
        Ok(Self {
            image_h,
            image_w,
            grid_h,
            grid_w,
            row_of: (0..image_h).map(|y| owner(y, image_h, grid_h)).collect(),
            col_of: (0..image_w).map(|x| owner(x, image_w, grid_w)).collect(),
        })
    }

    pub fn patch_of(&self, y: usize, x: usize) -> (usize, usize) {
        (self.row_of[y], self.col_of[x])
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Per patch (row-major): number of its pixels inside `mask`, and its total pixel count.
    pub fn coverage(&self, mask: &BinaryMask) -> Result<(Vec<usize>, Vec<usize>)> {
        if mask.height != self.image_h || mask.width != self.image_w {
            return Err(Error::shape(format!(
                "mask {}x{} does not match canvas {}x{}",
                mask.height, mask.width, self.image_h, self.image_w
            )));
        }
        let mut covered = vec![0usize; self.num_patches()];
        let mut total = vec![0usize; self.num_patches()];
        for y in 0..self.image_h {
            let r = self.row_of[y];
            for x in 0..self.image_w {
                let p = r * self.grid_w + self.col_of[x];
                total[p] += 1;
                covered[p] += usize::from(mask.data[y * self.image_w + x]);
            }
        }
        Ok((covered, total))
    }

    /// Patches with more than half of their pixels inside `mask`.
    pub fn covered_patches(&self, mask: &BinaryMask) -> Result<Vec<bool>> {
        let (covered, total) = self.coverage(mask)?;
        Ok(covered.iter().zip(&total).map(|(&c, &t)| 2 * c > t).collect())
    }
}

/// Unit-norm patch embeddings for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    pub grid: Tensor3D,
}

impl FeatureGrid {
    pub fn new(image_id: impl Into<String>, grid: Tensor3D) -> Result<Self> {
        check_unit_rows(grid.data(), grid.channels(), 1e-6)
            .map_err(|m| Error::validation(format!("feature grid: {m}")))?;
        Ok(Self {
            image_id: image_id.into(),
            grid,
        })
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn dim(&self) -> usize {
        self.grid.channels()
    }
}

/// Frozen class anchors: one unit vector per class name.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypeSet {
    pub names: Vec<String>,
    pub prototypes: Tensor2D,
    pub template: String,
}

impl TextPrototypeSet {
    pub fn new(names: Vec<String>, prototypes: Tensor2D, template: impl Into<String>) -> Result<Self> {
        if names.len() != prototypes.rows() {
            return Err(Error::validation(format!(
                "{} class names for {} prototypes",
                names.len(),
                prototypes.rows()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::validation(format!("duplicate class name {n:?}")));
            }
        }
        check_unit_rows(prototypes.data(), prototypes.cols(), 1e-6)
            .map_err(|m| Error::validation(format!("prototypes: {m}")))?;
        Ok(Self {
            names,
            prototypes,
            template: template.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Prototypes restricted to `ids` (in the given order).
    pub fn subset(&self, ids: &[u32]) -> Tensor2D {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.prototypes.select_rows(&idx)
    }
}

pub(crate) fn check_unit_rows(data: &[f64], dim: usize, tol: f64) -> std::result::Result<(), String> {
    if dim == 0 {
        return Err("zero-dimensional vectors".into());
    }
    for (i, row) in data.chunks(dim).enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > tol {
            return Err(format!("row {i} has norm {n}, expected 1"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_assigns_each_pixel_once() {
        let g = PatchGeometry::new(10, 7, 3, 2).unwrap();
        let full = BinaryMask::from_fn(10, 7, |_, _| true);
        let (cov, tot) = g.coverage(&full).unwrap();
        assert_eq!(cov, tot);
        assert_eq!(tot.iter().sum::<usize>(), 70);
    }

    #[test]
    fn geometry_aligned_blocks() {
        let g = PatchGeometry::new(28, 28, 2, 2).unwrap();
        assert_eq!(g.patch_of(13, 14), (0, 1));
        assert_eq!(g.patch_of(14, 13), (1, 0));
    }

    #[test]
    fn morphology() {
        let m = BinaryMask::from_fn(20, 20, |y, x| (5..15).contains(&y) && (5..15).contains(&x));
        assert_eq!(m.dilate(2).area(), 14 * 14);
        assert_eq!(m.erode(2).area(), 6 * 6);
        // erosion treats the border as outside
        let full = BinaryMask::from_fn(6, 6, |_, _| true);
        assert_eq!(full.erode(2).area(), 2 * 2);
        assert_eq!(full.dilate(2).area(), 36);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::from_vec(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let p = Tensor2D::identity(2);
        assert!(TextPrototypeSet::new(vec!["a".into(), "a".into()], p, "{}").is_err());
    }
}
