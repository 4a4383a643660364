//! Deterministic stand-in for the image-text encoder, the self-supervised
//! vision encoder and the mask-proposal model.
//!
//! Classes are orthonormal text prototypes `T`. The image-text encoder sees a
//! patch of class `c` as `normalize(T[c] + σ·ε)`; the vision encoder sees it as
//! `normalize(R·T[c] + σ·ε)` for a column-orthonormal `R`, so the linear head
//! `W = R` (row convention `z = x·W`) maps vision features back onto the
//! prototypes exactly when `σ = 0`.
//!
//! Scenes are axis-aligned rectangles on a cell lattice; the mask oracle
//! answers from the scene layout, and its confidences are true IoUs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::{
    save_image, write_json, write_manifest, write_vocabulary, DatasetManifest, ImageBundle, ImageExport, PixelPoint,
    FORMAT_VERSION, VOCAB_FILE,
};
use crate::numerics::{derive_seed, dot, l2_normalize, SeededRng, Tensor2D, Tensor3D};
use crate::stage1::MaskOracle;
use crate::types::{BinaryMask, MaskProposal, PatchGeometry, SegmentationMap, TextPrototypeSet};

pub const SCENES_FILE: &str = "scenes.json";
pub const TEMPLATE: &str = "a photo of a {}.";

const CLASS_NAMES: &[&str] = &[
    "background",
    "road",
    "car",
    "tree",
    "person",
    "building",
    "sky",
    "water",
    "grass",
    "bicycle",
    "sign",
    "fence",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub text_dim: usize,
    pub vision_dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// `K × D_text`, orthonormal rows.
    pub prototypes: Tensor2D,
    /// `D_vision × D_text`, orthonormal columns.
    pub vision_basis: Tensor2D,
}

/// Orthonormalizes `vectors` in place (modified Gram–Schmidt, two passes).
fn gram_schmidt(vectors: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..vectors.len() {
        for _ in 0..2 {
            for j in 0..i {
                let (done, rest) = vectors.split_at_mut(i);
                let p = dot(&rest[0], &done[j]);
                rest[0].iter_mut().zip(&done[j]).for_each(|(v, u)| *v -= p * u);
            }
        }
        vectors[i] =
            l2_normalize(&vectors[i]).map_err(|_| Error::domain("degenerate sample during orthogonalization"))?;
    }
    Ok(())
}

pub fn generate_world(
    num_classes: usize,
    text_dim: usize,
    vision_dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SyntheticWorld> {
    if num_classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {num_classes}")));
    }
    if text_dim < num_classes {
        return Err(Error::domain(format!(
            "text dim {text_dim} < {num_classes} classes leaves no room for orthogonal prototypes"
        )));
    }
    if vision_dim < text_dim {
        return Err(Error::domain(format!("vision dim {vision_dim} < text dim {text_dim}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("noise sigma {sigma} must be finite and >= 0")));
    }
    let mut rng = SeededRng::new(derive_seed(seed, "world"));
    let mut protos: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..text_dim).map(|_| rng.gaussian()).collect())
        .collect();
    gram_schmidt(&mut protos)?;
    let mut cols: Vec<Vec<f64>> = (0..text_dim)
        .map(|_| (0..vision_dim).map(|_| rng.gaussian()).collect())
        .collect();
    gram_schmidt(&mut cols)?;
    let mut basis = Tensor2D::zeros(vision_dim, text_dim);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            basis.set(i, j, v);
        }
    }
    Ok(SyntheticWorld {
        text_dim,
        vision_dim,
        sigma,
        seed,
        prototypes: Tensor2D::from_rows(&protos)?,
        vision_basis: basis,
    })
}

impl SyntheticWorld {
    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|k| {
                CLASS_NAMES
                    .get(k)
                    .map_or_else(|| format!("class_{k}"), |s| s.to_string())
            })
            .collect()
    }

    pub fn vocabulary(&self) -> Result<TextPrototypeSet> {
        TextPrototypeSet::new(self.class_names(), self.prototypes.clone(), TEMPLATE)
    }

    /// `R·t_k`, the noiseless vision embedding of class `k`.
    pub fn vision_embedding(&self, class_id: usize) -> Vec<f64> {
        let t = self.prototypes.row(class_id);
        (0..self.vision_dim).map(|i| dot(self.vision_basis.row(i), t)).collect()
    }
}

/// Layout of the synthetic sensors over a scene canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthGeometry {
    /// Canvas (mask space) size `[H, W]`.
    pub canvas: [u32; 2],
    pub crop_grid: [u32; 2],
    /// Image-text patches per crop side.
    pub crop_patches: u32,
    /// Image-text patch side in source pixels.
    pub patch_px: u32,
    pub vision_grid: [u32; 2],
    /// Scene rectangles snap to multiples of this many canvas pixels.
    pub cell_px: u32,
}

impl Default for SynthGeometry {
    /// 4×4 crops of 24×24 patches (96×96 grid, 1344 px source) over a 336 px
    /// canvas, with a 6×6 vision grid of 56 px patches. Scene rectangles
    /// snap to the vision patches, which also keeps them on text-patch
    /// boundaries.
    fn default() -> Self {
        Self {
            canvas: [336, 336],
            crop_grid: [4, 4],
            crop_patches: 24,
            patch_px: 14,
            vision_grid: [6, 6],
            cell_px: 56,
        }
    }
}

impl SynthGeometry {
    pub fn patch_grid(&self) -> [u32; 2] {
        [
            self.crop_grid[0] * self.crop_patches,
            self.crop_grid[1] * self.crop_patches,
        ]
    }

    pub fn source_size(&self) -> [u32; 2] {
        let g = self.patch_grid();
        [g[0] * self.patch_px, g[1] * self.patch_px]
    }

    fn canvas_hw(&self) -> (usize, usize) {
        (self.canvas[0] as usize, self.canvas[1] as usize)
    }

    pub fn text_geometry(&self) -> Result<PatchGeometry> {
        let (h, w) = self.canvas_hw();
        let g = self.patch_grid();
        PatchGeometry::new(h, w, g[0] as usize, g[1] as usize)
    }

    pub fn vision_geometry(&self) -> Result<PatchGeometry> {
        let (h, w) = self.canvas_hw();
        PatchGeometry::new(h, w, self.vision_grid[0] as usize, self.vision_grid[1] as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub top: u32,
    pub left: u32,
    pub height: u32,
    pub width: u32,
    pub class_id: u32,
}

/// Rectangles over a background; later regions occlude earlier ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    pub background: u32,
    pub regions: Vec<Region>,
}

impl SyntheticScene {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::domain("scene canvas is empty"));
        }
        if self.background as usize >= num_classes {
            return Err(Error::domain(format!(
                "background class {} out of range",
                self.background
            )));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.class_id as usize >= num_classes {
                return Err(Error::domain(format!("region {i} class {} out of range", r.class_id)));
            }
            if r.height == 0 || r.width == 0 || r.top + r.height > self.height || r.left + r.width > self.width {
                return Err(Error::domain(format!("region {i} {r:?} leaves the canvas")));
            }
        }
        Ok(())
    }

    /// Owner of each pixel: 0 = background, `i + 1` = `regions[i]`.
    pub fn owner_map(&self) -> Vec<usize> {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut owner = vec![0usize; h * w];
        for (i, r) in self.regions.iter().enumerate() {
            for y in r.top as usize..(r.top + r.height) as usize {
                owner[y * w + r.left as usize..y * w + (r.left + r.width) as usize].fill(i + 1);
            }
        }
        owner
    }

    fn owner_class(&self, owner: usize) -> u32 {
        if owner == 0 {
            self.background
        } else {
            self.regions[owner - 1].class_id
        }
    }

    pub fn ground_truth(&self) -> SegmentationMap {
        let data = self.owner_map().into_iter().map(|o| self.owner_class(o)).collect();
        SegmentationMap::from_vec(self.height as usize, self.width as usize, data).expect("sized by construction")
    }

    fn owner_mask(&self, owners: &[usize], owner: usize) -> BinaryMask {
        let data = owners.iter().map(|&o| u8::from(o == owner)).collect();
        BinaryMask::from_vec(self.height as usize, self.width as usize, data).expect("binary by construction")
    }

    /// Classes with at least one visible pixel, ascending.
    pub fn present_classes(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.ground_truth().data().to_vec();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Majority class per patch (ties to the lowest class id).
pub fn patch_classes(gt: &SegmentationMap, geom: &PatchGeometry, num_classes: usize) -> Vec<u32> {
    let mut counts = vec![0usize; geom.num_patches() * num_classes];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let (r, c) = geom.patch_of(y, x);
            counts[(r * geom.grid_w + c) * num_classes + gt.get(y, x) as usize] += 1;
        }
    }
    counts
        .chunks(num_classes)
        .map(|c| {
            let mut best = 0;
            for k in 1..num_classes {
                if c[k] > c[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Sensor outputs for one scene.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    /// Row-major over the crop grid, each `crop_patches² × D_text`.
    pub crop_features: Vec<Tensor3D>,
    pub cls_tokens: Tensor2D,
    /// `vision_grid × D_vision`.
    pub vision_features: Tensor3D,
    pub ground_truth: SegmentationMap,
    /// Majority class of each image-text patch, row-major.
    pub patch_classes: Vec<u32>,
    pub vision_classes: Vec<u32>,
}

fn noisy_unit(base: &[f64], sigma: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(base.to_vec());
    }
    let v: Vec<f64> = base.iter().map(|&b| b + sigma * rng.gaussian()).collect();
    l2_normalize(&v)
}

pub fn render_scene(world: &SyntheticWorld, scene: &SyntheticScene, geom: &SynthGeometry) -> Result<RenderedScene> {
    scene.validate(world.num_classes())?;
    if [scene.height, scene.width] != geom.canvas {
        return Err(Error::shape(format!(
            "scene {}x{} does not match canvas {:?}",
            scene.height, scene.width, geom.canvas
        )));
    }
    let k = world.num_classes();
    let gt = scene.ground_truth();
    let text_geom = geom.text_geometry()?;
    let vision_geom = geom.vision_geometry()?;
    let patch_cls = patch_classes(&gt, &text_geom, k);
    let vision_cls = patch_classes(&gt, &vision_geom, k);

    let mut rng = SeededRng::new(derive_seed(world.seed, &format!("render/{}", scene.image_id)));

    let (gh, gw) = (text_geom.grid_h, text_geom.grid_w);
    let dt = world.text_dim;
    let mut grid = Tensor3D::zeros(gh, gw, dt);
    for r in 0..gh {
        for c in 0..gw {
            let cls = patch_cls[r * gw + c] as usize;
            let f = noisy_unit(world.prototypes.row(cls), world.sigma, &mut rng)?;
            grid.at_mut(r, c).copy_from_slice(&f);
        }
    }

    let (cr, cc) = (geom.crop_grid[0] as usize, geom.crop_grid[1] as usize);
    let cp = geom.crop_patches as usize;
    let mut crops = Vec::with_capacity(cr * cc);
    let mut cls_rows = Vec::with_capacity(cr * cc);
    for r in 0..cr {
        for c in 0..cc {
            let mut crop = Tensor3D::zeros(cp, cp, dt);
            let mut mean = vec![0.0; dt];
            for i in 0..cp {
                for j in 0..cp {
                    let f = grid.at(r * cp + i, c * cp + j);
                    crop.at_mut(i, j).copy_from_slice(f);
                    mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
                }
            }
            cls_rows.push(l2_normalize(&mean)?);
            crops.push(crop);
        }
    }

    let (vh, vw) = (vision_geom.grid_h, vision_geom.grid_w);
    let embeds: Vec<Vec<f64>> = (0..k).map(|c| world.vision_embedding(c)).collect();
    let mut vision = Tensor3D::zeros(vh, vw, world.vision_dim);
    for r in 0..vh {
        for c in 0..vw {
            let cls = vision_cls[r * vw + c] as usize;
            let f = noisy_unit(&embeds[cls], world.sigma, &mut rng)?;
            vision.at_mut(r, c).copy_from_slice(&f);
        }
    }

    Ok(RenderedScene {
        crop_features: crops,
        cls_tokens: Tensor2D::from_rows(&cls_rows)?,
        vision_features: vision,
        ground_truth: gt,
        patch_classes: patch_cls,
        vision_classes: vision_cls,
    })
}

/// Three masks for a point prompt: the region holding most of the points,
/// that region dilated by 2 px, and eroded by 2 px. Confidence is each mask's
/// IoU against the first.
pub fn oracle_point_masks(scene: &SyntheticScene, points: &[PixelPoint]) -> Result<Vec<MaskProposal>> {
    if points.is_empty() {
        return Err(Error::domain("point prompt needs at least one point"));
    }
    let owners = scene.owner_map();
    let w = scene.width as usize;
    let mut votes = vec![0usize; scene.regions.len() + 1];
    for p in points {
        let (x, y) = (p.x() as usize, p.y() as usize);
        if y >= scene.height as usize || x >= w {
            return Err(Error::domain(format!("point {p:?} outside the canvas")));
        }
        votes[owners[y * w + x]] += 1;
    }
    let mut winner = 0;
    for (o, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = o;
        }
    }
    let base = scene.owner_mask(&owners, winner);
    let class_id = Some(scene.owner_class(winner));
    let grown = base.dilate(2);
    let shrunk = base.erode(2);
    Ok([base.clone(), grown, shrunk]
        .into_iter()
        .map(|mask| MaskProposal {
            confidence: mask.iou(&base),
            mask,
            class_id,
        })
        .collect())
}

/// One unlabeled mask per visible region (background first), with a
/// predicted IoU drawn from `[0.9, 1.0]` by a generator seeded from
/// `seed ⊕ hash(image_id)`.
pub fn oracle_auto_masks(scene: &SyntheticScene, seed: u64) -> Vec<MaskProposal> {
    let owners = scene.owner_map();
    let mut rng = SeededRng::new(derive_seed(seed, &format!("auto/{}", scene.image_id)));
    (0..=scene.regions.len())
        .filter_map(|o| {
            let confidence = rng.uniform(0.9, 1.0);
            let mask = scene.owner_mask(&owners, o);
            (mask.area() > 0).then_some(MaskProposal {
                mask,
                confidence,
                class_id: None,
            })
        })
        .collect()
}

/// Answers point prompts from known scene layouts.
#[derive(Debug, Clone, Default)]
pub struct SyntheticOracle {
    scenes: BTreeMap<String, SyntheticScene>,
}

impl SyntheticOracle {
    pub fn new(scenes: impl IntoIterator<Item = SyntheticScene>) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.image_id.clone(), s)).collect(),
        }
    }
}

impl MaskOracle for SyntheticOracle {
    fn point_masks(&self, bundle: &ImageBundle, _class_id: u32, points: &[PixelPoint]) -> Result<Vec<MaskProposal>> {
        let id = &bundle.record.image_id;
        let scene = self
            .scenes
            .get(id)
            .ok_or_else(|| Error::Oracle(format!("no synthetic scene for image {id:?}")))?;
        oracle_point_masks(scene, points)
    }
}

/// Samples a scene whose every visible class wins more than `min_crop_votes - 1`
/// crops at zero noise, so crop voting with threshold `min_crop_votes - 1`
/// detects all of them.
pub fn random_scene(
    world: &SyntheticWorld,
    geom: &SynthGeometry,
    image_id: &str,
    rng: &mut SeededRng,
    min_crop_votes: usize,
) -> Result<SyntheticScene> {
    let k = world.num_classes();
    let cell = geom.cell_px;
    let cells = [geom.canvas[0] / cell, geom.canvas[1] / cell];
    if cells[0] < 4 || cells[1] < 4 {
        return Err(Error::domain("canvas too small for the scene lattice"));
    }
    let text_geom = geom.text_geometry()?;
    let (cr, cc) = (geom.crop_grid[0] as usize, geom.crop_grid[1] as usize);
    let cp = geom.crop_patches as usize;
    for _ in 0..10_000 {
        let background = rng.below(k as u64) as u32;
        let mut others: Vec<u32> = (0..k as u32).filter(|&c| c != background).collect();
        rng.shuffle(&mut others);
        let n_obj = 1 + rng.below(others.len().min(3) as u64) as usize;
        let regions: Vec<Region> = others[..n_obj]
            .iter()
            .map(|&class_id| {
                let span = |n: u32, rng: &mut SeededRng| {
                    let lo = (n / 3).max(2);
                    let hi = (2 * n / 3).max(lo);
                    lo + rng.below(u64::from(hi - lo + 1)) as u32
                };
                let h = span(cells[0], rng);
                let w = span(cells[1], rng);
                let top = rng.below(u64::from(cells[0] - h + 1)) as u32;
                let left = rng.below(u64::from(cells[1] - w + 1)) as u32;
                Region {
                    top: top * cell,
                    left: left * cell,
                    height: h * cell,
                    width: w * cell,
                    class_id,
                }
            })
            .collect();
        let scene = SyntheticScene {
            image_id: image_id.to_string(),
            height: geom.canvas[0],
            width: geom.canvas[1],
            background,
            regions,
        };
        let gt = scene.ground_truth();
        let owners = scene.owner_map();
        if (0..=scene.regions.len()).any(|o| !owners.contains(&o)) {
            continue;
        }
        let pc = patch_classes(&gt, &text_geom, k);
        let mut votes = vec![0usize; k];
        for r in 0..cr {
            for c in 0..cc {
                let mut counts = vec![0usize; k];
                for i in 0..cp {
                    for j in 0..cp {
                        counts[pc[(r * cp + i) * text_geom.grid_w + c * cp + j] as usize] += 1;
                    }
                }
                let mut best = 0;
                for (cls, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = cls;
                    }
                }
                votes[best] += 1;
            }
        }
        if scene
            .present_classes()
            .iter()
            .all(|&c| votes[c as usize] >= min_crop_votes)
        {
            return Ok(scene);
        }
    }
    Err(Error::domain(
        "could not sample a scene satisfying the crop-vote constraint",
    ))
}

/// Scene list written next to a synthetic dataset's manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub geometry: SynthGeometry,
    pub scenes: Vec<SyntheticScene>,
}

/// Renders `scenes` and writes a complete dataset (manifest, vocabulary,
/// tensors, automatic masks, ground truth, scene layouts) under `root`.
pub fn export_dataset(
    root: &Path,
    world: &SyntheticWorld,
    geom: &SynthGeometry,
    scenes: &[SyntheticScene],
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_vocabulary(root, &world.vocabulary()?)?;
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let rendered = render_scene(world, scene, geom)?;
        let auto = oracle_auto_masks(scene, world.seed);
        images.push(save_image(
            root,
            &ImageExport {
                image_id: &scene.image_id,
                pixel_size: geom.canvas,
                source_size: geom.source_size(),
                patch_px: geom.patch_px,
                crop_grid: geom.crop_grid,
                crop_features: &rendered.crop_features,
                cls_tokens: &rendered.cls_tokens,
                feature_grid: None,
                vision_features: &rendered.vision_features,
                point_masks: &[],
                auto_masks: Some(&auto),
                ground_truth: Some(&rendered.ground_truth),
                image_level_labels: Some(scene.present_classes()),
            },
        )?);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        vocab: VOCAB_FILE.into(),
        images,
    };
    write_manifest(root, &manifest)?;
    write_json(
        &root.join(SCENES_FILE),
        &SceneFile {
            geometry: geom.clone(),
            scenes: scenes.to_vec(),
        },
    )?;
    Ok(manifest)
}
