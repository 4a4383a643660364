use fmseg_core::align::{prototype_loss, tsupcon_loss, LossBatch};
use fmseg_core::exchange::{AnnotationSet, PseudoAnnotation, Stage};
use fmseg_core::infer::{base_segmentation, miou, refined_segmentation, EvalProtocol};
use fmseg_core::numerics::{l2_normalize_rows, SeededRng, Tensor2D, Tensor3D};
use fmseg_core::stage1::{demosaic, fuse_and_balance, mosaic_crop_features};
use fmseg_core::types::{BinaryMask, PatchGeometry, SegmentationMap, IGNORE_INDEX};
use proptest::prelude::*;

fn gaussian_rows(rng: &mut SeededRng, n: usize, d: usize) -> Tensor2D {
    let data = (0..n * d).map(|_| rng.gaussian()).collect();
    l2_normalize_rows(&Tensor2D::from_vec(n, d, data).unwrap()).unwrap()
}

fn random_map(rng: &mut SeededRng, h: usize, w: usize, k: u64, ignore: bool) -> SegmentationMap {
    let data = (0..h * w)
        .map(|_| {
            if ignore && rng.below(8) == 0 {
                IGNORE_INDEX
            } else {
                rng.below(k) as u32
            }
        })
        .collect();
    SegmentationMap::from_vec(h, w, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mosaic_round_trips_bit_exactly(
        rows in 1usize..5,
        cols in 1usize..5,
        h in 1usize..6,
        w in 1usize..6,
        d in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f64> = (0..rows * h * cols * w * d).map(|_| rng.gaussian()).collect();
        let grid = Tensor3D::from_vec(rows * h, cols * w, d, data).unwrap();
        let mut crops = demosaic(&grid, rows, cols).unwrap();
        prop_assert_eq!(crops.len(), rows * cols);
        // placement depends on (row, col), not on list order
        rng.shuffle(&mut crops);
        let back = mosaic_crop_features(&crops, rows, cols).unwrap();
        prop_assert_eq!(back.shape(), grid.shape());
        for (a, b) in back.data().iter().zip(grid.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn balancing_keeps_floor_of_ratio(n11 in 0usize..20, n12 in 0usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let ann = |i: usize, stage| PseudoAnnotation {
            image_id: format!("img{i}"),
            class_id: 0,
            mask: BinaryMask::empty(1, 1),
            confidence: 1.0,
            stage,
        };
        let s11 = AnnotationSet::new((0..n11).map(|i| ann(i, Stage::PointPrompt)).collect());
        let s12 = AnnotationSet::new((0..n12).map(|i| ann(i, Stage::AutoMask)).collect());
        let fused = fuse_and_balance(&s11, &s12, ratio, seed).unwrap();
        prop_assert_eq!(fused.len(), n11 + (ratio * n12 as f64).floor() as usize);
        prop_assert_eq!(fused.count_stage(Stage::PointPrompt), n11);
        prop_assert_eq!(&fused, &fuse_and_balance(&s11, &s12, ratio, seed).unwrap());
    }

    #[test]
    fn one_patch_per_class_makes_prototype_and_tsupcon_agree(k in 2usize..6, d in 2usize..8, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let n = 1 + rng.below(k as u64) as usize;
        let mut classes: Vec<u32> = (0..k as u32).collect();
        rng.shuffle(&mut classes);
        let labels = &classes[..n];
        let z = gaussian_rows(&mut rng, n, d);
        let t = gaussian_rows(&mut rng, k, d);
        let batch = LossBatch::new(&z, labels, &t);
        let a = tsupcon_loss(&batch).unwrap();
        let b = prototype_loss(&batch).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_is_symmetric_under_class_permutation(k in 1u64..6, h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let gt = random_map(&mut rng, h, w, k, true);
        let pred = random_map(&mut rng, h, w, k, false);
        prop_assume!(gt.data().iter().any(|&v| v != IGNORE_INDEX));
        let protocol = EvalProtocol::plain(k as usize);
        let base = miou(&pred, &gt, &protocol).unwrap();

        let mut perm: Vec<u32> = (0..k as u32).collect();
        rng.shuffle(&mut perm);
        let apply = |m: &SegmentationMap| {
            let data = m
                .data()
                .iter()
                .map(|&v| if v == IGNORE_INDEX { v } else { perm[v as usize] })
                .collect();
            SegmentationMap::from_vec(m.height(), m.width(), data).unwrap()
        };
        let permuted = miou(&apply(&pred), &apply(&gt), &protocol).unwrap();
        prop_assert!((base.miou - permuted.miou).abs() < 1e-12);
        for (c, &pc) in perm.iter().enumerate() {
            prop_assert_eq!(base.per_class_iou[c], permuted.per_class_iou[pc as usize]);
        }

        let defined: Vec<f64> = base.per_class_iou.iter().flatten().copied().collect();
        prop_assert!(defined.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        prop_assert_eq!(base.miou, mean);
    }

    #[test]
    fn refinement_only_changes_pixels_inside_masks(
        gh in 1usize..5,
        gw in 1usize..5,
        scale in 1usize..5,
        n_masks in 0usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let (h, w) = (gh * scale + rng.below(3) as usize, gw * scale + rng.below(3) as usize);
        let k = 3;
        let sims_data = (0..gh * gw * k).map(|_| rng.gaussian()).collect();
        let sims = Tensor3D::from_vec(gh, gw, k, sims_data).unwrap();
        let base = base_segmentation(&sims, h, w).unwrap();
        let patch_labels = random_map(&mut rng, gh, gw, k as u64, false);
        let masks: Vec<BinaryMask> = (0..n_masks)
            .map(|_| {
                let (y0, x0) = (rng.below(h as u64) as usize, rng.below(w as u64) as usize);
                let (y1, x1) = (y0 + 1 + rng.below((h - y0) as u64) as usize, x0 + 1 + rng.below((w - x0) as u64) as usize);
                BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
            })
            .collect();
        let geom = PatchGeometry::new(h, w, gh, gw).unwrap();
        let refined = refined_segmentation(&base, &masks, &patch_labels, &geom).unwrap();
        for y in 0..h {
            for x in 0..w {
                if !masks.iter().any(|m| m.get(y, x)) {
                    prop_assert_eq!(refined.get(y, x), base.get(y, x));
                }
            }
        }
    }
}
