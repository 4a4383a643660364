use std::path::{Path, PathBuf};

use fmseg_core::exchange::{
    load_image_record, load_vocabulary, read_annotation_set, read_label_map, read_manifest, read_tensor, write_tensor,
    AnnotationSet, DType, PseudoAnnotation, Stage, TensorData, TensorFile, MANIFEST_FILE,
};
use fmseg_core::numerics::{derive_seed, SeededRng};
use fmseg_core::synthworld::{export_dataset, generate_world, random_scene, SynthGeometry};
use fmseg_core::types::{BinaryMask, SegmentationMap};
use fmseg_core::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn golden_f32_parses_to_known_values() {
    let t = read_tensor(fixture("golden_f32.fmsg")).unwrap();
    assert_eq!(t.dims, vec![2, 3]);
    assert_eq!(t.dtype(), DType::F32);
    let TensorData::F32(v) = &t.data else { panic!("dtype") };
    assert_eq!(v, &[1.0, -2.5, 0.125, 3.0e-3, 1e6, -0.0]);
    assert!(v[5].is_sign_negative());
    assert_eq!(t.encode(), std::fs::read(fixture("golden_f32.fmsg")).unwrap());
}

#[test]
fn golden_i32_parses_to_known_values() {
    let t = read_tensor(fixture("golden_i32.fmsg")).unwrap();
    assert_eq!(t.dims, vec![4]);
    assert_eq!(t.data, TensorData::I32(vec![-1, 0, 255, i32::MAX]));
    assert_eq!(t.encode(), std::fs::read(fixture("golden_i32.fmsg")).unwrap());
}

#[test]
fn golden_u8_parses_to_known_values() {
    let t = read_tensor(fixture("golden_u8.fmsg")).unwrap();
    assert_eq!(t.dims, vec![2, 2, 2]);
    assert_eq!(t.data, TensorData::U8(vec![0, 1, 1, 0, 255, 0, 7, 1]));
}

#[test]
fn golden_header_bytes_are_little_endian() {
    let bytes = std::fs::read(fixture("golden_f32.fmsg")).unwrap();
    assert_eq!(&bytes[..8], b"FMSG\x01\x00\x00\x02");
    assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
    assert_eq!(&bytes[16..20], &[0x00, 0x00, 0x80, 0x3f]);
}

#[test]
fn every_truncation_of_a_golden_file_is_rejected() {
    let bytes = std::fs::read(fixture("golden_f32.fmsg")).unwrap();
    for n in 0..bytes.len() {
        assert!(
            matches!(TensorFile::decode(&bytes[..n]), Err(Error::Format { .. })),
            "prefix of {n} bytes decoded"
        );
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(TensorFile::decode(&longer).is_err());
}

fn small_dataset(root: &Path, sigma: f64) {
    let world = generate_world(3, 6, 8, sigma, 11).unwrap();
    let geom = SynthGeometry::default();
    let mut rng = SeededRng::new(derive_seed(11, "scenes"));
    let scenes: Vec<_> = (0..2)
        .map(|i| random_scene(&world, &geom, &format!("img_{i}"), &mut rng, 2).unwrap())
        .collect();
    export_dataset(root, &world, &geom, &scenes).unwrap();
}

#[test]
fn exported_dataset_loads_through_validators() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 0.1);
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.images.len(), 2);
    let vocab = load_vocabulary(dir.path(), &manifest.vocab).unwrap();
    assert_eq!(vocab.len(), 3);
    for r in &manifest.images {
        let b = load_image_record(dir.path(), &manifest, &r.image_id, vocab.len()).unwrap();
        assert_eq!(b.crop_features.len(), 16);
        assert_eq!(b.cls_tokens.rows(), 16);
        let gt = b.ground_truth.unwrap();
        assert_eq!(gt.shape(), r.pixel_hw());
        assert!(b.auto_masks.is_some());
    }
}

fn edit_manifest(root: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = root.join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn unknown_manifest_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 0.0);
    edit_manifest(dir.path(), |v| {
        v["images"][0]["extra"] = serde_json::json!(1);
    });
    assert!(matches!(read_manifest(dir.path()), Err(Error::Json { .. })));
}

#[test]
fn declared_grid_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 0.0);
    edit_manifest(dir.path(), |v| {
        v["images"][0]["vision_grid"] = serde_json::json!([5, 6]);
    });
    let m = read_manifest(dir.path()).unwrap();
    let id = m.images[0].image_id.clone();
    let err = load_image_record(dir.path(), &m, &id, 3).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn non_unit_features_are_rejected_not_repaired() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 0.0);
    let m = read_manifest(dir.path()).unwrap();
    let rec = &m.images[0];
    let path = dir.path().join(&rec.vision_features);
    let mut t = read_tensor(&path).unwrap();
    if let TensorData::F32(v) = &mut t.data {
        v[0] *= 2.0;
    }
    write_tensor(&path, &t).unwrap();
    let err = load_image_record(dir.path(), &m, &rec.image_id, 3).unwrap_err();
    assert!(err.to_string().contains("vision_features"), "{err}");
}

#[test]
fn out_of_range_ground_truth_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 0.0);
    let m = read_manifest(dir.path()).unwrap();
    let id = m.images[0].image_id.clone();
    // the dataset has 3 classes
    assert!(load_image_record(dir.path(), &m, &id, 2).is_err());
}

#[test]
fn missing_tensor_is_reported_as_missing() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 0.0);
    let m = read_manifest(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(&m.images[0].cls_tokens)).unwrap();
    let err = load_image_record(dir.path(), &m, &m.images[0].image_id, 3).unwrap_err();
    assert!(matches!(err, Error::MissingFile(_)), "{err}");
}

#[test]
fn label_maps_round_trip_as_u8_or_i32() {
    let dir = tempfile::tempdir().unwrap();
    let small = SegmentationMap::from_vec(2, 2, vec![0, 1, 255, 3]).unwrap();
    let wide = SegmentationMap::from_vec(1, 3, vec![0, 300, 255]).unwrap();
    for (name, map, dtype) in [("a.fmsg", &small, DType::U8), ("b.fmsg", &wide, DType::I32)] {
        let p = dir.path().join(name);
        fmseg_core::exchange::write_label_map(&p, map).unwrap();
        assert_eq!(read_tensor(&p).unwrap().dtype(), dtype);
        assert_eq!(&read_label_map(&p).unwrap(), map);
    }
}

#[test]
fn annotation_set_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mask = |on: usize| BinaryMask::from_fn(4, 4, |y, x| y * 4 + x < on);
    let set = AnnotationSet::new(vec![
        PseudoAnnotation {
            image_id: "a".into(),
            class_id: 2,
            mask: mask(5),
            confidence: 0.9,
            stage: Stage::PointPrompt,
        },
        PseudoAnnotation {
            image_id: "b".into(),
            class_id: 0,
            mask: mask(16),
            confidence: 0.98,
            stage: Stage::AutoMask,
        },
    ]);
    fmseg_core::exchange::write_annotation_set(dir.path(), &set, 3).unwrap();
    let back = read_annotation_set(dir.path(), 3).unwrap();
    assert_eq!(back, set);
    assert!(read_annotation_set(dir.path(), 2).is_err());
}
