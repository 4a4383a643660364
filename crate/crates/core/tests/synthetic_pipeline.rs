use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use fmseg_core::align::{batch_loss, train, AlignmentHead, HeadSpec, LossKind, TrainConfig, TrainSample};
use fmseg_core::exchange::{read_json, ImageBundle, PixelPoint, Stage};
use fmseg_core::numerics::{derive_seed, Tensor2D};
use fmseg_core::pipeline::{
    load_dataset, run_eval, run_infer, run_pipeline, run_stage1_command, run_synth, run_train, training_samples,
    Backend, EvalConfig, HeadConfig, InferConfig, PathsConfig, PipelineConfig, SyntheticBackend,
};
use fmseg_core::stage1::{run_stage1, DetectionConfig, MaskOracle};
use fmseg_core::synthworld::{generate_world, SceneFile, SynthGeometry, SyntheticOracle, SCENES_FILE};
use fmseg_core::types::MaskProposal;

fn config(base: &Path, sigma: f64, train_scenes: usize) -> PipelineConfig {
    PipelineConfig {
        seed: 7,
        paths: PathsConfig {
            dataset: "train".into(),
            eval_dataset: Some("eval".into()),
            output: "out".into(),
        },
        backend: Backend::Synthetic(SyntheticBackend {
            num_classes: 4,
            text_dim: 16,
            vision_dim: 32,
            sigma,
            train_scenes,
            eval_scenes: 3,
            min_crop_votes: 2,
            geometry: SynthGeometry::default(),
        }),
        detection: DetectionConfig::default(),
        train: TrainConfig {
            epochs: 4,
            lr0: 1.0,
            temperature: 0.2,
            ..TrainConfig::default()
        },
        head: HeadConfig::default(),
        infer: InferConfig::default(),
        eval: EvalConfig::default(),
        base_dir: base.to_path_buf(),
    }
}

fn scenes(cfg: &PipelineConfig) -> SceneFile {
    read_json(&cfg.dataset_dir().join(SCENES_FILE)).unwrap()
}

#[test]
fn noiseless_stage1_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0.0, 6);
    run_synth(&cfg).unwrap();
    let set = run_stage1_command(&cfg).unwrap();
    let gts: BTreeMap<String, _> = scenes(&cfg)
        .scenes
        .iter()
        .map(|s| (s.image_id.clone(), s.ground_truth()))
        .collect();
    assert!(set.count_stage(Stage::PointPrompt) > 0 && set.count_stage(Stage::AutoMask) > 0);
    for a in &set.annotations {
        let gt = &gts[&a.image_id];
        match a.stage {
            Stage::PointPrompt => assert_eq!(a.mask.iou(&gt.class_mask(a.class_id)), 1.0, "{}", a.image_id),
            Stage::AutoMask => {
                for y in 0..gt.height() {
                    for x in 0..gt.width() {
                        if a.mask.get(y, x) {
                            assert_eq!(gt.get(y, x), a.class_id);
                        }
                    }
                }
            }
        }
    }
}

struct Recording {
    inner: SyntheticOracle,
    seen: Mutex<Vec<MaskProposal>>,
}

impl MaskOracle for Recording {
    fn point_masks(
        &self,
        bundle: &ImageBundle,
        class_id: u32,
        points: &[PixelPoint],
    ) -> fmseg_core::Result<Vec<MaskProposal>> {
        let out = self.inner.point_masks(bundle, class_id, points)?;
        self.seen.lock().unwrap().extend(out.iter().cloned());
        Ok(out)
    }
}

#[test]
fn point_prompt_masks_come_from_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0.3, 6);
    run_synth(&cfg).unwrap();
    let data = load_dataset(&cfg.dataset_dir()).unwrap();
    let oracle = Recording {
        inner: SyntheticOracle::new(scenes(&cfg).scenes),
        seen: Mutex::new(Vec::new()),
    };
    let (_, set) = run_stage1(&data.bundles, &data.vocab, &oracle, &DetectionConfig::default()).unwrap();
    let seen = oracle.seen.into_inner().unwrap();
    let mut n = 0;
    for a in set.annotations.iter().filter(|a| a.stage == Stage::PointPrompt) {
        assert!(seen.iter().any(|p| p.mask == a.mask && p.confidence == a.confidence));
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn loss_drops_over_fifty_steps_at_default_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0.0, 20);
    run_synth(&cfg).unwrap();
    let set = run_stage1_command(&cfg).unwrap();
    let data = load_dataset(&cfg.dataset_dir()).unwrap();
    let samples = training_samples(&data, &set).unwrap();
    let d_in = samples[0].features.cols();
    let head = AlignmentHead::init(HeadSpec::linear(d_in, data.vocab.dim()), 1).unwrap();
    let tc = TrainConfig {
        epochs: 13,
        lr0: 0.1,
        loss: LossKind::Tsupcon,
        seed: 2,
        ..TrainConfig::default()
    };
    let (_, log) = train(head, &samples, &data.vocab.prototypes, &tc).unwrap();
    assert!(log.len() > 50);
    assert!(log[50].loss < log[0].loss, "{} -> {}", log[0].loss, log[50].loss);
}

fn full_loss(head: &AlignmentHead, samples: &[TrainSample], prototypes: &Tensor2D, tc: &TrainConfig) -> f64 {
    let all: Vec<&TrainSample> = samples.iter().collect();
    batch_loss(head, &all, prototypes, tc.loss, tc.temperature)
        .unwrap()
        .unwrap()
        .0
}

#[test]
fn noiseless_training_reaches_the_analytic_optimum_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 0.0, 20);
    cfg.train.epochs = 10;
    run_synth(&cfg).unwrap();
    let set = run_stage1_command(&cfg).unwrap();
    let data = load_dataset(&cfg.dataset_dir()).unwrap();
    let samples = training_samples(&data, &set).unwrap();

    // features are x = R t, so the row-vector head x W with W = R returns t
    let world = generate_world(4, 16, 32, 0.0, derive_seed(cfg.seed, "synth/world")).unwrap();
    // the exported vocabulary is f32
    for (a, b) in world.prototypes.data().iter().zip(data.vocab.prototypes.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let optimum = AlignmentHead::linear_from(world.vision_basis.clone(), vec![0.0; 16]).unwrap();

    let init = AlignmentHead::init(HeadSpec::linear(32, 16), derive_seed(cfg.seed, "train/init")).unwrap();
    let (trained, _) = train(init, &samples, &data.vocab.prototypes, &cfg.train).unwrap();

    let p = &data.vocab.prototypes;
    let at_optimum = full_loss(&optimum, &samples, p, &cfg.train);
    let reached = full_loss(&trained, &samples, p, &cfg.train);
    assert!(
        reached <= at_optimum + 1e-3,
        "trained {reached} vs optimum {at_optimum}"
    );
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn pipeline_matches_chained_commands_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = config(a.path(), 0.1, 6);
    let cb = config(b.path(), 0.1, 6);
    let ra = run_pipeline(&ca, true).unwrap();

    run_synth(&cb).unwrap();
    run_stage1_command(&cb).unwrap();
    run_train(&cb).unwrap();
    run_infer(&cb, true).unwrap();
    let rb = run_eval(&cb).unwrap();
    assert_eq!(ra, rb);

    let mut fa = files(a.path());
    let fb = files(b.path());
    assert!(fa.remove(Path::new("out/runs/pipeline.json")).is_some());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&config(a.path(), 0.1, 6), false).unwrap();
    run_pipeline(&config(b.path(), 0.1, 6), false).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn different_seed_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = config(a.path(), 0.1, 2);
    let mut cb = config(b.path(), 0.1, 2);
    cb.seed += 1;
    run_synth(&ca).unwrap();
    run_synth(&cb).unwrap();
    assert_ne!(files(&ca.dataset_dir()), files(&cb.dataset_dir()));
}
