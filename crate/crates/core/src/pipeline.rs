//! End-to-end orchestration behind the command-line tool.
//!
//! Every command reads its inputs from disk and writes its outputs to disk,
//! so `pipeline` is exactly the chain `synth → stage1 → train → infer → eval`.
//! All randomness is derived from the root seed; each run records the seeds
//! it used and a hash of the effective configuration under `runs/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    assign_patch_labels, load_checkpoint, save_checkpoint, train, AlignmentHead, HeadSpec, HeadVariant, TrainConfig,
    TrainSample, CHECKPOINT_FILE,
};
use crate::error::{Error, Result};
use crate::exchange::{
    load_image_record, load_vocabulary, read_annotation_set, read_json, read_label_map, read_manifest,
    write_annotation_set, write_json, write_label_map, AnnotationSet, DatasetManifest, ImageBundle, Stage,
};
use crate::infer::{
    base_segmentation, classify_patches, refined_segmentation, ConfusionMatrix, EvalProtocol, EvalReport,
};
use crate::numerics::{derive_seed, SeededRng};
use crate::stage1::{run_stage1, DetectionConfig, FileOracle, MaskOracle};
use crate::synthworld::{
    export_dataset, generate_world, random_scene, SceneFile, SynthGeometry, SyntheticOracle, SCENES_FILE,
};
use crate::types::{PatchGeometry, TextPrototypeSet};

pub const STAGE1_DIR: &str = "stage1";
pub const TRAIN_DIR: &str = "train";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const EVAL_DIR: &str = "eval";
pub const RUNS_DIR: &str = "runs";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_INDEX: &str = "index.json";
pub const STAGE1_SUMMARY: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset used by `stage1` and `train`.
    pub dataset: PathBuf,
    /// Dataset used by `infer` and `eval`; defaults to `dataset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<PathBuf>,
    pub output: PathBuf,
}

fn default_min_crop_votes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBackend {
    pub num_classes: usize,
    pub text_dim: usize,
    pub vision_dim: usize,
    pub sigma: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Every visible class of a sampled scene wins at least this many crops
    /// when rendered without noise.
    #[serde(default = "default_min_crop_votes")]
    pub min_crop_votes: usize,
    #[serde(default)]
    pub geometry: SynthGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    /// Generated scenes; point prompts are answered from the scene layouts.
    Synthetic(SyntheticBackend),
    /// Exported model outputs; point prompts come from precomputed masks.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub hidden: usize,
    pub heads: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: HeadVariant::Linear,
            hidden: 64,
            heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Overlay majority-voted automatic masks on the base segmentation.
    pub refined: bool,
    /// Automatic masks below this confidence are not overlaid.
    pub refine_min_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub background_id: Option<u32>,
    pub background_set: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    pub backend: Backend,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub infer: InferConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.detection.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        if self.head.hidden == 0 || self.head.heads == 0 {
            problems.push("head.hidden and head.heads must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.infer.refine_min_confidence) {
            problems.push(format!(
                "infer.refine_min_confidence {} is outside [0, 1]",
                self.infer.refine_min_confidence
            ));
        }
        if let Backend::Synthetic(s) = &self.backend {
            if s.num_classes < 2 {
                problems.push("backend.num_classes must be at least 2".into());
            }
            if s.text_dim < s.num_classes || s.vision_dim < s.text_dim {
                problems.push("backend dims must satisfy num_classes <= text_dim <= vision_dim".into());
            }
            if !(s.sigma >= 0.0 && s.sigma.is_finite()) {
                problems.push(format!("backend.sigma {} must be non-negative", s.sigma));
            }
            if s.train_scenes == 0 {
                problems.push("backend.train_scenes must be positive".into());
            }
            if s.eval_scenes > 0 && self.paths.eval_dataset.is_none() {
                problems.push("backend.eval_scenes needs paths.eval_dataset".into());
            }
            if self.paths.eval_dataset.as_ref() == Some(&self.paths.dataset) {
                problems.push("paths.eval_dataset must differ from paths.dataset for a synthetic backend".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid config: {}", problems.join("; "))))
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.base_dir.join(&self.paths.dataset)
    }

    pub fn eval_dataset_dir(&self) -> PathBuf {
        self.base_dir
            .join(self.paths.eval_dataset.as_ref().unwrap_or(&self.paths.dataset))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.paths.output)
    }

    /// SHA-256 of the configuration's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// Record written to `runs/<command>.json` by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
}

/// `outputs` are recorded relative to the config directory.
fn write_run(config: &PipelineConfig, command: &str, seeds: &[&str], outputs: Vec<PathBuf>) -> Result<()> {
    let dir = config.output_dir().join(RUNS_DIR);
    create_dir(&dir)?;
    let manifest = RunManifest {
        command: command.into(),
        config_hash: config.hash(),
        seed: config.seed,
        derived_seeds: seeds.iter().map(|s| (s.to_string(), config.seed_for(s))).collect(),
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(&config.base_dir).unwrap_or(p).display().to_string())
            .collect(),
    };
    write_json(&dir.join(format!("{command}.json")), &manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn recreate_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    create_dir(dir)
}

/// Generates the synthetic train and eval datasets.
pub fn run_synth(config: &PipelineConfig) -> Result<()> {
    let Backend::Synthetic(s) = &config.backend else {
        return Err(Error::Config("`synth` needs backend.kind = \"synthetic\"".into()));
    };
    let world = generate_world(
        s.num_classes,
        s.text_dim,
        s.vision_dim,
        s.sigma,
        config.seed_for("synth/world"),
    )?;
    let sample = |prefix: &str, n: usize, label: &str| -> Result<Vec<_>> {
        let mut rng = SeededRng::new(config.seed_for(label));
        (0..n)
            .map(|i| {
                random_scene(
                    &world,
                    &s.geometry,
                    &format!("{prefix}_{i:03}"),
                    &mut rng,
                    s.min_crop_votes,
                )
            })
            .collect()
    };
    let train_scenes = sample("train", s.train_scenes, "synth/scenes/train")?;
    let train_dir = config.dataset_dir();
    export_dataset(&train_dir, &world, &s.geometry, &train_scenes)?;
    let mut outputs = vec![train_dir.clone()];
    if s.eval_scenes > 0 {
        let eval_scenes = sample("eval", s.eval_scenes, "synth/scenes/eval")?;
        let eval_dir = config.eval_dataset_dir();
        export_dataset(&eval_dir, &world, &s.geometry, &eval_scenes)?;
        outputs.push(eval_dir);
    }
    log::info!(
        "synthesized {} train and {} eval scenes (K={}, sigma={})",
        s.train_scenes,
        s.eval_scenes,
        s.num_classes,
        s.sigma
    );
    write_run(
        config,
        "synth",
        &["synth/world", "synth/scenes/train", "synth/scenes/eval"],
        outputs,
    )
}

/// A dataset with its vocabulary and every record loaded and validated.
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: TextPrototypeSet,
    pub bundles: Vec<ImageBundle>,
}

pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(root)?;
    let vocab = load_vocabulary(root, &manifest.vocab)?;
    let bundles = manifest
        .images
        .par_iter()
        .map(|r| load_image_record(root, &manifest, &r.image_id, vocab.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        root: root.to_path_buf(),
        manifest,
        vocab,
        bundles,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1ImageSummary {
    pub image_id: String,
    pub detected: Vec<u32>,
    pub point_prompt: usize,
    pub auto_mask: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub images: Vec<Stage1ImageSummary>,
    pub point_prompt_total: usize,
    pub auto_mask_total: usize,
    pub auto_mask_kept: usize,
}

/// Generates pseudo annotations for the training dataset.
pub fn run_stage1_command(config: &PipelineConfig) -> Result<AnnotationSet> {
    let data = load_dataset(&config.dataset_dir())?;
    let oracle: Box<dyn MaskOracle> = match &config.backend {
        Backend::Synthetic(_) => {
            let scenes: SceneFile = read_json(&data.root.join(SCENES_FILE))?;
            Box::new(SyntheticOracle::new(scenes.scenes))
        }
        Backend::Files => Box::new(FileOracle),
    };
    let mut detection = config.detection.clone();
    detection.seed = config.seed_for("stage1/balance");
    let (per_image, fused) = run_stage1(&data.bundles, &data.vocab, oracle.as_ref(), &detection)?;
    let out = config.output_dir().join(STAGE1_DIR);
    create_dir(&out)?;
    write_annotation_set(&out, &fused, data.vocab.len())?;
    let summary = Stage1Summary {
        images: per_image
            .iter()
            .map(|l| Stage1ImageSummary {
                image_id: l.image_id.clone(),
                detected: l.detected.clone(),
                point_prompt: l.point_prompt.len(),
                auto_mask: l.auto_mask.len(),
            })
            .collect(),
        point_prompt_total: per_image.iter().map(|l| l.point_prompt.len()).sum(),
        auto_mask_total: per_image.iter().map(|l| l.auto_mask.len()).sum(),
        auto_mask_kept: fused.count_stage(Stage::AutoMask),
    };
    write_json(&out.join(STAGE1_SUMMARY), &summary)?;
    log::info!(
        "stage 1: {} annotations ({} point-prompt, {} of {} auto-mask)",
        fused.len(),
        summary.point_prompt_total,
        summary.auto_mask_kept,
        summary.auto_mask_total
    );
    write_run(config, "stage1", &["stage1/balance"], vec![out])?;
    Ok(fused)
}

/// Patch labels for every training image from the stage 1 annotations.
pub fn training_samples(data: &LoadedDataset, annotations: &AnnotationSet) -> Result<Vec<TrainSample>> {
    data.bundles
        .par_iter()
        .map(|b| {
            let (h, w) = b.record.pixel_hw();
            let (hv, wv) = b.record.vision_hw();
            let geom = PatchGeometry::new(h, w, hv, wv)?;
            let labels = assign_patch_labels(annotations.for_image(&b.record.image_id), &geom)?;
            Ok(TrainSample {
                image_id: b.record.image_id.clone(),
                features: b.vision_features.to_matrix(),
                labels: labels.labels,
            })
        })
        .collect()
}

/// Trains the alignment head on the stage 1 annotations and saves it.
pub fn run_train(config: &PipelineConfig) -> Result<Vec<crate::align::TrainLogEntry>> {
    let data = load_dataset(&config.dataset_dir())?;
    let out = config.output_dir();
    let annotations = read_annotation_set(&out.join(STAGE1_DIR), data.vocab.len())?;
    let samples = training_samples(&data, &annotations)?;
    let d_in = samples.first().map(|s| s.features.cols()).unwrap_or(0);
    let spec = HeadSpec {
        variant: config.head.variant,
        d_in,
        d_out: data.vocab.dim(),
        hidden: config.head.hidden,
        heads: config.head.heads,
    };
    let head = AlignmentHead::init(spec, config.seed_for("train/init"))?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed_for("train");
    let labeled: usize = samples.iter().map(|s| s.labels.iter().flatten().count()).sum();
    log::info!(
        "training {:?} head on {} images, {} labeled patches",
        config.head.variant,
        samples.len(),
        labeled
    );
    let (head, log) = train(head, &samples, &data.vocab.prototypes, &train_cfg)?;
    let dir = out.join(TRAIN_DIR);
    recreate_dir(&dir)?;
    save_checkpoint(&dir, &head, log.len())?;
    let mut lines = String::new();
    for entry in &log {
        lines.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        lines.push('\n');
    }
    let log_path = dir.join(TRAIN_LOG_FILE);
    std::fs::write(&log_path, lines).map_err(|e| Error::io(&log_path, e))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        log::info!(
            "trained {} steps, loss {:.6} -> {:.6}",
            log.len(),
            first.loss,
            last.loss
        );
    }
    write_run(
        config,
        "train",
        &["train/init", "train"],
        vec![dir.join(CHECKPOINT_FILE)],
    )?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub refined: bool,
    pub images: Vec<String>,
}

/// Writes one label map per evaluation image.
pub fn run_infer(config: &PipelineConfig, refined: bool) -> Result<PredictionIndex> {
    let data = load_dataset(&config.eval_dataset_dir())?;
    let out = config.output_dir();
    let (head, _) = load_checkpoint(&out.join(TRAIN_DIR))?;
    let dir = out.join(PREDICTIONS_DIR);
    recreate_dir(&dir)?;
    data.bundles.par_iter().try_for_each(|b| -> Result<()> {
        let (h, w) = b.record.pixel_hw();
        let pred = classify_patches(&head, &b.vision_features, &data.vocab.prototypes)?;
        let mut map = base_segmentation(&pred.sims, h, w)?;
        if refined {
            let (hv, wv) = b.record.vision_hw();
            let geom = PatchGeometry::new(h, w, hv, wv)?;
            let masks: Vec<_> = b
                .auto_masks
                .as_deref()
                .unwrap_or(&[])
                .iter()
                .filter(|m| m.confidence >= config.infer.refine_min_confidence)
                .map(|m| m.mask.clone())
                .collect();
            map = refined_segmentation(&map, &masks, &pred.labels, &geom)?;
        }
        write_label_map(&dir.join(format!("{}.fmsg", b.record.image_id)), &map)
    })?;
    let index = PredictionIndex {
        refined,
        images: data.manifest.images.iter().map(|r| r.image_id.clone()).collect(),
    };
    write_json(&dir.join(PREDICTIONS_INDEX), &index)?;
    log::info!(
        "wrote {} {} predictions",
        index.images.len(),
        if refined { "refined" } else { "base" }
    );
    write_run(config, "infer", &[], vec![dir])?;
    Ok(index)
}

/// Scores the predictions against ground truth with a global confusion matrix.
pub fn run_eval(config: &PipelineConfig) -> Result<EvalReport> {
    let root = config.eval_dataset_dir();
    let manifest = read_manifest(&root)?;
    let vocab = load_vocabulary(&root, &manifest.vocab)?;
    let protocol = EvalProtocol {
        num_classes: vocab.len(),
        background_id: config.eval.background_id,
        background_set: config.eval.background_set.clone(),
    };
    protocol.validate().map_err(|e| Error::Config(format!("eval: {e}")))?;
    let pred_dir = config.output_dir().join(PREDICTIONS_DIR);
    let index: PredictionIndex = read_json(&pred_dir.join(PREDICTIONS_INDEX))?;
    let matrices = manifest
        .images
        .par_iter()
        .map(|r| -> Result<ConfusionMatrix> {
            let gt_path = r
                .ground_truth
                .as_ref()
                .ok_or_else(|| Error::validation(format!("{}: no ground_truth", r.image_id)))?;
            if !index.images.contains(&r.image_id) {
                return Err(Error::MissingFile(pred_dir.join(format!("{}.fmsg", r.image_id))));
            }
            let gt = read_label_map(&root.join(gt_path))?;
            let pred = read_label_map(&pred_dir.join(format!("{}.fmsg", r.image_id)))?;
            let mut cm = ConfusionMatrix::new(protocol.num_classes);
            cm.add(
                &crate::infer::remap_background(&pred, &protocol),
                &crate::infer::remap_background(&gt, &protocol),
            )?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(protocol.num_classes);
    for cm in &matrices {
        total.merge(cm)?;
    }
    let report = total.report()?;
    let dir = config.output_dir().join(EVAL_DIR);
    create_dir(&dir)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    log::info!("mIoU {:.6} over {} pixels", report.miou, report.pixel_count);
    write_run(config, "eval", &[], vec![dir.join(REPORT_FILE)])?;
    Ok(report)
}

/// All commands in sequence; `synth` only runs for the synthetic backend.
pub fn run_pipeline(config: &PipelineConfig, refined: bool) -> Result<EvalReport> {
    if matches!(config.backend, Backend::Synthetic(_)) {
        run_synth(config)?;
    }
    run_stage1_command(config)?;
    run_train(config)?;
    run_infer(config, refined)?;
    let report = run_eval(config)?;
    write_run(
        config,
        "pipeline",
        &[
            "synth/world",
            "synth/scenes/train",
            "synth/scenes/eval",
            "stage1/balance",
            "train/init",
            "train",
        ],
        vec![config.output_dir().join(EVAL_DIR).join(REPORT_FILE)],
    )?;
    Ok(report)
}
