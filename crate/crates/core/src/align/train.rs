//! Mini-batch SGD over images with a cosine learning-rate schedule.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{AlignmentHead, HeadGrads};
use super::loss::{loss, LossBatch, LossKind};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, SeededRng, Tensor2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per batch.
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub temperature: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 5,
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            loss: LossKind::Tsupcon,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature {} must be positive", self.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr0;
        }
        self.lr0 * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
    }
}

/// One image's vision patches (`N × D_in`) and their pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image_id: String,
    pub features: Tensor2D,
    pub labels: Vec<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Loss and parameter gradients for a batch of images. Each image is passed
/// through the head on its own (the transformer attends within an image),
/// then the labeled patches of all images are pooled into one loss.
/// Returns `None` when the batch holds no labeled patch.
pub fn batch_loss(
    head: &AlignmentHead,
    batch: &[&TrainSample],
    prototypes: &Tensor2D,
    kind: LossKind,
    temperature: f64,
) -> Result<Option<(f64, HeadGrads)>> {
    let passes = batch
        .par_iter()
        .map(|s| head.forward_cached(&s.features))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        for (i, l) in s.labels.iter().enumerate() {
            if let Some(y) = l {
                rows.push((b, i));
                labels.push(*y);
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let d = head.spec.d_out;
    let mut z = Tensor2D::zeros(rows.len(), d);
    for (r, &(b, i)) in rows.iter().enumerate() {
        z.row_mut(r).copy_from_slice(passes[b].output.row(i));
    }
    let out = loss(
        kind,
        &LossBatch {
            features: &z,
            labels: &labels,
            prototypes,
            temperature,
        },
    )?;

    let mut upstream: Vec<Tensor2D> = passes.iter().map(|p| Tensor2D::zeros(p.output.rows(), d)).collect();
    for (r, &(b, i)) in rows.iter().enumerate() {
        upstream[b].row_mut(i).copy_from_slice(out.grad.row(r));
    }
    let per_image = passes
        .par_iter()
        .zip(&upstream)
        .map(|(p, dz)| head.backward(p, dz))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = HeadGrads::zeros_like(head);
    for g in &per_image {
        grads.accumulate(g);
    }
    Ok(Some((out.loss, grads)))
}

/// Trains `head` in place of a copy and returns it with the per-step log.
/// The image order is reshuffled every epoch from the config seed.
pub fn train(
    head: AlignmentHead,
    data: &[TrainSample],
    prototypes: &Tensor2D,
    config: &TrainConfig,
) -> Result<(AlignmentHead, Vec<TrainLogEntry>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    for s in data {
        if s.features.rows() != s.labels.len() {
            return Err(Error::shape(format!(
                "{}: {} patches but {} labels",
                s.image_id,
                s.features.rows(),
                s.labels.len()
            )));
        }
        if let Some(y) = s.labels.iter().flatten().find(|&&y| y as usize >= prototypes.rows()) {
            return Err(Error::domain(format!(
                "{}: label {y} >= {} prototypes",
                s.image_id,
                prototypes.rows()
            )));
        }
    }
    if data.iter().all(|s| s.labels.iter().all(Option::is_none)) {
        return Err(Error::domain("every training patch is unlabeled"));
    }

    let mut head = head;
    let mut log = Vec::new();
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut rng = SeededRng::new(derive_seed(config.seed, "train/shuffle"));
    let mut velocity = HeadGrads::zeros_like(&head);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let lr = config.lr_at(step, total);
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            if let Some((value, grads)) = batch_loss(&head, &batch, prototypes, config.loss, config.temperature)? {
                if !value.is_finite() || !grads.all_finite() {
                    return Err(Error::NonFinite(format!("loss {value} at step {step}")));
                }
                sgd_step(&mut head, &mut velocity, &grads, lr, config);
                log::debug!("step {step} epoch {epoch} lr {lr:.6} loss {value:.6}");
                log.push(TrainLogEntry {
                    step,
                    epoch,
                    lr,
                    loss: value,
                });
            } else {
                log::debug!("step {step}: batch has no labeled patches, skipped");
            }
            step += 1;
        }
    }
    Ok((head, log))
}

fn sgd_step(head: &mut AlignmentHead, velocity: &mut HeadGrads, grads: &HeadGrads, lr: f64, config: &TrainConfig) {
    for ((p, v), g) in head.params_mut().iter_mut().zip(&mut velocity.grads).zip(&grads.grads) {
        for ((w, vel), &gr) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = config.momentum * *vel + gr + config.weight_decay * *w;
            *w -= lr * *vel;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::head::HeadSpec;
    use crate::numerics::l2_normalize_rows;

    /// Orthonormal prototypes; every patch of class k carries `e_k` embedded
    /// in a wider input space.
    fn toy(n_images: usize) -> (Vec<TrainSample>, Tensor2D) {
        let k = 3;
        let protos = Tensor2D::identity(k);
        let mut rng = SeededRng::new(3);
        let data = (0..n_images)
            .map(|m| {
                let n = 8;
                let mut x = Tensor2D::zeros(n, 4);
                let mut labels = Vec::new();
                for i in 0..n {
                    let c = rng.below(k as u64) as usize;
                    x.set(i, c, 1.0);
                    labels.push(if i % 4 == 3 { None } else { Some(c as u32) });
                }
                TrainSample {
                    image_id: format!("img{m}"),
                    features: l2_normalize_rows(&x).unwrap(),
                    labels,
                }
            })
            .collect();
        (data, protos)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (data, protos) = toy(4);
        let head = AlignmentHead::init(HeadSpec::linear(4, 3), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, log) = train(head.clone(), &data, &protos, &cfg).unwrap();
        assert_eq!(out, head);
        assert!(log.is_empty());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (data, protos) = toy(7);
        let head = AlignmentHead::init(HeadSpec::linear(4, 3), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(head.clone(), &data, &protos, &cfg).unwrap();
        let b = train(head, &data, &protos, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_decreases() {
        let (data, protos) = toy(10);
        let head = AlignmentHead::init(HeadSpec::linear(4, 3), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 5,
            lr0: 1.0,
            ..TrainConfig::default()
        };
        let (_, log) = train(head, &data, &protos, &cfg).unwrap();
        assert_eq!(log.len(), 50);
        assert!(log.last().unwrap().loss < log[0].loss);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 40), 0.1);
        assert!((cfg.lr_at(20, 40) - 0.05).abs() < 1e-15);
        assert!(cfg.lr_at(40, 40).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_unlabeled() {
        let protos = Tensor2D::identity(3);
        let head = AlignmentHead::init(HeadSpec::linear(4, 3), 1).unwrap();
        assert!(train(head.clone(), &[], &protos, &TrainConfig::default()).is_err());
        let (mut data, _) = toy(2);
        for s in &mut data {
            s.labels.iter_mut().for_each(|l| *l = None);
        }
        assert!(train(head, &data, &protos, &TrainConfig::default()).is_err());
    }

    #[test]
    fn unlabeled_batch_is_skipped() {
        let (mut data, protos) = toy(2);
        data[1].labels.iter_mut().for_each(|l| *l = None);
        let head = AlignmentHead::init(HeadSpec::linear(4, 3), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let (_, log) = train(head, &data, &protos, &cfg).unwrap();
        assert_eq!(log.len(), 1);
    }
}
