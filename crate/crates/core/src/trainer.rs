//! Mini-batch training of the full model with summed per-bin cross-entropy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::hpp::{hpm_loss, predict_bin};
use crate::model::HpmModel;
use crate::nn::SgdMomentum;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::invalid("normalisation mean and std must have equal, non-zero length"));
        }
        if let Some(s) = self.std.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("normalisation std {s} must be positive")));
        }
        Ok(())
    }

    /// Applies to a `(C, H, W)` image.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let [c, h, w] = chw(image)?;
        if c != self.mean.len() {
            return Err(Error::shape(format!(
                "image has {c} channels, normalisation has {}",
                self.mean.len()
            )));
        }
        let mut out = image.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

fn chw(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(Error::shape(format!("expected a (C, H, W) image, got {s:?}"))),
    }
}

/// Reverses the width axis of a `(C, H, W)` image.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let [_, _, w] = chw(image)?;
    let mut out = image.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    Ok(out)
}

/// Optional mirror (probability one half when enabled) followed by normalisation.
pub fn augment(image: &Tensor, rng: &mut Rng, flip_augment: bool, norm: &Normalization) -> Result<Tensor> {
    if flip_augment && rng.bernoulli(0.5) {
        norm.apply(&flip_horizontal(image)?)
    } else {
        norm.apply(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f32,
    /// First 0-based epoch trained at `base_lr / 10`.
    pub decay_epoch: usize,
    pub momentum: f32,
    pub backbone_lr_mult: f32,
    pub seed: u64,
    pub flip_augment: bool,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            base_lr: 0.001,
            decay_epoch: 20,
            momentum: 0.9,
            backbone_lr_mult: 1.0,
            seed: 7,
            flip_augment: true,
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.decay_epoch > self.epochs {
            return Err(Error::invalid(format!(
                "decay_epoch {} exceeds epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.backbone_lr_mult > 0.0) {
            return Err(Error::invalid("backbone_lr_mult must be positive"));
        }
        self.normalization.validate()?;
        SgdMomentum::new(self.base_lr, self.momentum, self.decay_epoch).map(|_| ())
    }

    pub fn optimizer(&self) -> Result<SgdMomentum> {
        SgdMomentum::new(self.base_lr, self.momentum, self.decay_epoch)
    }
}

/// Training images with dense class labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Person id of each class index.
    pub class_ids: Vec<i64>,
}

impl TrainData {
    /// Maps the person ids present in `samples` (junk excluded) to classes in
    /// ascending id order.
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let kept: Vec<&&Sample> = samples.iter().filter(|s| s.person_id >= 0).collect();
        if kept.is_empty() {
            return Err(Error::Data("no labelled training images".into()));
        }
        let classes: BTreeMap<i64, usize> = kept
            .iter()
            .map(|s| s.person_id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, pid)| (pid, i))
            .collect();
        Ok(TrainData {
            images: kept.iter().map(|s| s.image.clone()).collect(),
            labels: kept.iter().map(|s| classes[&s.person_id]).collect(),
            class_ids: classes.keys().copied().collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-sample mean of the loss summed over all branches.
    pub mean_loss: f64,
    /// Running training accuracy of each branch, in bin order.
    pub branch_accuracy: Vec<f64>,
    pub lr: f32,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// `epoch=E loss=L lr=R acc_I_J=A ...`; wall time is left out so logs
    /// are reproducible.
    pub fn to_line(&self, bins: &[(usize, usize)]) -> String {
        let mut s = format!("epoch={} loss={:.6} lr={}", self.epoch, self.mean_loss, self.lr);
        for ((i, j), a) in bins.iter().zip(&self.branch_accuracy) {
            write!(s, " acc_{i}_{j}={a:.4}").unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self, bins: &[(usize, usize)]) -> String {
        self.records
            .iter()
            .map(|r| r.to_line(bins) + "\n")
            .collect()
    }
}

fn check_labels(model: &HpmModel, data: &TrainData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let p = model.pyramid().num_classes;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= p) {
        return Err(Error::invalid(format!("label {bad} out of range for {p} classes")));
    }
    Ok(())
}

fn stack(images: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec(&shape, data)
}

/// One pass over `data` in a seed-derived order, one optimizer step per
/// mini-batch. The last partial batch is kept.
pub fn train_epoch(
    model: &mut HpmModel,
    data: &TrainData,
    opt: &mut SgdMomentum,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &Rng,
) -> Result<EpochRecord> {
    check_labels(model, data)?;
    let start = Instant::now();
    let mut rng = rng.child(&format!("epoch/{epoch}"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);

    let bins = model.pyramid().total_bins();
    let mut correct = vec![0usize; bins];
    let mut loss_sum = 0.0f64;
    let nb = model.backbone_param_count();
    for batch in order.chunks(cfg.batch_size) {
        let images = batch
            .iter()
            .map(|&i| augment(&data.images[i], &mut rng, cfg.flip_augment, &cfg.normalization))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let state = model.forward_train(&stack(images)?)?;
        let (loss, mut grads) = hpm_loss(&state.bins.logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
        }
        loss_sum += f64::from(loss);
        for (b, logits) in state.bins.logits.iter().enumerate() {
            let p = logits.shape()[1];
            correct[b] += logits
                .data()
                .chunks(p)
                .zip(&labels)
                .filter(|(row, &l)| predict_bin(row) == l)
                .count();
        }
        let inv = 1.0 / batch.len() as f32;
        grads.iter_mut().for_each(|g| g.scale(inv));
        let mg = model.backward(&state, &grads)?;
        let grad_refs = mg.tensors();
        let mults: Vec<f32> = (0..grad_refs.len())
            .map(|i| if i < nb { cfg.backbone_lr_mult } else { 1.0 })
            .collect();
        let mut params = model.params_mut();
        opt.step(&mut params, &grad_refs, &mults, epoch)?;
    }
    let n = data.len() as f64;
    Ok(EpochRecord {
        epoch,
        mean_loss: loss_sum / n,
        branch_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        lr: opt.lr_at(epoch),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut HpmModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&HpmModel, &EpochRecord) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut opt = cfg.optimizer()?;
    let rng = Rng::new(cfg.seed).child("train");
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let rec = train_epoch(model, data, &mut opt, cfg, epoch, &rng)?;
        on_epoch(model, &rec)?;
        log.records.push(rec);
    }
    Ok(log)
}

/// Un-augmented forward pass over `data` in batches: per-branch accuracy and
/// per-sample mean of the summed loss.
pub fn evaluate_classification(
    model: &HpmModel,
    data: &TrainData,
    norm: &Normalization,
    batch_size: usize,
) -> Result<(Vec<f64>, f64)> {
    check_labels(model, data)?;
    let bins = model.pyramid().total_bins();
    let mut correct = vec![0usize; bins];
    let mut loss_sum = 0.0f64;
    let idx: Vec<usize> = (0..data.len()).collect();
    for batch in idx.chunks(batch_size.max(1)) {
        let images = batch
            .iter()
            .map(|&i| norm.apply(&data.images[i]))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let f = model.feature_maps(&stack(images)?)?;
        let out = model.head.forward(&f)?;
        let (loss, _) = hpm_loss(&out.logits, &labels)?;
        loss_sum += f64::from(loss);
        for (b, logits) in out.logits.iter().enumerate() {
            let p = logits.shape()[1];
            correct[b] += logits
                .data()
                .chunks(p)
                .zip(&labels)
                .filter(|(row, &l)| predict_bin(row) == l)
                .count();
        }
    }
    let n = data.len() as f64;
    Ok((correct.iter().map(|&c| c as f64 / n).collect(), loss_sum / n))
}
