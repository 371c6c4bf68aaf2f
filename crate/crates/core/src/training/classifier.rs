use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::classification_loss_grad;
use crate::corruptions::AugmentedDataset;
use crate::error::{Error, Result};
use crate::image::{Dataset, Image};
use crate::model::TeacherHandle;
use crate::nn::{argmax, stack, Activations, AdamConfig, Dropout, Network, StackOptimizer};
use crate::seed::derive_seed;

/// Plain supervised training of every layer of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 15,
            learning_rate: 2e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Mini-batch Adam on cross-entropy over all parameters of `net`.
pub fn train_classifier(
    net: &mut Network,
    images: &[&Image],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<Vec<ClassifierEpoch>> {
    cfg.validate("classifier")?;
    if images.len() != labels.len() {
        return Err(Error::validation("images and labels differ in length"));
    }
    if images.is_empty() {
        return Err(Error::validation("no training examples"));
    }
    let classes = net.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
    }
    let mut opt = StackOptimizer::new(AdamConfig::with_lr(cfg.learning_rate), &net.layers);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let batch_images: Vec<&Image> = batch.iter().map(|&i| images[i]).collect();
            let x = Activations::from_images(&batch_images)?;
            net.check_input(&x)?;
            let (logits, cache) = stack::forward_train(&net.layers, &x, Dropout::Off)?;
            let mut grad = Activations::zeros(batch.len(), 1, 1, classes);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for (row, &i) in batch.iter().enumerate() {
                let out = logits.row(row);
                let (loss, g) = classification_loss_grad(out, labels[i]);
                batch_loss += loss;
                if argmax(out) == labels[i] {
                    correct += 1;
                }
                for (d, v) in grad.data[row * classes..(row + 1) * classes].iter_mut().zip(g) {
                    *d = scale * v;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: opt.steps(),
                    snapshot: format!("classifier batch loss {batch_loss}"),
                });
            }
            loss_sum += batch_loss;
            let (grads, _) = stack::backward(&net.layers, &cache, &grad, false);
            opt.step(&mut net.layers, &grads);
        }
        log.push(ClassifierEpoch {
            epoch,
            steps: opt.steps(),
            loss: loss_sum / images.len() as f64,
            train_accuracy: correct as f64 / images.len() as f64,
        });
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherStatus {
    Improved,
    /// Held-out corrupted accuracy did not improve; the handle is still usable.
    NotImproved,
    Unchecked,
}

#[derive(Clone, Debug)]
pub struct RobustifyOutcome {
    pub teacher: TeacherHandle,
    pub status: TeacherStatus,
    pub holdout_before: Option<f64>,
    pub holdout_after: Option<f64>,
    pub log: Vec<ClassifierEpoch>,
}

fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("held-out split is empty"));
    }
    let preds = net.predict(&data.images())?;
    let hits = preds.iter().zip(data.labels()).filter(|(p, l)| **p == *l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Fine-tunes every parameter of the small model on the augmented data and
/// freezes the result. When a held-out corrupted split is given, reports
/// whether its accuracy improved over the starting model.
pub fn robustify_teacher(
    small: &Network,
    data: &AugmentedDataset,
    holdout: Option<&Dataset>,
    cfg: &ClassifierConfig,
) -> Result<RobustifyOutcome> {
    if small.num_classes() != data.num_classes {
        return Err(Error::validation(format!(
            "teacher has {} classes, data has {}",
            small.num_classes(),
            data.num_classes
        )));
    }
    let holdout_before = holdout.map(|h| accuracy(small, h)).transpose()?;
    let mut net = small.clone();
    let images: Vec<&Image> = data.examples.iter().map(|e| &e.input).collect();
    let labels: Vec<usize> = data.examples.iter().map(|e| e.label).collect();
    let log = train_classifier(&mut net, &images, &labels, cfg)?;
    let holdout_after = holdout.map(|h| accuracy(&net, h)).transpose()?;
    let status = match (holdout_before, holdout_after) {
        (Some(before), Some(after)) if after > before => TeacherStatus::Improved,
        (Some(before), Some(after)) => {
            warn!("robust teacher did not improve on the held-out split ({before:.4} -> {after:.4})");
            TeacherStatus::NotImproved
        }
        _ => TeacherStatus::Unchecked,
    };
    Ok(RobustifyOutcome {
        teacher: TeacherHandle::robust(net),
        status,
        holdout_before,
        holdout_after,
        log,
    })
}
