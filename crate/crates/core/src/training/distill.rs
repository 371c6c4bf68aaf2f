use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{objective, LossParts, TeacherTargets};
use super::{DistillConfig, DistillMode, TeacherRole, Teachers};
use crate::corruptions::{AugmentedDataset, Gate};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{DropoutMode, MultiHeadModel, Section};
use crate::nn::{Activations, AdamConfig, StackOptimizer};
use crate::seed::{derive_seed, derive_seed2};

/// Optimizer bookkeeping for one distillation run. Optimizer state exists
/// only for the shared section and the heads.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub running: LossParts,
    optimizers: BTreeMap<Section, StackOptimizer>,
}

impl TrainState {
    fn new(model: &MultiHeadModel, cfg: &DistillConfig) -> Result<Self> {
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        let mut optimizers = BTreeMap::new();
        for section in model.sections() {
            if section != Section::Backbone {
                optimizers.insert(section, StackOptimizer::new(adam, model.section(section)?));
            }
        }
        Ok(TrainState {
            step: 0,
            seed: cfg.seed,
            running: LossParts::default(),
            optimizers,
        })
    }

    pub fn optimized_sections(&self) -> Vec<Section> {
        self.optimizers.keys().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
    pub mode: DistillMode,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub model: MultiHeadModel,
    pub log: Vec<DistillEpoch>,
    pub state: TrainState,
}

fn batched_forward(
    images: &[&Image],
    f: impl Fn(&Activations) -> Result<Activations>,
) -> Result<Activations> {
    let parts = images
        .chunks(256)
        .map(|chunk| f(&Activations::from_images(chunk)?))
        .collect::<Result<Vec<_>>>()?;
    Activations::concat(&parts)
}

/// Trains the shared section and heads on the gated objective. Backbone
/// features and teacher logits are computed once up front, since neither
/// changes during the run.
pub fn distill(
    mut model: MultiHeadModel,
    teachers: &Teachers,
    data: &AugmentedDataset,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if model.layout() != cfg.mode.layout() {
        return Err(Error::validation(format!(
            "mode {} needs head layout {:?}, model has {:?}",
            cfg.mode.name(),
            cfg.mode.layout(),
            model.layout()
        )));
    }
    for (name, teacher) in [("clean", &teachers.clean), ("robust", &teachers.robust)] {
        if teacher.num_classes() != model.num_classes() {
            return Err(Error::validation(format!(
                "{name} teacher has {} classes, student has {}",
                teacher.num_classes(),
                model.num_classes()
            )));
        }
    }
    if data.num_classes != model.num_classes() {
        return Err(Error::validation("dataset and student class sets differ"));
    }
    let mut state = TrainState::new(&model, cfg)?;
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(DistillOutcome {
            model,
            log: Vec::new(),
            state,
        });
    }
    if !model.plan().tuned {
        warn!("model has no tuned layers; distillation leaves it unchanged");
        return Ok(DistillOutcome {
            model,
            log: Vec::new(),
            state,
        });
    }

    let subset = data.take_fraction(cfg.data_fraction, derive_seed(cfg.seed, 0x5eed_f7ac))?;
    let images: Vec<&Image> = subset.examples.iter().map(|e| &e.input).collect();
    let labels: Vec<usize> = subset.examples.iter().map(|e| e.label).collect();
    let gates: Vec<Gate> = subset.examples.iter().map(|e| e.gate()).collect();
    let features = batched_forward(&images, |x| model.backbone_features(x))?;
    let roles = cfg.mode.teacher_roles();
    let clean_logits = match roles.contains(&TeacherRole::Clean) {
        true => Some(batched_forward(&images, |x| teachers.clean.forward(x))?),
        false => None,
    };
    let robust_logits = match roles.contains(&TeacherRole::Robust) {
        true => Some(batched_forward(&images, |x| teachers.robust.forward(x))?),
        false => None,
    };

    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed2(cfg.seed, 1, epoch as u64)));
        let mut epoch_parts = LossParts::default();
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = features.select(batch);
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let batch_gates: Vec<Gate> = batch.iter().map(|&i| gates[i]).collect();
            let clean_batch = clean_logits.as_ref().map(|t| t.select(batch));
            let robust_batch = robust_logits.as_ref().map(|t| t.select(batch));
            let targets = TeacherTargets {
                clean: clean_batch.as_ref(),
                robust: robust_batch.as_ref(),
            };
            let mask_seed = derive_seed2(cfg.seed, 2, state.step);
            let obj = objective(
                &model,
                &x,
                &batch_labels,
                &batch_gates,
                targets,
                cfg,
                DropoutMode::Stochastic(mask_seed),
            )?;
            if !obj.value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: state.step,
                    snapshot: serde_json::to_string(&obj.parts)?,
                });
            }
            let weight = batch.len() as f64 / subset.len() as f64;
            epoch_parts.add_scaled(&obj.parts, weight);
            epoch_total += weight * obj.value;

            let shared_opt = state.optimizers.get_mut(&Section::Shared).expect("shared optimizer");
            shared_opt.step(model.trainable_mut(Section::Shared)?, &obj.grads.shared);
            for id in model.layout().heads() {
                if let Some(grads) = obj.grads.head(id) {
                    let section = Section::Head(id);
                    let opt = state.optimizers.get_mut(&section).expect("head optimizer");
                    opt.step(model.trainable_mut(section)?, grads);
                }
            }
            state.step += 1;
        }
        state.running = epoch_parts;
        log.push(DistillEpoch {
            epoch,
            step: state.step,
            learning_rate: cfg.learning_rate,
            mode: cfg.mode,
            parts: epoch_parts,
            total: epoch_total,
        });
    }
    Ok(DistillOutcome { model, log, state })
}
