//! Cross-entropy and distillation losses, and the gated multi-head objective
//! with gradients routed into the shared section and the heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DistillConfig, TeacherRole, Teachers, Term};
use crate::corruptions::{AugmentedExample, Gate};
use crate::error::{Error, Result};
use crate::model::{DropoutMode, HeadId, MultiHeadModel};
use crate::nn::stack::{self, StackCache};
use crate::nn::{Activations, Dropout, LayerGrad};

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| ((z - max) / temperature).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| (z - max) / temperature - lse).collect()
}

pub fn classification_loss(logits: &[f64], label: usize) -> f64 {
    classification_loss_grad(logits, label).0
}

/// Cross-entropy and its gradient `softmax(logits) - onehot(label)`.
pub fn classification_loss_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits, 1.0);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    ((-logp[label]).max(0.0), grad)
}

pub fn distillation_loss(student: &[f64], teacher: &[f64], temperature: f64) -> f64 {
    distillation_loss_grad(student, teacher, temperature).0
}

/// `T^2 * KL(softmax(teacher/T) || softmax(student/T))` and its gradient with
/// respect to the student logits, `T * (p_student - p_teacher)`.
pub fn distillation_loss_grad(student: &[f64], teacher: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    assert_eq!(student.len(), teacher.len(), "logit vectors differ in length");
    let log_ps = log_softmax(student, temperature);
    let log_pt = log_softmax(teacher, temperature);
    let mut kl = 0.0;
    for (lt, ls) in log_pt.iter().zip(&log_ps) {
        kl += lt.exp() * (lt - ls);
    }
    let grad = log_ps
        .iter()
        .zip(&log_pt)
        .map(|(ls, lt)| temperature * (ls.exp() - lt.exp()))
        .collect();
    ((temperature * temperature * kl).max(0.0), grad)
}

/// Batch-mean loss components, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce_clean: f64,
    pub kd_clean: f64,
    pub ce_aug: f64,
    pub kd_aug: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, other: &LossParts, scale: f64) {
        self.ce_clean += scale * other.ce_clean;
        self.kd_clean += scale * other.kd_clean;
        self.ce_aug += scale * other.ce_aug;
        self.kd_aug += scale * other.kd_aug;
    }
}

/// Parameter gradients for the trainable sections. There is deliberately no
/// backbone entry. A head is `None` when no term in the batch touched it,
/// meaning its gradient is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub shared: Vec<LayerGrad>,
    pub heads: [Option<Vec<LayerGrad>>; 3],
}

impl Gradients {
    pub fn head(&self, id: HeadId) -> Option<&[LayerGrad]> {
        self.heads[id.index()].as_deref()
    }

    /// True when the head received no gradient or an all-zero one.
    pub fn head_is_zero(&self, id: HeadId) -> bool {
        self.head(id).map_or(true, |g| g.iter().all(LayerGrad::is_all_zero))
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub value: f64,
    pub parts: LossParts,
    pub grads: Gradients,
}

/// Teacher logits aligned with the rows of a batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct TeacherTargets<'a> {
    pub clean: Option<&'a Activations>,
    pub robust: Option<&'a Activations>,
}

impl TeacherTargets<'_> {
    fn row(&self, role: TeacherRole, i: usize) -> Result<&[f64]> {
        let acts = match role {
            TeacherRole::Clean => self.clean,
            TeacherRole::Robust => self.robust,
        };
        acts.map(|a| a.row(i))
            .ok_or_else(|| Error::validation(format!("missing {role:?} teacher logits")))
    }
}

/// Gated mean objective over a batch of backbone features:
/// `mean_i [beta_i * L_clean_i + (1 - beta_i) * L_aug_i]`, where each branch
/// is a weighted sum of cross-entropy and distillation terms over the heads
/// the configured mode assigns to that gate.
pub fn objective(
    model: &MultiHeadModel,
    features: &Activations,
    labels: &[usize],
    gates: &[Gate],
    targets: TeacherTargets<'_>,
    cfg: &DistillConfig,
    dropout: DropoutMode,
) -> Result<Objective> {
    let n = features.batch;
    if n == 0 {
        return Err(Error::validation("empty batch"));
    }
    if labels.len() != n || gates.len() != n {
        return Err(Error::validation("labels and gates must match the batch size"));
    }
    if model.layout() != cfg.mode.layout() {
        return Err(Error::validation(format!(
            "mode {:?} needs head layout {:?}, model has {:?}",
            cfg.mode,
            cfg.mode.layout(),
            model.layout()
        )));
    }
    let classes = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
    }
    let lambda_c = cfg.lambda_c;
    let lambda_d = cfg.effective_lambda_d();
    let temperature = cfg.temperature;

    let terms: Vec<Vec<Term>> = gates.iter().map(|&g| cfg.mode.terms(g)).collect();
    let mut used = [false; 3];
    for t in terms.iter().flatten() {
        used[t.head.index()] = true;
    }

    let rate = model.dropout_rate();
    let mut rng = match dropout {
        DropoutMode::Stochastic(seed) if rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let (mid, shared_cache) = stack::forward_train(model.shared(), features, dropout_from(&mut rng, rate))?;
    let mut head_passes: Vec<(HeadId, Activations, StackCache)> = Vec::new();
    for id in HeadId::ALL {
        if used[id.index()] {
            let (logits, cache) = stack::forward_train(model.head(id)?, &mid, dropout_from(&mut rng, rate))?;
            head_passes.push((id, logits, cache));
        }
    }

    let mut parts = LossParts::default();
    let mut grad_out: Vec<Activations> = head_passes
        .iter()
        .map(|(_, logits, _)| Activations::zeros(n, 1, 1, logits.channels))
        .collect();
    let scale = 1.0 / n as f64;
    for i in 0..n {
        for term in &terms[i] {
            let slot = head_passes
                .iter()
                .position(|(id, _, _)| *id == term.head)
                .expect("head pass exists for every used head");
            let logits = head_passes[slot].1.row(i);
            let (ce, dce) = classification_loss_grad(logits, labels[i]);
            let row = &mut grad_out[slot].data[i * classes..(i + 1) * classes];
            for (g, d) in row.iter_mut().zip(&dce) {
                *g += scale * lambda_c * d;
            }
            let mut kd = 0.0;
            if let Some(role) = term.teacher {
                let (value, dkd) = distillation_loss_grad(logits, targets.row(role, i)?, temperature);
                kd = value;
                if lambda_d != 0.0 {
                    for (g, d) in row.iter_mut().zip(&dkd) {
                        *g += scale * lambda_d * d;
                    }
                }
            }
            match gates[i] {
                Gate::Clean => {
                    parts.ce_clean += scale * ce;
                    parts.kd_clean += scale * kd;
                }
                Gate::Augmented => {
                    parts.ce_aug += scale * ce;
                    parts.kd_aug += scale * kd;
                }
            }
        }
    }
    let value = lambda_c * (parts.ce_clean + parts.ce_aug) + lambda_d * (parts.kd_clean + parts.kd_aug);

    let mut heads: [Option<Vec<LayerGrad>>; 3] = Default::default();
    let mut grad_mid: Option<Activations> = None;
    let need_mid = !model.shared().is_empty();
    for ((id, _, cache), dlogits) in head_passes.iter().zip(&grad_out) {
        let (g, dmid) = stack::backward(model.head(*id)?, cache, dlogits, need_mid);
        heads[id.index()] = Some(g);
        if let Some(dmid) = dmid {
            match grad_mid.as_mut() {
                Some(acc) => acc.data.iter_mut().zip(&dmid.data).for_each(|(a, b)| *a += b),
                None => grad_mid = Some(dmid),
            }
        }
    }
    let shared = match grad_mid {
        Some(dmid) => stack::backward(model.shared(), &shared_cache, &dmid, false).0,
        None => model.shared().iter().map(LayerGrad::zeros_like).collect(),
    };
    Ok(Objective {
        value,
        parts,
        grads: Gradients { shared, heads },
    })
}

fn dropout_from(rng: &mut Option<ChaCha8Rng>, rate: f64) -> Dropout<'_> {
    match rng.as_mut() {
        Some(rng) => Dropout::On { rate, rng },
        None => Dropout::Off,
    }
}

/// Teacher logits for a batch of examples, computed with dropout off.
fn teacher_targets(
    examples: &[&AugmentedExample],
    teachers: &Teachers,
    cfg: &DistillConfig,
) -> Result<(Option<Activations>, Option<Activations>)> {
    let images: Vec<_> = examples.iter().map(|e| &e.input).collect();
    let x = Activations::from_images(&images)?;
    let roles = cfg.mode.teacher_roles();
    let clean = match roles.contains(&TeacherRole::Clean) {
        true => Some(teachers.clean.forward(&x)?),
        false => None,
    };
    let robust = match roles.contains(&TeacherRole::Robust) {
        true => Some(teachers.robust.forward(&x)?),
        false => None,
    };
    Ok((clean, robust))
}

fn example_objective(
    examples: &[&AugmentedExample],
    model: &MultiHeadModel,
    teachers: &Teachers,
    cfg: &DistillConfig,
) -> Result<Objective> {
    if examples.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let images: Vec<_> = examples.iter().map(|e| &e.input).collect();
    let features = model.backbone_features(&Activations::from_images(&images)?)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let gates: Vec<Gate> = examples.iter().map(|e| e.gate()).collect();
    let (clean, robust) = teacher_targets(examples, teachers, cfg)?;
    let targets = TeacherTargets {
        clean: clean.as_ref(),
        robust: robust.as_ref(),
    };
    objective(model, &features, &labels, &gates, targets, cfg, DropoutMode::Off)
}

/// Loss on one clean example (beta = 1), dropout off.
pub fn loss_clean(
    example: &AugmentedExample,
    model: &MultiHeadModel,
    teachers: &Teachers,
    cfg: &DistillConfig,
) -> Result<Objective> {
    if example.gate() != Gate::Clean {
        return Err(Error::ContractViolation(
            "loss_clean called on an augmented example".into(),
        ));
    }
    example_objective(&[example], model, teachers, cfg)
}

/// Loss on one augmented example (beta = 0), dropout off.
pub fn loss_aug(
    example: &AugmentedExample,
    model: &MultiHeadModel,
    teachers: &Teachers,
    cfg: &DistillConfig,
) -> Result<Objective> {
    if example.gate() != Gate::Augmented {
        return Err(Error::ContractViolation("loss_aug called on a clean example".into()));
    }
    example_objective(&[example], model, teachers, cfg)
}

/// Gated mean loss over a batch, dropout off.
pub fn loss_total(
    batch: &[AugmentedExample],
    model: &MultiHeadModel,
    teachers: &Teachers,
    cfg: &DistillConfig,
) -> Result<Objective> {
    let refs: Vec<&AugmentedExample> = batch.iter().collect();
    example_objective(&refs, model, teachers, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let v = classification_loss(&[2.0, 0.0, 0.0], 0);
        let e2 = 2f64.exp();
        assert!((v - -(e2 / (e2 + 2.0)).ln()).abs() < 1e-12);
        assert!((classification_loss(&[0.3; 7], 4) - 7f64.ln()).abs() < 1e-12);
        assert!(classification_loss(&[800.0, 0.0, 0.0], 0) < 1e-300);
    }

    #[test]
    fn distillation_closed_forms() {
        let p = 1.0 / (1.0 + (-2f64).exp());
        let q = 1.0 - p;
        let expected = p * (p / q).ln() + q * (q / p).ln();
        let v = distillation_loss(&[0.0, 2.0], &[2.0, 0.0], 1.0);
        assert!((v - expected).abs() < 1e-12);
        assert_eq!(distillation_loss(&[1.0, -2.0, 0.5], &[1.0, -2.0, 0.5], 2.0), 0.0);
        assert!(distillation_loss(&[1.0, -2.0, 0.5], &[4.0, 1.0, 3.5], 2.0) < 1e-14);
    }
}
