//! Teacher robustification and multi-head distillation.

mod classifier;
mod distill;
mod loss;

use serde::{Deserialize, Serialize};

use crate::corruptions::Gate;
use crate::error::{Error, Result};
use crate::model::{HeadId, HeadLayout, TeacherHandle};

pub use classifier::{
    robustify_teacher, train_classifier, ClassifierConfig, ClassifierEpoch, RobustifyOutcome, TeacherStatus,
};
pub use distill::{distill, DistillEpoch, DistillOutcome, TrainState};
pub use loss::{
    classification_loss, classification_loss_grad, distillation_loss, distillation_loss_grad, log_softmax,
    loss_aug, loss_clean, loss_total, objective, softmax, Gradients, LossParts, Objective, TeacherTargets,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Ours,
    Apt,
    OnlyKd,
    CombinedHead,
    SingleTeacher,
    NoKd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherRole {
    Clean,
    Robust,
}

/// One cross-entropy (plus optional distillation) term on one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Term {
    pub head: HeadId,
    pub teacher: Option<TeacherRole>,
}

const fn term(head: HeadId, teacher: Option<TeacherRole>) -> Term {
    Term { head, teacher }
}

impl DistillMode {
    pub const ALL: [DistillMode; 6] = [
        DistillMode::Ours,
        DistillMode::Apt,
        DistillMode::OnlyKd,
        DistillMode::CombinedHead,
        DistillMode::SingleTeacher,
        DistillMode::NoKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Ours => "ours",
            DistillMode::Apt => "apt",
            DistillMode::OnlyKd => "only_kd",
            DistillMode::CombinedHead => "combined_head",
            DistillMode::SingleTeacher => "single_teacher",
            DistillMode::NoKd => "no_kd",
        }
    }

    pub fn layout(self) -> HeadLayout {
        match self {
            DistillMode::Ours | DistillMode::SingleTeacher | DistillMode::NoKd => HeadLayout::Triple,
            DistillMode::Apt | DistillMode::OnlyKd => HeadLayout::Single(HeadId::Clean),
            DistillMode::CombinedHead => HeadLayout::Single(HeadId::Combined),
        }
    }

    /// Loss terms applied to an example with the given gate.
    pub fn terms(self, gate: Gate) -> Vec<Term> {
        use TeacherRole::Robust;
        const C: HeadId = HeadId::Clean;
        const M: HeadId = HeadId::Combined;
        const U: HeadId = HeadId::Unclean;
        let own = Some(TeacherRole::Clean);
        let robust = Some(Robust);
        let clean = gate == Gate::Clean;
        match self {
            DistillMode::Ours | DistillMode::NoKd if clean => vec![term(C, own), term(M, own)],
            DistillMode::Ours | DistillMode::NoKd => vec![term(U, robust), term(M, robust)],
            DistillMode::SingleTeacher if clean => vec![term(C, robust), term(M, robust)],
            DistillMode::SingleTeacher => vec![term(U, robust), term(M, robust)],
            DistillMode::Apt => vec![term(C, None)],
            DistillMode::OnlyKd => vec![term(C, robust)],
            DistillMode::CombinedHead if clean => vec![term(M, own)],
            DistillMode::CombinedHead => vec![term(M, robust)],
        }
    }

    /// Teachers whose logits this mode consumes.
    pub fn teacher_roles(self) -> Vec<TeacherRole> {
        let mut roles = Vec::new();
        for gate in [Gate::Clean, Gate::Augmented] {
            for t in self.terms(gate) {
                if let Some(role) = t.teacher {
                    if !roles.contains(&role) {
                        roles.push(role);
                    }
                }
            }
        }
        roles
    }
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown distillation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub data_fraction: f64,
    pub seed: u64,
    pub mode: DistillMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            lambda_c: 1.0,
            lambda_d: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            data_fraction: 0.5,
            seed: 0,
            mode: DistillMode::Ours,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::config(format!("distill.{name}"), msg));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return field("temperature", "must be positive");
        }
        if !(self.lambda_c >= 0.0 && self.lambda_d >= 0.0) {
            return field("lambda_c", "loss weights must be nonnegative");
        }
        if self.lambda_c + self.lambda_d <= 0.0 {
            return field("lambda_d", "lambda_c + lambda_d must be positive");
        }
        if self.lambda_c + self.effective_lambda_d() <= 0.0 {
            return field("lambda_c", "mode trains without distillation, so lambda_c must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be at least 1");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return field("data_fraction", "must lie in (0, 1]");
        }
        Ok(())
    }

    /// Distillation weight after applying the mode: modes without
    /// distillation train on cross-entropy alone.
    pub fn effective_lambda_d(&self) -> f64 {
        match self.mode {
            DistillMode::Apt | DistillMode::NoKd => 0.0,
            _ => self.lambda_d,
        }
    }
}

/// The two distillation targets.
#[derive(Clone, Debug)]
pub struct Teachers {
    pub clean: TeacherHandle,
    pub robust: TeacherHandle,
}
