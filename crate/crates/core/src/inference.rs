//! MC-dropout predictive distributions, uncertainty-weighted head selection,
//! and dot-product zero-shot logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadId, MultiHeadModel};
use crate::nn::{argmax, Activations};
use crate::seed::{derive_seed, derive_seed2};
use crate::training::{distillation_loss_grad, softmax};

pub const DEFAULT_MC_SAMPLES: usize = 10;
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub head: HeadId,
    pub mc_samples: usize,
    pub mean_probs: Vec<f64>,
    pub std_probs: Vec<f64>,
}

impl PredictiveDistribution {
    /// Per-class mean and (population) standard deviation over passes.
    pub fn from_samples(head: HeadId, samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::validation("need at least two samples"));
        }
        let classes = samples[0].len();
        if samples.iter().any(|s| s.len() != classes) {
            return Err(Error::validation("samples differ in length"));
        }
        // Work with offsets from the first pass so that identical passes
        // give exactly that pass as the mean and exactly zero spread.
        let k = samples.len() as f64;
        let base = &samples[0];
        let mut shift = vec![0.0; classes];
        for s in samples {
            for ((d, p), b) in shift.iter_mut().zip(s).zip(base) {
                *d += (p - b) / k;
            }
        }
        let mut var = vec![0.0; classes];
        for s in samples {
            for (((v, p), b), d) in var.iter_mut().zip(s).zip(base).zip(&shift) {
                let dev = p - b - d;
                *v += dev * dev / k;
            }
        }
        let mean = base.iter().zip(&shift).map(|(b, d)| b + d).collect();
        Ok(PredictiveDistribution {
            head,
            mc_samples: samples.len(),
            mean_probs: mean,
            std_probs: var.into_iter().map(f64::sqrt).collect(),
        })
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.mean_probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.mean_probs.iter().copied().fold(0.0, f64::max)
    }
}

/// Seed of one stochastic pass.
pub fn pass_seed(seed: u64, pass: usize) -> u64 {
    derive_seed2(seed, 0x6d63, pass as u64)
}

fn check_samples(mc_samples: usize) -> Result<()> {
    if mc_samples < 2 {
        return Err(Error::validation(format!("mc_samples must be at least 2, got {mc_samples}")));
    }
    Ok(())
}

/// Softmax rows of one head output.
fn prob_rows(logits: &Activations) -> Vec<Vec<f64>> {
    logits.rows().map(|r| softmax(r, 1.0)).collect()
}

fn distributions(
    head: HeadId,
    mc_samples: usize,
    samples: Vec<Vec<Vec<f64>>>,
    batch: usize,
) -> Result<Vec<PredictiveDistribution>> {
    (0..batch)
        .map(|i| {
            let per_example: Vec<Vec<f64>> = samples.iter().map(|pass| pass[i].clone()).collect();
            debug_assert_eq!(per_example.len(), mc_samples);
            PredictiveDistribution::from_samples(head, &per_example)
        })
        .collect()
}

/// MC-dropout distributions for every row of `x` under one head. The
/// backbone runs once; each pass redraws masks in the tuned layers only.
pub fn mc_predict(
    model: &MultiHeadModel,
    x: &Activations,
    head: HeadId,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    check_samples(mc_samples)?;
    let features = model.backbone_features(x)?;
    mc_predict_features(model, &features, head, mc_samples, seed)
}

pub fn mc_predict_features(
    model: &MultiHeadModel,
    features: &Activations,
    head: HeadId,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    check_samples(mc_samples)?;
    let seeds = pass_seeds(seed, mc_samples);
    let mid = model.shared_forward_passes(&features.repeat(mc_samples), &seeds)?;
    let logits = model.head_forward_passes(&mid, head, &seeds)?;
    distributions(head, mc_samples, pass_blocks(&logits, mc_samples), features.batch)
}

fn pass_seeds(seed: u64, mc_samples: usize) -> Vec<u64> {
    (0..mc_samples).map(|p| pass_seed(seed, p)).collect()
}

/// Splits stacked head output into per-pass probability rows.
fn pass_blocks(logits: &Activations, mc_samples: usize) -> Vec<Vec<Vec<f64>>> {
    let rows = prob_rows(logits);
    let per_pass = rows.len() / mc_samples;
    rows.chunks(per_pass).map(<[Vec<f64>]>::to_vec).collect()
}

/// Distributions for the clean, combined and unclean heads. All passes run
/// as one stacked batch; each pass computes the shared section once and
/// feeds all three heads, with the same masks `mc_predict` would draw.
pub fn mc_predict_all(
    model: &MultiHeadModel,
    x: &Activations,
    mc_samples: usize,
    seed: u64,
) -> Result<[Vec<PredictiveDistribution>; 3]> {
    check_samples(mc_samples)?;
    if !model.has_three_heads() {
        return Err(Error::validation("head selection needs a three-head model"));
    }
    let features = model.backbone_features(x)?;
    let seeds = pass_seeds(seed, mc_samples);
    let mid = model.shared_forward_passes(&features.repeat(mc_samples), &seeds)?;
    let mut samples: [Vec<Vec<Vec<f64>>>; 3] = Default::default();
    for id in HeadId::ALL {
        samples[id.index()] = pass_blocks(&model.head_forward_passes(&mid, id, &seeds)?, mc_samples);
    }
    let [c, m, u] = samples;
    Ok([
        distributions(HeadId::Clean, mc_samples, c, x.batch)?,
        distributions(HeadId::Combined, mc_samples, m, x.batch)?,
        distributions(HeadId::Unclean, mc_samples, u, x.batch)?,
    ])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyAggregation {
    /// Mean of the per-class standard deviations.
    #[default]
    MeanStd,
    /// Standard deviation of the class with the largest mean probability.
    MaxClassStd,
}

pub fn uncertainty_scalar(dist: &PredictiveDistribution) -> f64 {
    uncertainty_with(dist, UncertaintyAggregation::MeanStd)
}

pub fn uncertainty_with(dist: &PredictiveDistribution, aggregation: UncertaintyAggregation) -> f64 {
    match aggregation {
        UncertaintyAggregation::MeanStd => dist.std_probs.iter().sum::<f64>() / dist.std_probs.len().max(1) as f64,
        UncertaintyAggregation::MaxClassStd => dist.std_probs[dist.predicted_class()],
    }
}

/// `sum_i p_i ln((p_i + eps) / (q_i + eps))`.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::validation("distributions differ in length"));
    }
    if p.iter().chain(q).any(|&v| !(v >= 0.0)) {
        return Err(Error::validation("distributions must be nonnegative"));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * ((pi + epsilon) / (qi + epsilon)).ln())
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Uncertainty times KL against the combined head.
    #[default]
    Full,
    NoKld,
    NoUmc,
    MaxLogit,
}

impl Selector {
    pub const ALL: [Selector; 4] = [Selector::Full, Selector::NoKld, Selector::NoUmc, Selector::MaxLogit];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Full => "full",
            Selector::NoKld => "no_kld",
            Selector::NoUmc => "no_umc",
            Selector::MaxLogit => "max_logit",
        }
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown selector `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_head: HeadId,
    pub predicted_class: usize,
    pub score_clean: f64,
    pub score_unclean: f64,
    pub u_clean: f64,
    pub u_unclean: f64,
    pub kl_clean: f64,
    pub kl_unclean: f64,
    pub distribution_used: PredictiveDistribution,
}

/// Routes between the clean and unclean heads given all three
/// distributions. The combined head is only ever a reference.
pub fn select_from(
    clean: &PredictiveDistribution,
    combined: &PredictiveDistribution,
    unclean: &PredictiveDistribution,
    selector: Selector,
    aggregation: UncertaintyAggregation,
) -> Result<SelectionResult> {
    let u_clean = uncertainty_with(clean, aggregation);
    let u_unclean = uncertainty_with(unclean, aggregation);
    let kl_clean = kl_divergence(&combined.mean_probs, &clean.mean_probs, KL_EPSILON)?;
    let kl_unclean = kl_divergence(&combined.mean_probs, &unclean.mean_probs, KL_EPSILON)?;
    let (score_clean, score_unclean) = match selector {
        Selector::Full => (u_clean * kl_clean, u_unclean * kl_unclean),
        Selector::NoKld => (u_clean, u_unclean),
        Selector::NoUmc => (kl_clean, kl_unclean),
        Selector::MaxLogit => (1.0 - clean.max_prob(), 1.0 - unclean.max_prob()),
    };
    let chosen = if score_unclean < score_clean {
        unclean
    } else {
        clean
    };
    Ok(SelectionResult {
        chosen_head: chosen.head,
        predicted_class: chosen.predicted_class(),
        score_clean,
        score_unclean,
        u_clean,
        u_unclean,
        kl_clean,
        kl_unclean,
        distribution_used: chosen.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSettings {
    pub mc_samples: usize,
    pub seed: u64,
    pub selector: Selector,
    pub aggregation: UncertaintyAggregation,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
            selector: Selector::Full,
            aggregation: UncertaintyAggregation::MeanStd,
        }
    }
}

/// Head selection for one input.
pub fn select_head(model: &MultiHeadModel, x: &Activations, mc_samples: usize, seed: u64) -> Result<SelectionResult> {
    if x.batch != 1 {
        return Err(Error::validation("select_head takes a single input"));
    }
    let settings = SelectionSettings {
        mc_samples,
        seed,
        ..Default::default()
    };
    Ok(select_batch(model, x, &settings)?.remove(0))
}

pub fn select_head_variant(
    model: &MultiHeadModel,
    x: &Activations,
    variant: Selector,
    mc_samples: usize,
    seed: u64,
) -> Result<SelectionResult> {
    if x.batch != 1 {
        return Err(Error::validation("select_head_variant takes a single input"));
    }
    let settings = SelectionSettings {
        mc_samples,
        seed,
        selector: variant,
        ..Default::default()
    };
    Ok(select_batch(model, x, &settings)?.remove(0))
}

/// Head selection for every row of a batch.
pub fn select_batch(model: &MultiHeadModel, x: &Activations, settings: &SelectionSettings) -> Result<Vec<SelectionResult>> {
    let [c, m, u] = mc_predict_all(model, x, settings.mc_samples, settings.seed)?;
    (0..x.batch)
        .map(|i| select_from(&c[i], &m[i], &u[i], settings.selector, settings.aggregation))
        .collect()
}

/// Per-example record for downstream routing metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub index: usize,
    pub label: usize,
    pub chosen_head: HeadId,
    pub predicted_class: usize,
    pub score_clean: f64,
    pub score_unclean: f64,
    pub u_clean: f64,
    pub u_unclean: f64,
    pub kl_clean: f64,
    pub kl_unclean: f64,
}

impl SelectionTrace {
    pub fn new(index: usize, label: usize, r: &SelectionResult) -> Self {
        SelectionTrace {
            index,
            label,
            chosen_head: r.chosen_head,
            predicted_class: r.predicted_class,
            score_clean: r.score_clean,
            score_unclean: r.score_unclean,
            u_clean: r.u_clean,
            u_unclean: r.u_unclean,
            kl_clean: r.kl_clean,
            kl_unclean: r.kl_unclean,
        }
    }
}

/// Class scores as dot products between an image embedding and per-class
/// embeddings.
pub fn zero_shot_logits(image_embedding: &[f64], class_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    class_embeddings
        .iter()
        .enumerate()
        .map(|(c, e)| {
            if e.len() != image_embedding.len() {
                return Err(Error::validation(format!(
                    "class {c} embedding has dimension {}, image embedding has {}",
                    e.len(),
                    image_embedding.len()
                )));
            }
            Ok(e.iter().zip(image_embedding).map(|(a, b)| a * b).sum())
        })
        .collect()
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

/// Source of L2-normalized per-class embeddings.
pub trait ClassEmbeddingProvider {
    fn dim(&self) -> usize;
    fn class_embeddings(&self, num_classes: usize) -> Result<Vec<Vec<f64>>>;
}

/// Standard basis vectors, one per class.
#[derive(Clone, Copy, Debug)]
pub struct OrthonormalEmbeddings {
    pub dim: usize,
}

impl ClassEmbeddingProvider for OrthonormalEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn class_embeddings(&self, num_classes: usize) -> Result<Vec<Vec<f64>>> {
        if num_classes > self.dim {
            return Err(Error::validation(format!(
                "{num_classes} orthonormal classes do not fit in {} dimensions",
                self.dim
            )));
        }
        Ok((0..num_classes)
            .map(|c| (0..self.dim).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect())
    }
}

/// Seeded Gaussian directions projected onto the unit sphere.
#[derive(Clone, Copy, Debug)]
pub struct RandomEmbeddings {
    pub dim: usize,
    pub seed: u64,
}

impl ClassEmbeddingProvider for RandomEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn class_embeddings(&self, num_classes: usize) -> Result<Vec<Vec<f64>>> {
        if self.dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok((0..num_classes)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, c as u64));
                let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                l2_normalize(&v)
            })
            .collect())
    }
}

/// Distillation between teacher class logits and student similarity logits.
/// Both are softmaxed over the same class set, so only their relative
/// scales within each vector matter. Returns the loss and its gradient with
/// respect to the student similarities.
pub fn zero_shot_distillation_loss(
    student_similarities: &[f64],
    teacher_logits: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if student_similarities.len() != teacher_logits.len() {
        return Err(Error::validation("teacher and student cover different class sets"));
    }
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature must be positive"));
    }
    Ok(distillation_loss_grad(student_similarities, teacher_logits, temperature))
}
