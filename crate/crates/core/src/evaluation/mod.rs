//! Robustness metrics, routing statistics, linear probes and ablation tables.

mod plot;
mod table;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruptions::{build_perturbation_sequence, corrupt_with, CorruptionKind, CorruptionSpec, PerturbationKind,
    PerturbationSequence, SeverityTable, SEVERITY_LEVELS};
use crate::error::{Error, Result};
use crate::image::{Dataset, Example, Image};
use crate::inference::{mc_predict_all, select_from, PredictiveDistribution, SelectionResult, SelectionSettings,
    SelectionTrace};
use crate::model::{DropoutMode, HeadId, MultiHeadModel};
use crate::nn::{argmax, Activations, AdamConfig, Layer, LayerSpec, StackOptimizer};
use crate::seed::{derive_seed, derive_seed2};
use crate::training::classification_loss_grad;

pub use plot::{ablation_bars_svg, severity_curves_svg};
pub use table::{ablation_table, AblationRow, AblationTable};

/// Accuracy per corruption kind at severities 1 through 5.
pub type SeveritySweep = BTreeMap<CorruptionKind, [f64; SEVERITY_LEVELS]>;

const CHUNK: usize = 256;

pub fn evaluate_accuracy(
    predict: impl Fn(&[&Image]) -> Result<Vec<usize>>,
    dataset: &Dataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let mut hits = 0usize;
    for chunk in dataset.examples.chunks(CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|e| &e.image).collect();
        let preds = predict(&images)?;
        if preds.len() != chunk.len() {
            return Err(Error::validation("predictor returned the wrong number of predictions"));
        }
        hits += preds.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Seed used to corrupt example `index` with `kind`; shared across severities
/// so that only the magnitude changes from one level to the next.
pub fn corruption_seed(seed: u64, kind: CorruptionKind, index: usize) -> u64 {
    derive_seed2(seed, kind as u64, index as u64)
}

/// The test set with every example corrupted by `kind` at `severity`.
pub fn corrupted_copy(
    clean: &Dataset,
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
    table: &SeverityTable,
) -> Result<Dataset> {
    let examples = clean
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let spec = CorruptionSpec::new(kind, severity, corruption_seed(seed, kind, i))?;
            Ok(Example {
                image: corrupt_with(&e.image, &spec, table)?,
                label: e.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("{}-{}-{}", clean.name, kind, severity), clean.num_classes, examples)
}

/// All corrupted copies of a test set, keyed by kind and indexed by severity.
pub fn corruption_suite(
    clean: &Dataset,
    kinds: &[CorruptionKind],
    seed: u64,
    table: &SeverityTable,
) -> Result<BTreeMap<CorruptionKind, Vec<Dataset>>> {
    let mut out = BTreeMap::new();
    for &kind in kinds {
        let sets = (1..=SEVERITY_LEVELS as u8)
            .map(|s| corrupted_copy(clean, kind, s, seed, table))
            .collect::<Result<Vec<_>>>()?;
        out.insert(kind, sets);
    }
    Ok(out)
}

pub fn severity_sweep(
    predict: impl Fn(&[&Image]) -> Result<Vec<usize>>,
    clean_test: &Dataset,
    kinds: &[CorruptionKind],
    seed: u64,
    table: &SeverityTable,
) -> Result<SeveritySweep> {
    let suite = corruption_suite(clean_test, kinds, seed, table)?;
    sweep_suite(&predict, &suite)
}

pub fn sweep_suite(
    predict: &impl Fn(&[&Image]) -> Result<Vec<usize>>,
    suite: &BTreeMap<CorruptionKind, Vec<Dataset>>,
) -> Result<SeveritySweep> {
    let mut out = SeveritySweep::new();
    for (&kind, sets) in suite {
        let mut row = [0.0; SEVERITY_LEVELS];
        for (slot, set) in row.iter_mut().zip(sets) {
            *slot = evaluate_accuracy(predict, set)?;
        }
        out.insert(kind, row);
    }
    Ok(out)
}

/// Mean accuracy over every kind and severity.
pub fn mean_sweep_accuracy(sweep: &SeveritySweep) -> f64 {
    let n = sweep.len() * SEVERITY_LEVELS;
    if n == 0 {
        return 0.0;
    }
    sweep.values().flatten().sum::<f64>() / n as f64
}

/// Mean corruption error relative to a baseline, times 100.
pub fn mce(model: &SeveritySweep, baseline: &SeveritySweep) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::validation("no corruption kinds to compare"));
    }
    let mut total = 0.0;
    for (kind, accs) in model {
        let base = baseline
            .get(kind)
            .ok_or_else(|| Error::validation(format!("baseline lacks corruption kind {kind}")))?;
        let err: f64 = accs.iter().map(|a| 1.0 - a).sum();
        let base_err: f64 = base.iter().map(|a| 1.0 - a).sum();
        if base_err == 0.0 {
            return Err(Error::ZeroBaseline(kind.to_string()));
        }
        total += err / base_err;
    }
    Ok(100.0 * total / model.len() as f64)
}

/// Flip rate of one prediction sequence.
pub fn flip_rate(predictions: &[usize]) -> Result<f64> {
    if predictions.len() < 2 {
        return Err(Error::validation("flip rate needs at least two frames"));
    }
    let flips = predictions.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(flips as f64 / (predictions.len() - 1) as f64)
}

pub fn mfr(
    predict: impl Fn(&[&Image]) -> Result<Vec<usize>>,
    sequences: &[PerturbationSequence],
) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::validation("no perturbation sequences"));
    }
    let mut total = 0.0;
    for seq in sequences {
        let frames: Vec<&Image> = seq.frames.iter().collect();
        total += flip_rate(&predict(&frames)?)?;
    }
    Ok(total / sequences.len() as f64)
}

/// One perturbation sequence per test image.
pub fn perturbation_suite(
    clean: &Dataset,
    kind: PerturbationKind,
    length: usize,
    limit: usize,
    seed: u64,
) -> Result<Vec<PerturbationSequence>> {
    clean
        .examples
        .iter()
        .take(limit)
        .enumerate()
        .map(|(i, e)| build_perturbation_sequence(&e.image, kind, length, derive_seed(seed, i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Clean,
    Shifted,
}

impl Split {
    pub fn correct_head(self) -> HeadId {
        match self {
            Split::Clean => HeadId::Clean,
            Split::Shifted => HeadId::Unclean,
        }
    }
}

/// Fraction of traces routed to the split's appropriate head.
pub fn f_correct(traces: &[SelectionTrace], split: Split) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::validation("no selection traces"));
    }
    let hits = traces.iter().filter(|t| t.chosen_head == split.correct_head()).count();
    Ok(hits as f64 / traces.len() as f64)
}

pub fn head_usage(traces: &[SelectionTrace]) -> BTreeMap<HeadId, usize> {
    let mut out = BTreeMap::new();
    for t in traces {
        *out.entry(t.chosen_head).or_insert(0) += 1;
    }
    out
}

/// Plain prediction with a model's primary head, dropout off.
pub fn predict_primary(model: &MultiHeadModel, images: &[&Image]) -> Result<Vec<usize>> {
    predict_head(model, images, model.primary_head())
}

pub fn predict_head(model: &MultiHeadModel, images: &[&Image], head: HeadId) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let logits = model.forward_head(&Activations::from_images(chunk)?, head, DropoutMode::Off)?;
        out.extend(logits.rows().map(argmax));
    }
    Ok(out)
}

/// MC distributions of the three heads for every example, computed in
/// chunks. Selector variants can then be compared on identical passes.
pub fn head_distributions(
    model: &MultiHeadModel,
    dataset: &Dataset,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<[PredictiveDistribution; 3]>> {
    let mut out = Vec::with_capacity(dataset.len());
    for (c, chunk) in dataset.examples.chunks(CHUNK).enumerate() {
        let images: Vec<&Image> = chunk.iter().map(|e| &e.image).collect();
        let x = Activations::from_images(&images)?;
        let [clean, comb, unclean] = mc_predict_all(model, &x, mc_samples, derive_seed(seed, c as u64))?;
        for ((a, b), d) in clean.into_iter().zip(comb).zip(unclean) {
            out.push([a, b, d]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvaluation {
    pub accuracy: f64,
    pub traces: Vec<SelectionTrace>,
}

pub fn evaluate_selection_from(
    dists: &[[PredictiveDistribution; 3]],
    labels: &[usize],
    settings: &SelectionSettings,
) -> Result<SelectionEvaluation> {
    if dists.is_empty() || dists.len() != labels.len() {
        return Err(Error::validation("need one label per distribution triple"));
    }
    let mut traces = Vec::with_capacity(dists.len());
    let mut hits = 0usize;
    for (i, ([c, m, u], &label)) in dists.iter().zip(labels).enumerate() {
        let r: SelectionResult = select_from(c, m, u, settings.selector, settings.aggregation)?;
        if r.predicted_class == label {
            hits += 1;
        }
        traces.push(SelectionTrace::new(i, label, &r));
    }
    Ok(SelectionEvaluation {
        accuracy: hits as f64 / dists.len() as f64,
        traces,
    })
}

pub fn evaluate_selection(
    model: &MultiHeadModel,
    dataset: &Dataset,
    settings: &SelectionSettings,
) -> Result<SelectionEvaluation> {
    let dists = head_distributions(model, dataset, settings.mc_samples, settings.seed)?;
    evaluate_selection_from(&dists, &dataset.labels(), settings)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trains one linear layer on fixed features and returns test accuracy.
pub fn linear_probe(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (train_x, train_y) = train;
    let (test_x, test_y) = test;
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::validation("probe needs nonempty train and test sets"));
    }
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::validation("features and labels differ in length"));
    }
    let dim = train_x[0].len();
    if dim == 0 || train_x.iter().chain(test_x).any(|f| f.len() != dim) {
        return Err(Error::validation("features have inconsistent dimensions"));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= num_classes) {
        return Err(Error::validation("probe label out of range"));
    }
    let spec = LayerSpec::Dense {
        inputs: dim,
        outputs: num_classes,
        relu: false,
        residual: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = vec![Layer::init(spec, &mut rng)?];
    let mut opt = StackOptimizer::new(AdamConfig::with_lr(cfg.learning_rate), &layers);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64 + 1)));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| train_x[i].clone()).collect();
            let x = Activations::from_rows(&rows)?;
            let (logits, cache) = layers[0].forward_train(&x)?;
            let mut grad = Activations::zeros(batch.len(), 1, 1, num_classes);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let (_, g) = classification_loss_grad(logits.row(r), train_y[i]);
                for (d, v) in grad.data[r * num_classes..(r + 1) * num_classes].iter_mut().zip(g) {
                    *d = scale * v;
                }
            }
            let (g, _) = layers[0].backward(&cache, &grad, false);
            opt.step(&mut layers, &[g]);
        }
    }
    let logits = layers[0].forward(&Activations::from_rows(test_x)?)?;
    let hits = logits.rows().zip(test_y).filter(|(l, &y)| argmax(l) == y).count();
    Ok(hits as f64 / test_x.len() as f64)
}

/// Linear-probe accuracy of a frozen feature extractor on a labelled
/// transfer task.
pub fn transfer_probe(
    features: impl Fn(&[&Image]) -> Result<Vec<Vec<f64>>>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.num_classes != test.num_classes {
        return Err(Error::validation("probe train and test sets have different class counts"));
    }
    let extract = |d: &Dataset| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(d.len());
        for chunk in d.examples.chunks(CHUNK) {
            let images: Vec<&Image> = chunk.iter().map(|e| &e.image).collect();
            out.extend(features(&images)?);
        }
        Ok(out)
    };
    let (train_x, test_x) = (extract(train)?, extract(test)?);
    linear_probe(
        (&train_x, &train.labels()),
        (&test_x, &test.labels()),
        train.num_classes,
        cfg,
    )
}

/// Penultimate features of a model: the input to its final logit layer
/// along the given head, dropout off.
pub fn penultimate_features(model: &MultiHeadModel, head: HeadId, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let x = Activations::from_images(images)?;
    let feats = model.backbone_features(&x)?;
    let mut cur = model.shared_forward(&feats, DropoutMode::Off)?;
    let layers = model.head(head)?;
    for layer in &layers[..layers.len() - 1] {
        cur = layer.forward(&cur)?;
    }
    Ok(cur.rows().map(<[f64]>::to_vec).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config_hash: String,
    pub mode: String,
    pub selector: Option<String>,
    pub fraction_tuned: f64,
    pub clean_accuracy: f64,
    pub per_corruption: BTreeMap<String, Vec<f64>>,
    pub mean_corrupted_accuracy: f64,
    pub mce: Option<f64>,
    pub mfr: Option<f64>,
    pub f_correct_clean: Option<f64>,
    pub f_correct_shifted: Option<f64>,
    pub head_usage: BTreeMap<String, BTreeMap<String, usize>>,
}

impl RobustnessReport {
    pub fn set_sweep(&mut self, sweep: &SeveritySweep) {
        self.per_corruption = sweep.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect();
        self.mean_corrupted_accuracy = mean_sweep_accuracy(sweep);
    }

    /// The sweep back in typed form.
    pub fn sweep(&self) -> Result<SeveritySweep> {
        self.per_corruption
            .iter()
            .map(|(k, v)| {
                let kind: CorruptionKind = k.parse()?;
                let row: [f64; SEVERITY_LEVELS] = v
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::validation(format!("{k} has {} severities", v.len())))?;
                Ok((kind, row))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let fractions = [Some(self.clean_accuracy), self.f_correct_clean, self.f_correct_shifted, self.mfr];
        if fractions.iter().flatten().any(|&v| !in_unit(v)) {
            return Err(Error::validation("report fraction outside [0, 1]"));
        }
        for (k, v) in &self.per_corruption {
            if v.len() != SEVERITY_LEVELS || v.iter().any(|&a| !in_unit(a)) {
                return Err(Error::validation(format!("bad severity row for {k}")));
            }
        }
        Ok(())
    }

    /// Metric columns used in ablation tables.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("clean_acc".to_string(), self.clean_accuracy);
        m.insert("corrupted_acc".to_string(), self.mean_corrupted_accuracy);
        let optional = [
            ("mce", self.mce),
            ("mfr", self.mfr),
            ("f_correct_clean", self.f_correct_clean),
            ("f_correct_shifted", self.f_correct_shifted),
        ];
        for (name, v) in optional {
            if let Some(v) = v {
                m.insert(name.to_string(), v);
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub dataset: String,
    pub probe_accuracy_original: f64,
    pub probe_accuracy_distilled: f64,
    pub delta: f64,
}

impl TransferReport {
    pub fn new(dataset: impl Into<String>, original: f64, distilled: f64) -> Self {
        TransferReport {
            dataset: dataset.into(),
            probe_accuracy_original: original,
            probe_accuracy_distilled: distilled,
            delta: distilled - original,
        }
    }
}
