use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augmix::{augment_chain, AugMixParams, AugmentationChain};
use super::kinds::CorruptionKind;
use super::severity::SeverityTable;
use super::{corrupt_with, CorruptionSpec};
use crate::error::{Error, Result};
use crate::image::{Dataset, Image};
use crate::seed::derive_seed;

/// Cleanliness gate: clean examples have beta = 1, augmented ones beta = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Clean,
    Augmented,
}

impl Gate {
    pub fn beta(self) -> f64 {
        match self {
            Gate::Clean => 1.0,
            Gate::Augmented => 0.0,
        }
    }

    pub fn is_clean(self) -> bool {
        self == Gate::Clean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Corruption(CorruptionSpec),
    Chain(AugmentationChain),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedExample {
    pub input: Image,
    pub label: usize,
    pub source_index: usize,
    pub seed: u64,
    gate: Gate,
    provenance: Option<Provenance>,
}

impl AugmentedExample {
    pub fn clean(input: Image, label: usize, source_index: usize) -> Self {
        AugmentedExample {
            input,
            label,
            source_index,
            seed: 0,
            gate: Gate::Clean,
            provenance: None,
        }
    }

    pub fn augmented(input: Image, label: usize, source_index: usize, seed: u64, provenance: Provenance) -> Self {
        AugmentedExample {
            input,
            label,
            source_index,
            seed,
            gate: Gate::Augmented,
            provenance: Some(provenance),
        }
    }

    pub fn gate(&self) -> Gate {
        self.gate
    }

    pub fn beta(&self) -> f64 {
        self.gate.beta()
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }
}

/// How augmented examples are produced: each one is either an AugMix chain
/// (with probability `chain_probability`) or a single corruption drawn
/// uniformly from `corruption_kinds` and `severities`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub corruption_kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub chain_probability: f64,
    pub augmix: AugMixParams,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            corruption_kinds: vec![
                CorruptionKind::GaussianNoise,
                CorruptionKind::SpeckleNoise,
                CorruptionKind::GaussianBlur,
                CorruptionKind::Contrast,
                CorruptionKind::Brightness,
            ],
            severities: vec![1, 2, 3, 4, 5],
            chain_probability: 0.4,
            augmix: AugMixParams::default(),
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.chain_probability) {
            return Err(Error::config(
                "augmentation.chain_probability",
                "must lie in [0, 1]",
            ));
        }
        if self.chain_probability < 1.0 && (self.corruption_kinds.is_empty() || self.severities.is_empty()) {
            return Err(Error::config(
                "augmentation.corruption_kinds",
                "corruptions are drawn but no kinds/severities are configured",
            ));
        }
        if self.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::config("augmentation.severities", "severities must lie in 1..=5"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub num_classes: usize,
    pub examples: Vec<AugmentedExample>,
}

/// Every clean example (beta = 1) followed by `round(aug_ratio * n)`
/// augmented copies of clean examples drawn without replacement from a
/// seeded permutation.
pub fn build_augmented_dataset(
    clean: &Dataset,
    policy: &AugmentationPolicy,
    aug_ratio: f64,
    seed: u64,
    table: &SeverityTable,
) -> Result<AugmentedDataset> {
    if clean.is_empty() {
        return Err(Error::validation("clean dataset is empty"));
    }
    if !(aug_ratio > 0.0 && aug_ratio <= 1.0) {
        return Err(Error::validation(format!("aug_ratio {aug_ratio} outside (0, 1]")));
    }
    policy.validate()?;
    let n = clean.len();
    let mut examples: Vec<AugmentedExample> = clean
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| AugmentedExample::clean(e.image.clone(), e.label, i))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = (aug_ratio * n as f64).round() as usize;
    for (i, &src) in order.iter().take(count).enumerate() {
        let ex_seed = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(ex_seed);
        let source = &clean.examples[src];
        let (image, provenance) = if rng.gen::<f64>() < policy.chain_probability {
            let chain = AugmentationChain::sample(&policy.augmix, derive_seed(ex_seed, 1))?;
            (augment_chain(&source.image, &chain)?, Provenance::Chain(chain))
        } else {
            let kind = *policy.corruption_kinds.choose(&mut rng).expect("validated");
            let severity = *policy.severities.choose(&mut rng).expect("validated");
            let spec = CorruptionSpec::new(kind, severity, derive_seed(ex_seed, 2))?;
            (corrupt_with(&source.image, &spec, table)?, Provenance::Corruption(spec))
        };
        examples.push(AugmentedExample::augmented(image, source.label, src, ex_seed, provenance));
    }
    Ok(AugmentedDataset {
        num_classes: clean.num_classes,
        examples,
    })
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub index: usize,
    pub beta: u8,
    pub label: usize,
    pub source_index: usize,
    pub seed: u64,
    pub provenance: Option<Provenance>,
}

pub fn parse_manifest_line(line: &str) -> Result<ManifestRecord> {
    let rec: ManifestRecord = serde_json::from_str(line)?;
    match (rec.beta, &rec.provenance) {
        (1, None) | (0, Some(_)) => Ok(rec),
        (1, Some(_)) => Err(Error::validation("clean record carries provenance")),
        (0, None) => Err(Error::validation("augmented record lacks provenance")),
        (b, _) => Err(Error::validation(format!("beta must be 0 or 1, got {b}"))),
    }
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn clean_count(&self) -> usize {
        self.examples.iter().filter(|e| e.gate().is_clean()).count()
    }

    pub fn augmented_count(&self) -> usize {
        self.len() - self.clean_count()
    }

    /// Deterministic subsample keeping `ceil(a * count)` of the clean and of
    /// the augmented examples, preserving original order.
    pub fn take_fraction(&self, fraction: f64, seed: u64) -> Result<AugmentedDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::validation(format!("data fraction {fraction} outside (0, 1]")));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = vec![false; self.len()];
        for gate in [Gate::Clean, Gate::Augmented] {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.examples[i].gate() == gate).collect();
            let k = (fraction * idx.len() as f64).ceil() as usize;
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(k) {
                keep[i] = true;
            }
        }
        Ok(AugmentedDataset {
            num_classes: self.num_classes,
            examples: self
                .examples
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(e, _)| e.clone())
                .collect(),
        })
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.examples
            .iter()
            .enumerate()
            .map(|(index, e)| ManifestRecord {
                index,
                beta: e.beta() as u8,
                label: e.label,
                source_index: e.source_index,
                seed: e.seed,
                provenance: e.provenance.clone(),
            })
            .collect()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in self.manifest() {
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }
}
