//! Synthetic distribution shifts: a catalogue of parameterised corruptions,
//! AugMix-style augmentation chains, augmented training sets and perturbation
//! sequences.

mod augmix;
mod dataset;
mod kinds;
mod perturbation;
mod severity;

use serde::{Deserialize, Serialize};

pub use augmix::{augment_chain, AugMixParams, AugOp, AugmentationChain, OpStep};
pub use dataset::{
    build_augmented_dataset, parse_manifest_line, AugmentationPolicy, AugmentedDataset,
    AugmentedExample, Gate, ManifestRecord, Provenance,
};
pub use kinds::{CorruptionKind, Family};
pub use perturbation::{build_perturbation_sequence, PerturbationKind, PerturbationSequence};
pub use severity::{SeverityTable, SEVERITY_LEVELS};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct CorruptionSpec {
    pub family: Family,
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

#[derive(Deserialize)]
struct RawSpec {
    #[serde(default)]
    family: Option<Family>,
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
}

impl TryFrom<RawSpec> for CorruptionSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let spec = CorruptionSpec::new(raw.kind, raw.severity, raw.seed)?;
        match raw.family {
            Some(f) if f != spec.family => Err(Error::validation(format!(
                "{} is not in family {f:?}",
                spec.kind
            ))),
            _ => Ok(spec),
        }
    }
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=SEVERITY_LEVELS as u8).contains(&severity) {
            return Err(Error::validation(format!(
                "severity {severity} outside 1..={SEVERITY_LEVELS}"
            )));
        }
        Ok(CorruptionSpec {
            family: kind.family(),
            kind,
            severity,
            seed,
        })
    }

    pub fn parse(kind: &str, severity: u8, seed: u64) -> Result<Self> {
        Self::new(kind.parse()?, severity, seed)
    }
}

/// Applies a corruption using the shipped severity tables.
pub fn corrupt(image: &Image, spec: &CorruptionSpec) -> Result<Image> {
    corrupt_with(image, spec, &SeverityTable::builtin())
}

pub fn corrupt_with(image: &Image, spec: &CorruptionSpec, table: &SeverityTable) -> Result<Image> {
    if !image.is_in_unit_range() {
        return Err(Error::validation("image has pixels outside [0, 1]"));
    }
    let magnitude = table.magnitude(spec.kind, spec.severity)?;
    Ok(spec.kind.apply(image, magnitude, spec.seed))
}
