//! Run configuration: TOML files with dotted-path overrides, validation and
//! content hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruptions::{AugmentationPolicy, CorruptionKind, PerturbationKind, SeverityTable};
use crate::data::{DatasetSource, Generator};
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::inference::{Selector, UncertaintyAggregation, DEFAULT_MC_SAMPLES};
use crate::model::PartitionConfig;
use crate::training::{ClassifierConfig, DistillConfig, DistillMode};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "ROBUSTDISTILL_OUT";

/// Corruption kinds used only for evaluation by default.
pub const HELD_OUT_KINDS: [CorruptionKind; 7] = [
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::DefocusBlur,
    CorruptionKind::MotionBlur,
    CorruptionKind::Pixelate,
    CorruptionKind::JpegQuant,
    CorruptionKind::Fog,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSource,
    pub test: DatasetSource,
    pub transfer_train: Option<DatasetSource>,
    pub transfer_test: Option<DatasetSource>,
    /// Replaces the built-in severity table when set.
    pub severity_table: Option<PathBuf>,
}

fn synthetic(generator: Generator, count: usize, seed: u64) -> DatasetSource {
    DatasetSource::Synthetic {
        generator,
        count,
        seed,
        size: 16,
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: synthetic(Generator::Shapes10, 2000, 1),
            test: synthetic(Generator::Shapes10, 500, 2),
            transfer_train: Some(synthetic(Generator::Glyphs6, 600, 3)),
            transfer_test: Some(synthetic(Generator::Glyphs6, 300, 4)),
            severity_table: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub student: ClassifierConfig,
    pub teacher: ClassifierConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            student: ClassifierConfig {
                epochs: 12,
                ..Default::default()
            },
            teacher: ClassifierConfig {
                epochs: 12,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Augmented copies per clean example.
    pub ratio: f64,
    pub policy: AugmentationPolicy,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            ratio: 1.0,
            policy: AugmentationPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub kind: PerturbationKind,
    pub length: usize,
    pub sequences: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            kind: PerturbationKind::NoiseWalk { step_rms: 0.02 },
            length: 10,
            sequences: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub kinds: Vec<CorruptionKind>,
    /// Also evaluate on the training augmentation kinds.
    pub overlap: bool,
    pub mc_samples: usize,
    pub selector: Selector,
    pub aggregation: UncertaintyAggregation,
    pub seed: u64,
    pub perturbation: PerturbationConfig,
    pub probe: ProbeConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            kinds: HELD_OUT_KINDS.to_vec(),
            overlap: false,
            mc_samples: DEFAULT_MC_SAMPLES,
            selector: Selector::Full,
            aggregation: UncertaintyAggregation::MeanStd,
            seed: 0,
            perturbation: PerturbationConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub modes: Vec<DistillMode>,
    pub selectors: Vec<Selector>,
    pub fractions: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: DistillMode::ALL.to_vec(),
            selectors: Selector::ALL.to_vec(),
            fractions: vec![0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    /// Fine-tuning of the small teacher on the augmented data.
    pub teacher: ClassifierConfig,
    pub augmentation: AugmentationConfig,
    pub partition: PartitionConfig,
    pub distill: DistillConfig,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "desk".to_string(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            teacher: ClassifierConfig {
                epochs: 20,
                ..Default::default()
            },
            augmentation: AugmentationConfig::default(),
            partition: PartitionConfig::default(),
            distill: DistillConfig {
                epochs: 60,
                ..Default::default()
            },
            evaluation: EvaluationConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Parses a `--set` value: any TOML literal, otherwise a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like `a.b=value`"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{key}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config("<file>", e.message().to_string())
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty()
            || !self
                .experiment
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::config("experiment", "must be a nonempty [A-Za-z0-9_-] name"));
        }
        self.pretrain.student.validate("pretrain.student")?;
        self.pretrain.teacher.validate("pretrain.teacher")?;
        self.teacher.validate("teacher")?;
        if !(self.augmentation.ratio > 0.0 && self.augmentation.ratio <= 1.0) {
            return Err(Error::config("augmentation.ratio", "must lie in (0, 1]"));
        }
        self.augmentation.policy.validate()?;
        self.partition.validate()?;
        self.distill.validate()?;
        let eval = &self.evaluation;
        if eval.mc_samples < 2 {
            return Err(Error::config("evaluation.mc_samples", "must be at least 2"));
        }
        if eval.kinds.is_empty() {
            return Err(Error::config("evaluation.kinds", "need at least one corruption kind"));
        }
        if eval.perturbation.length < 2 {
            return Err(Error::config("evaluation.perturbation.length", "must be at least 2"));
        }
        if eval.probe.batch_size == 0 {
            return Err(Error::config("evaluation.probe.batch_size", "must be at least 1"));
        }
        if self.data.transfer_train.is_some() != self.data.transfer_test.is_some() {
            return Err(Error::config(
                "data.transfer_test",
                "transfer_train and transfer_test must be given together",
            ));
        }
        for (i, f) in self.ablation.fractions.iter().enumerate() {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::config(format!("ablation.fractions[{i}]"), "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Output root, honouring the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Evaluation kinds, with the training kinds appended in overlap mode.
    pub fn evaluation_kinds(&self) -> Vec<CorruptionKind> {
        let mut kinds = self.evaluation.kinds.clone();
        if self.evaluation.overlap {
            for k in &self.augmentation.policy.corruption_kinds {
                if !kinds.contains(k) {
                    kinds.push(*k);
                }
            }
        }
        kinds
    }

    pub fn severity_table(&self) -> Result<SeverityTable> {
        match &self.data.severity_table {
            Some(path) => SeverityTable::load(path),
            None => Ok(SeverityTable::builtin()),
        }
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        hash_value(self)
    }
}

/// First 16 hex digits of the SHA-256 of a value's canonical JSON (object
/// keys sorted).
pub fn hash_value<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("value serializes to JSON");
    let digest = Sha256::digest(json.to_string().as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::parse(
            "",
            &[
                "distill.mode=apt".into(),
                "partition.fraction_tuned=0.2".into(),
                "experiment=other".into(),
                "evaluation.kinds=[\"fog\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.distill.mode, DistillMode::Apt);
        assert_eq!(cfg.partition.fraction_tuned, 0.2);
        assert_eq!(cfg.experiment, "other");
        assert_eq!(cfg.evaluation.kinds, vec![CorruptionKind::Fog]);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("[distill]\ntemperature = \"hot\"\n", &[]).unwrap_err();
        assert!(err.to_string().contains("distill.temperature"), "{err}");
        let err = RunConfig::parse("[partition]\nbogus = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("partition"), "{err}");
        let err = RunConfig::parse("", &["distill.temperature=0".into()]).unwrap_err();
        assert!(err.to_string().contains("distill.temperature"), "{err}");
    }
}
