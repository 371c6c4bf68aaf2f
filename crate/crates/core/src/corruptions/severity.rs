use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kinds::{CorruptionKind, Family};
use crate::error::{Error, Result};

pub const SEVERITY_LEVELS: usize = 5;

const BUILTIN: &str = include_str!("../../data/severity_tables.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    version: u32,
    kinds: BTreeMap<String, RawEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    family: Family,
    magnitudes: Vec<f64>,
}

/// Validated per-kind magnitude tables indexed by severity 1..=5.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityTable {
    entries: BTreeMap<CorruptionKind, [f64; SEVERITY_LEVELS]>,
}

impl SeverityTable {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("shipped severity table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and schema-checks a table: known kinds with matching families,
    /// exactly five finite non-negative magnitudes, non-decreasing.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let raw: RawTable = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(format!("severity_table.{}", e.path()), e.inner().message()))?;
        if raw.version != 1 {
            return Err(Error::config(
                "severity_table.version",
                format!("unsupported version {}", raw.version),
            ));
        }
        let mut entries = BTreeMap::new();
        for (name, entry) in raw.kinds {
            let field = format!("severity_table.kinds.{name}");
            let kind: CorruptionKind = name.parse()?;
            if kind.family() != entry.family {
                return Err(Error::config(
                    format!("{field}.family"),
                    format!("{kind} belongs to {:?}", kind.family()),
                ));
            }
            let mags: [f64; SEVERITY_LEVELS] = entry.magnitudes.as_slice().try_into().map_err(|_| {
                Error::config(
                    format!("{field}.magnitudes"),
                    format!("expected {SEVERITY_LEVELS} entries, got {}", entry.magnitudes.len()),
                )
            })?;
            if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
                return Err(Error::config(
                    format!("{field}.magnitudes"),
                    "magnitudes must be finite and non-negative",
                ));
            }
            if mags.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::config(
                    format!("{field}.magnitudes"),
                    "magnitudes must be non-decreasing in severity",
                ));
            }
            entries.insert(kind, mags);
        }
        Ok(SeverityTable { entries })
    }

    pub fn magnitude(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        if !(1..=SEVERITY_LEVELS as u8).contains(&severity) {
            return Err(Error::validation(format!("severity {severity} outside 1..=5")));
        }
        self.entries
            .get(&kind)
            .map(|m| m[severity as usize - 1])
            .ok_or_else(|| Error::UnsupportedCorruption(kind.name().to_string()))
    }

    pub fn kinds(&self) -> impl Iterator<Item = CorruptionKind> + '_ {
        self.entries.keys().copied()
    }

    pub fn magnitudes(&self, kind: CorruptionKind) -> Option<&[f64; SEVERITY_LEVELS]> {
        self.entries.get(&kind)
    }
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_table_covers_every_kind_monotonically() {
        let table = SeverityTable::builtin();
        for &kind in CorruptionKind::ALL {
            let mags = table.magnitudes(kind).expect("kind present");
            assert!(mags.windows(2).all(|w| w[0] <= w[1]), "{kind} not monotone");
            if kind != CorruptionKind::Identity {
                assert!(mags[4] > mags[0], "{kind} is flat");
            }
        }
        assert!(table.magnitudes(CorruptionKind::Identity).unwrap().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn schema_violations_are_reported_with_paths() {
        let decreasing = r#"
            version = 1
            [kinds.fog]
            family = "weather_proxy"
            magnitudes = [0.5, 0.4, 0.6, 0.7, 0.8]
        "#;
        let err = SeverityTable::parse(decreasing).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "severity_table.kinds.fog.magnitudes"));

        let wrong_family = r#"
            version = 1
            [kinds.fog]
            family = "noise"
            magnitudes = [0.1, 0.2, 0.3, 0.4, 0.5]
        "#;
        assert!(SeverityTable::parse(wrong_family).is_err());

        let unknown = r#"
            version = 1
            [kinds.frost]
            family = "weather_proxy"
            magnitudes = [0.1, 0.2, 0.3, 0.4, 0.5]
        "#;
        assert!(matches!(
            SeverityTable::parse(unknown),
            Err(Error::UnsupportedCorruption(_))
        ));

        let short = "version = 1\n[kinds.fog]\nfamily = \"weather_proxy\"\nmagnitudes = [0.1]\n";
        assert!(SeverityTable::parse(short).is_err());

        let extra = "version = 1\nextra = 3\n[kinds]\n";
        assert!(matches!(SeverityTable::parse(extra), Err(Error::Config { .. })));
    }

    #[test]
    fn magnitude_lookup_validates_severity() {
        let t = SeverityTable::builtin();
        assert!(t.magnitude(CorruptionKind::Fog, 0).is_err());
        assert!(t.magnitude(CorruptionKind::Fog, 6).is_err());
        assert!(t.magnitude(CorruptionKind::Fog, 5).is_ok());
    }
}
