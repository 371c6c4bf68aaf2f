//! Single-file checkpoint archives.
//!
//! Layout: the magic `RDCK`, a little-endian `u32` format version and entry
//! count, then for each entry a `u16` name length, the UTF-8 name, a `u64`
//! payload length and the payload. A SHA-256 digest of everything before it
//! closes the file. Entry `meta` holds JSON metadata; every other entry is a
//! parameter section stored as little-endian `f64` values, layer by layer,
//! weights before biases.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HeadLayout, MultiHeadModel, PartitionConfig, Section};
use crate::nn::{Layer, LayerSpec, Network};

pub const MAGIC: &[u8; 4] = b"RDCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const META: &str = "meta";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Archive {
    pub entries: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(data);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let len = usize::try_from(r.u64()?).map_err(|_| bad("entry too large"))?;
            let data = r.take(len)?.to_vec();
            if entries.insert(name.clone(), data).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Archive { entries })
    }

    fn entry(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

/// Little-endian parameter bytes of a layer stack.
pub fn section_bytes(layers: &[Layer]) -> Vec<u8> {
    let mut out = Vec::with_capacity(layers.iter().map(|l| 8 * l.param_count()).sum());
    for layer in layers {
        for v in layer.weight.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn section_from_bytes(specs: &[LayerSpec], bytes: &[u8], name: &str) -> Result<Vec<Layer>> {
    for spec in specs {
        spec.validate()?;
    }
    let expected = specs
        .iter()
        .try_fold(0usize, |acc, s| acc.checked_add(s.param_count()))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Checkpoint(format!("section `{name}` is too large")))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "section `{name}` has {} bytes, expected {}",
            bytes.len(),
            expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")));
    Ok(specs
        .iter()
        .map(|&spec| {
            let weight: Vec<f64> = values.by_ref().take(spec.weight_len()).collect();
            let bias: Vec<f64> = values.by_ref().take(spec.bias_len()).collect();
            Layer { spec, weight, bias }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Network,
    MultiHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub architecture_hash: String,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub build_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<HeadLayout>,
    pub sections: BTreeMap<String, Vec<LayerSpec>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Network { meta: CheckpointMeta, network: Network },
    MultiHead { meta: CheckpointMeta, model: MultiHeadModel },
}

impl Checkpoint {
    pub fn meta(&self) -> &CheckpointMeta {
        match self {
            Checkpoint::Network { meta, .. } | Checkpoint::MultiHead { meta, .. } => meta,
        }
    }

    pub fn into_network(self) -> Result<Network> {
        match self {
            Checkpoint::Network { network, .. } => Ok(network),
            Checkpoint::MultiHead { .. } => Err(Error::Checkpoint("expected a network checkpoint".into())),
        }
    }

    pub fn into_multihead(self) -> Result<MultiHeadModel> {
        match self {
            Checkpoint::MultiHead { model, .. } => Ok(model),
            Checkpoint::Network { .. } => Err(Error::Checkpoint("expected a multi-head checkpoint".into())),
        }
    }
}

fn specs(layers: &[Layer]) -> Vec<LayerSpec> {
    layers.iter().map(|l| l.spec).collect()
}

fn finish(meta: &CheckpointMeta, mut entries: BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    entries.insert(META.to_string(), json);
    Archive { entries }.encode()
}

pub fn encode_network(network: &Network, config_hash: &str, build_seed: u64) -> Vec<u8> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Network,
        config_hash: config_hash.to_string(),
        architecture_hash: network.architecture().hash(),
        input_shape: network.input_shape,
        num_classes: network.num_classes(),
        build_seed,
        partition: None,
        layout: None,
        sections: BTreeMap::from([("network".to_string(), specs(&network.layers))]),
    };
    finish(&meta, BTreeMap::from([("network".to_string(), section_bytes(&network.layers))]))
}

/// Architecture hash of the base network a multi-head model was cut from.
pub fn multihead_architecture_hash(model: &MultiHeadModel) -> Result<String> {
    Ok(model.compose(model.primary_head())?.architecture().hash())
}

pub fn encode_multihead(model: &MultiHeadModel, config_hash: &str) -> Result<Vec<u8>> {
    let mut sections = BTreeMap::new();
    let mut entries = BTreeMap::new();
    for section in model.sections() {
        let layers = model.section(section)?;
        sections.insert(section.key().to_string(), specs(layers));
        entries.insert(section.key().to_string(), section_bytes(layers));
    }
    let meta = CheckpointMeta {
        kind: CheckpointKind::MultiHead,
        config_hash: config_hash.to_string(),
        architecture_hash: multihead_architecture_hash(model)?,
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        build_seed: model.build_seed(),
        partition: Some(*model.config()),
        layout: Some(model.layout()),
        sections,
    };
    Ok(finish(&meta, entries))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let archive = Archive::decode(bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(archive.entry(META)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let load = |name: &str| -> Result<Vec<Layer>> {
        let specs = meta
            .sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lists no section `{name}`")))?;
        section_from_bytes(specs, archive.entry(name)?, name)
    };
    let expected_entries = meta.sections.len() + 1;
    if archive.entries.len() != expected_entries {
        return Err(Error::Checkpoint("archive entries do not match metadata sections".into()));
    }
    let checkpoint = match meta.kind {
        CheckpointKind::Network => {
            let network = Network::from_layers(meta.input_shape, load("network")?)?;
            Checkpoint::Network { meta, network }
        }
        CheckpointKind::MultiHead => {
            let partition = meta
                .partition
                .ok_or_else(|| Error::Checkpoint("multi-head checkpoint without partition".into()))?;
            let layout = meta
                .layout
                .ok_or_else(|| Error::Checkpoint("multi-head checkpoint without layout".into()))?;
            let mut heads = Vec::new();
            for id in layout.heads() {
                heads.push((id, load(Section::Head(id).key())?));
            }
            let model = MultiHeadModel::from_parts(
                partition,
                layout,
                meta.build_seed,
                meta.input_shape,
                load(Section::Backbone.key())?,
                load(Section::Shared.key())?,
                heads,
            )?;
            Checkpoint::MultiHead { meta, model }
        }
    };
    let m = checkpoint.meta();
    let (arch_hash, classes) = match &checkpoint {
        Checkpoint::Network { network, .. } => (network.architecture().hash(), network.num_classes()),
        Checkpoint::MultiHead { model, .. } => (multihead_architecture_hash(model)?, model.num_classes()),
    };
    if arch_hash != m.architecture_hash || classes != m.num_classes {
        return Err(Error::Checkpoint("metadata does not match stored parameters".into()));
    }
    Ok(checkpoint)
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, optionally insisting on the producing config hash.
pub fn load(path: &Path, expected_config_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let checkpoint = decode(&bytes)?;
    if let Some(expected) = expected_config_hash {
        let found = &checkpoint.meta().config_hash;
        if found != expected {
            return Err(Error::Checkpoint(format!(
                "{} was produced by config {found}, expected {expected}",
                path.display()
            )));
        }
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_with_layout, HeadId};
    use crate::nn::Architecture;

    fn net() -> Network {
        Network::init(&Architecture::teacher((8, 8, 3), 4), 7).unwrap()
    }

    #[test]
    fn network_roundtrip() {
        let n = net();
        let bytes = encode_network(&n, "abc", 7);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.meta().config_hash, "abc");
        assert_eq!(back.into_network().unwrap(), n);
    }

    #[test]
    fn multihead_roundtrip_and_determinism() {
        let cfg = PartitionConfig {
            fraction_tuned: 0.4,
            head_fraction: 0.5,
            dropout_rate: 0.25,
        };
        let model = build_with_layout(&net(), cfg, HeadLayout::Triple, 3).unwrap();
        let a = encode_multihead(&model, "h").unwrap();
        assert_eq!(a, encode_multihead(&model, "h").unwrap());
        let back = decode(&a).unwrap().into_multihead().unwrap();
        assert_eq!(back, model);
        let single = build_with_layout(&net(), cfg, HeadLayout::Single(HeadId::Clean), 3).unwrap();
        let back = decode(&encode_multihead(&single, "h").unwrap()).unwrap();
        assert_eq!(back.into_multihead().unwrap(), single);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_network(&net(), "abc", 0);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(b"").is_err());
    }

    #[test]
    fn load_checks_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rdck");
        save(&path, &encode_network(&net(), "abc", 0)).unwrap();
        assert!(load(&path, Some("abc")).is_ok());
        assert!(matches!(load(&path, Some("xyz")), Err(Error::Checkpoint(_))));
    }
}
