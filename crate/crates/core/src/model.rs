//! Partitioned multi-head student and frozen teacher handles.
//!
//! A base network of depth N is split into a frozen backbone (the first
//! `N - t` layers), a shared tuned section and a head section replicated per
//! prediction head. Dropout is applied to the input of every tuned layer.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{stack, Activations, Dropout, Layer, Network};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_fraction_tuned")]
    pub fraction_tuned: f64,
    #[serde(default = "default_head_fraction")]
    pub head_fraction: f64,
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
}

fn default_fraction_tuned() -> f64 {
    0.1
}

fn default_head_fraction() -> f64 {
    0.2
}

fn default_dropout_rate() -> f64 {
    0.25
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            fraction_tuned: default_fraction_tuned(),
            head_fraction: default_head_fraction(),
            dropout_rate: default_dropout_rate(),
        }
    }
}

/// Rounds to the nearest integer with exact halves going down.
fn round_half_down(x: f64) -> usize {
    (x - 0.5 - 1e-9).ceil().max(0.0) as usize
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction_tuned) {
            return Err(Error::config("partition.fraction_tuned", "must lie in [0, 1]"));
        }
        if !(self.head_fraction > 0.0 && self.head_fraction < 1.0) {
            return Err(Error::config("partition.head_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("partition.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Layer counts for a base network of the given depth.
    pub fn plan(&self, depth: usize) -> Result<PartitionPlan> {
        self.validate()?;
        if depth < 3 {
            return Err(Error::validation(format!("base model has {depth} layers, need at least 3")));
        }
        if self.fraction_tuned == 0.0 {
            return Ok(PartitionPlan {
                frozen: depth - 1,
                shared: 0,
                head: 1,
                tuned: false,
            });
        }
        let tuned = round_half_down(self.fraction_tuned * depth as f64);
        if tuned == 0 {
            return Err(Error::config(
                "partition.fraction_tuned",
                format!(
                    "{} of {depth} layers rounds to zero tuned layers",
                    self.fraction_tuned
                ),
            ));
        }
        let head = round_half_down(self.head_fraction * tuned as f64).clamp(1, tuned);
        Ok(PartitionPlan {
            frozen: depth - tuned,
            shared: tuned - head,
            head,
            tuned: true,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub frozen: usize,
    pub shared: usize,
    pub head: usize,
    /// False for the fully frozen (fraction 0) model, whose heads are copies
    /// of the original classifier layer and cannot be updated.
    pub tuned: bool,
}

impl PartitionPlan {
    pub fn depth(&self) -> usize {
        self.frozen + self.shared + self.head
    }

    pub fn tuned_layers(&self) -> usize {
        if self.tuned {
            self.shared + self.head
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadId {
    Clean,
    Combined,
    Unclean,
}

impl HeadId {
    pub const ALL: [HeadId; 3] = [HeadId::Clean, HeadId::Combined, HeadId::Unclean];

    pub fn name(self) -> &'static str {
        match self {
            HeadId::Clean => "clean",
            HeadId::Combined => "combined",
            HeadId::Unclean => "unclean",
        }
    }

    pub fn index(self) -> usize {
        match self {
            HeadId::Clean => 0,
            HeadId::Combined => 1,
            HeadId::Unclean => 2,
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named parameter sections, used for update routing and checkpoint keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Backbone,
    Shared,
    Head(HeadId),
}

impl Section {
    pub fn key(self) -> &'static str {
        match self {
            Section::Backbone => "backbone",
            Section::Shared => "shared",
            Section::Head(HeadId::Clean) => "head_c",
            Section::Head(HeadId::Combined) => "head_m",
            Section::Head(HeadId::Unclean) => "head_u",
        }
    }

    pub fn from_key(key: &str) -> Option<Section> {
        Some(match key {
            "backbone" => Section::Backbone,
            "shared" => Section::Shared,
            "head_c" => Section::Head(HeadId::Clean),
            "head_m" => Section::Head(HeadId::Combined),
            "head_u" => Section::Head(HeadId::Unclean),
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// Clean, combined and unclean heads.
    Triple,
    /// One head only, identified by the given id.
    Single(HeadId),
}

impl HeadLayout {
    pub fn heads(self) -> Vec<HeadId> {
        match self {
            HeadLayout::Triple => HeadId::ALL.to_vec(),
            HeadLayout::Single(id) => vec![id],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum DropoutMode {
    Off,
    Stochastic(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadModel {
    config: PartitionConfig,
    plan: PartitionPlan,
    layout: HeadLayout,
    build_seed: u64,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    backbone: Vec<Layer>,
    shared: Vec<Layer>,
    heads: [Option<Vec<Layer>>; 3],
}

pub fn build_multihead(base: &Network, config: PartitionConfig, seed: u64) -> Result<MultiHeadModel> {
    build_with_layout(base, config, HeadLayout::Triple, seed)
}

pub fn build_with_layout(
    base: &Network,
    config: PartitionConfig,
    layout: HeadLayout,
    seed: u64,
) -> Result<MultiHeadModel> {
    base.architecture().validate()?;
    let plan = config.plan(base.depth())?;
    let backbone = base.layers[..plan.frozen].to_vec();
    let shared = base.layers[plan.frozen..plan.frozen + plan.shared].to_vec();
    let tail = base.layers[plan.frozen + plan.shared..].to_vec();
    let mut heads: [Option<Vec<Layer>>; 3] = Default::default();
    for id in layout.heads() {
        heads[id.index()] = Some(tail.clone());
    }
    Ok(MultiHeadModel {
        config,
        plan,
        layout,
        build_seed: seed,
        input_shape: base.input_shape,
        num_classes: base.num_classes(),
        backbone,
        shared,
        heads,
    })
}

impl MultiHeadModel {
    /// Reassembles a model from stored sections, checking that they compose.
    pub fn from_parts(
        config: PartitionConfig,
        layout: HeadLayout,
        build_seed: u64,
        input_shape: (usize, usize, usize),
        backbone: Vec<Layer>,
        shared: Vec<Layer>,
        heads: Vec<(HeadId, Vec<Layer>)>,
    ) -> Result<Self> {
        let expected = layout.heads();
        let mut slots: [Option<Vec<Layer>>; 3] = Default::default();
        for (id, layers) in heads {
            if !expected.contains(&id) || slots[id.index()].is_some() {
                return Err(Error::validation(format!("unexpected head section {id}")));
            }
            slots[id.index()] = Some(layers);
        }
        let first = slots[expected[0].index()]
            .clone()
            .ok_or_else(|| Error::validation(format!("missing head section {}", expected[0])))?;
        for id in &expected {
            let head = slots[id.index()]
                .as_ref()
                .ok_or_else(|| Error::validation(format!("missing head section {id}")))?;
            let same = head.len() == first.len() && head.iter().zip(&first).all(|(a, b)| a.spec == b.spec);
            if !same {
                return Err(Error::validation("heads are not structurally identical"));
            }
            for layer in head {
                if layer.weight.len() != layer.spec.weight_len() || layer.bias.len() != layer.spec.bias_len() {
                    return Err(Error::validation("head parameter length does not match its layer"));
                }
            }
        }
        let mut layers = backbone.clone();
        layers.extend(shared.iter().cloned());
        layers.extend(first.iter().cloned());
        let composed = Network::from_layers(input_shape, layers)?;
        let plan = config.plan(composed.depth())?;
        if plan.frozen != backbone.len() || plan.shared != shared.len() || plan.head != first.len() {
            return Err(Error::validation(format!(
                "section sizes {}/{}/{} do not match partition plan {}/{}/{}",
                backbone.len(),
                shared.len(),
                first.len(),
                plan.frozen,
                plan.shared,
                plan.head
            )));
        }
        for layer in backbone.iter().chain(&shared) {
            if layer.weight.len() != layer.spec.weight_len() || layer.bias.len() != layer.spec.bias_len() {
                return Err(Error::validation("parameter length does not match its layer"));
            }
        }
        Ok(MultiHeadModel {
            config,
            plan,
            layout,
            build_seed,
            input_shape,
            num_classes: composed.num_classes(),
            backbone,
            shared,
            heads: slots,
        })
    }

    pub fn config(&self) -> &PartitionConfig {
        &self.config
    }

    pub fn plan(&self) -> PartitionPlan {
        self.plan
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn build_seed(&self) -> u64 {
        self.build_seed
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_three_heads(&self) -> bool {
        self.layout == HeadLayout::Triple
    }

    /// Head used for plain (non-selecting) prediction.
    pub fn primary_head(&self) -> HeadId {
        match self.layout {
            HeadLayout::Triple => HeadId::Clean,
            HeadLayout::Single(id) => id,
        }
    }

    /// Effective dropout rate; zero when nothing is tuned.
    pub fn dropout_rate(&self) -> f64 {
        if self.plan.tuned {
            self.config.dropout_rate
        } else {
            0.0
        }
    }

    pub fn backbone(&self) -> &[Layer] {
        &self.backbone
    }

    pub fn shared(&self) -> &[Layer] {
        &self.shared
    }

    pub fn head(&self, id: HeadId) -> Result<&[Layer]> {
        self.heads[id.index()]
            .as_deref()
            .ok_or_else(|| Error::validation(format!("model has no {id} head")))
    }

    pub fn section(&self, section: Section) -> Result<&[Layer]> {
        match section {
            Section::Backbone => Ok(&self.backbone),
            Section::Shared => Ok(&self.shared),
            Section::Head(id) => self.head(id),
        }
    }

    /// Sections present in this model, in checkpoint order.
    pub fn sections(&self) -> Vec<Section> {
        let mut out = vec![Section::Backbone, Section::Shared];
        out.extend(self.layout.heads().into_iter().map(Section::Head));
        out
    }

    /// Mutable access for optimizer updates. The backbone, and every section
    /// of an untuned model, is immutable.
    pub fn trainable_mut(&mut self, section: Section) -> Result<&mut [Layer]> {
        if section == Section::Backbone {
            return Err(Error::Frozen("backbone parameters are immutable".into()));
        }
        if !self.plan.tuned {
            return Err(Error::Frozen(format!(
                "{} is frozen: the model has no tuned layers",
                section.key()
            )));
        }
        match section {
            Section::Shared => Ok(&mut self.shared),
            Section::Head(id) => self.heads[id.index()]
                .as_deref_mut()
                .ok_or_else(|| Error::validation(format!("model has no {id} head"))),
            Section::Backbone => unreachable!(),
        }
    }

    pub fn check_input(&self, x: &Activations) -> Result<()> {
        if x.sample_shape() != self.input_shape {
            return Err(Error::validation(format!(
                "input shape {:?} does not match model input {:?}",
                x.sample_shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Deterministic backbone output; safe to cache across heads and passes.
    pub fn backbone_features(&self, x: &Activations) -> Result<Activations> {
        self.check_input(x)?;
        stack::forward(&self.backbone, x)
    }

    /// Shared section on backbone features. In stochastic mode the masks
    /// come from `derive_seed(seed, 0)`.
    pub fn shared_forward(&self, features: &Activations, mode: DropoutMode) -> Result<Activations> {
        self.run_tuned(&self.shared, features, mode, 0)
    }

    /// One head on shared-section output. In stochastic mode the masks come
    /// from `derive_seed(seed, 1 + head index)`, so a pass can reuse one
    /// shared output across all heads.
    pub fn head_forward(&self, mid: &Activations, head: HeadId, mode: DropoutMode) -> Result<Activations> {
        self.run_tuned(self.head(head)?, mid, mode, 1 + head.index() as u64)
    }

    fn run_tuned(&self, layers: &[Layer], x: &Activations, mode: DropoutMode, salt: u64) -> Result<Activations> {
        let rate = self.dropout_rate();
        match mode {
            DropoutMode::Stochastic(seed) if rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, salt));
                stack::forward_dropout(layers, x, Dropout::On { rate, rng: &mut rng })
            }
            _ => stack::forward(layers, x),
        }
    }

    /// Shared section for many stochastic passes at once. `stacked` holds one
    /// copy of the features per pass seed; block `p` matches
    /// `shared_forward(.., Stochastic(seeds[p]))`.
    pub fn shared_forward_passes(&self, stacked: &Activations, seeds: &[u64]) -> Result<Activations> {
        self.run_tuned_passes(&self.shared, stacked, seeds, 0)
    }

    /// Block-wise counterpart of `head_forward`.
    pub fn head_forward_passes(&self, mid: &Activations, head: HeadId, seeds: &[u64]) -> Result<Activations> {
        self.run_tuned_passes(self.head(head)?, mid, seeds, 1 + head.index() as u64)
    }

    fn run_tuned_passes(&self, layers: &[Layer], x: &Activations, seeds: &[u64], salt: u64) -> Result<Activations> {
        let mut rngs: Vec<ChaCha8Rng> = seeds
            .iter()
            .map(|&s| ChaCha8Rng::seed_from_u64(derive_seed(s, salt)))
            .collect();
        stack::forward_dropout_blocks(layers, x, self.dropout_rate(), &mut rngs)
    }

    pub fn forward_from_features(&self, features: &Activations, head: HeadId, mode: DropoutMode) -> Result<Activations> {
        let mid = self.shared_forward(features, mode)?;
        self.head_forward(&mid, head, mode)
    }

    pub fn forward_head(&self, x: &Activations, head: HeadId, mode: DropoutMode) -> Result<Activations> {
        let features = self.backbone_features(x)?;
        self.forward_from_features(&features, head, mode)
    }

    pub fn head_logits(&self, images: &[&Image], head: HeadId, mode: DropoutMode) -> Result<Vec<Vec<f64>>> {
        let out = self.forward_head(&Activations::from_images(images)?, head, mode)?;
        Ok(out.rows().map(<[f64]>::to_vec).collect())
    }

    /// The plain network obtained by following one head.
    pub fn compose(&self, head: HeadId) -> Result<Network> {
        let mut layers = self.backbone.clone();
        layers.extend(self.shared.iter().cloned());
        layers.extend(self.head(head)?.iter().cloned());
        Network::from_layers(self.input_shape, layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    CleanCopy,
    RobustSmall,
}

/// A read-only classifier used as a distillation target.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherHandle {
    kind: TeacherKind,
    model: Network,
}

pub fn clone_frozen_teacher(base: &Network) -> TeacherHandle {
    TeacherHandle {
        kind: TeacherKind::CleanCopy,
        model: base.clone(),
    }
}

impl TeacherHandle {
    pub fn robust(model: Network) -> Self {
        TeacherHandle {
            kind: TeacherKind::RobustSmall,
            model,
        }
    }

    pub fn kind(&self) -> TeacherKind {
        self.kind
    }

    pub fn network(&self) -> &Network {
        &self.model
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn forward(&self, x: &Activations) -> Result<Activations> {
        self.model.forward(x)
    }

    pub fn logits(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        self.model.logits(images)
    }

    /// Teachers never hand out mutable parameters.
    pub fn parameters_mut(&mut self) -> Result<&mut Network> {
        Err(Error::Frozen(format!("{:?} teacher is read-only", self.kind)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, LayerSpec};

    fn dense_net(depth: usize, seed: u64) -> Network {
        let mut layers = vec![LayerSpec::Dense { inputs: 12, outputs: 6, relu: true, residual: false }];
        for _ in 0..depth - 2 {
            layers.push(LayerSpec::Dense { inputs: 6, outputs: 6, relu: true, residual: true });
        }
        layers.push(LayerSpec::Dense { inputs: 6, outputs: 4, relu: false, residual: false });
        Network::init(&Architecture { input_shape: (2, 2, 3), layers }, seed).unwrap()
    }

    fn cfg(fraction_tuned: f64, head_fraction: f64) -> PartitionConfig {
        PartitionConfig {
            fraction_tuned,
            head_fraction,
            dropout_rate: 0.25,
        }
    }

    #[test]
    fn plan_follows_rounding_rule() {
        let p = cfg(0.2, 0.5).plan(10).unwrap();
        assert_eq!((p.frozen, p.shared, p.head), (8, 1, 1));
        // 0.25 * 10 = 2.5 rounds down to 2.
        let p = cfg(0.25, 0.2).plan(10).unwrap();
        assert_eq!((p.frozen, p.shared, p.head), (8, 1, 1));
        let p = cfg(0.35, 0.5).plan(10).unwrap();
        assert_eq!((p.frozen, p.shared, p.head), (7, 2, 1));
        let p = cfg(0.1, 0.2).plan(20).unwrap();
        assert_eq!((p.frozen, p.shared, p.head), (18, 1, 1));
        let p = cfg(0.05, 0.2).plan(20).unwrap();
        assert_eq!((p.frozen, p.shared, p.head), (19, 0, 1));
        let p = cfg(0.0, 0.2).plan(20).unwrap();
        assert_eq!((p.frozen, p.shared, p.head, p.tuned_layers()), (19, 0, 1, 0));
    }

    #[test]
    fn tiny_fraction_is_a_config_error() {
        let err = cfg(0.01, 0.2).plan(20).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(cfg(0.1, 0.0).plan(20).is_err());
        assert!(cfg(1.5, 0.2).plan(20).is_err());
        assert!(cfg(0.5, 0.5).plan(2).is_err());
    }

    #[test]
    fn fresh_heads_reproduce_the_base_model() {
        let base = dense_net(10, 1);
        let model = build_multihead(&base, cfg(0.3, 0.5), 9).unwrap();
        let x = Activations::from_rows(&[(0..12).map(|i| i as f64 / 12.0 - 0.3).collect()]).unwrap();
        let x = Activations { height: 2, width: 2, channels: 3, ..x };
        let expected = base.forward(&x).unwrap();
        for id in HeadId::ALL {
            assert_eq!(model.forward_head(&x, id, DropoutMode::Off).unwrap(), expected);
        }
        assert_eq!(model.compose(HeadId::Unclean).unwrap(), base);
    }

    #[test]
    fn stacked_passes_match_single_passes() {
        let base = dense_net(6, 2);
        let model = build_multihead(&base, cfg(0.5, 0.5), 0).unwrap();
        let x = Activations {
            height: 2,
            width: 2,
            channels: 3,
            ..Activations::from_rows(&[vec![0.3; 12], vec![-0.2; 12], vec![0.7; 12]]).unwrap()
        };
        let feats = model.backbone_features(&x).unwrap();
        let seeds = [5, 9, 11, 2];
        let mid = model.shared_forward_passes(&feats.repeat(seeds.len()), &seeds).unwrap();
        for id in HeadId::ALL {
            let out = model.head_forward_passes(&mid, id, &seeds).unwrap();
            let block = out.data.len() / seeds.len();
            for (p, &s) in seeds.iter().enumerate() {
                let single = model.forward_from_features(&feats, id, DropoutMode::Stochastic(s)).unwrap();
                assert_eq!(&out.data[p * block..(p + 1) * block], &single.data[..]);
            }
        }
    }

    #[test]
    fn stochastic_mode_is_seeded() {
        let base = dense_net(6, 2);
        let model = build_multihead(&base, cfg(0.5, 0.5), 0).unwrap();
        let x = Activations { height: 2, width: 2, channels: 3, ..Activations::from_rows(&[vec![0.3; 12], vec![-0.2; 12]]).unwrap() };
        let a = model.forward_head(&x, HeadId::Combined, DropoutMode::Stochastic(3)).unwrap();
        let b = model.forward_head(&x, HeadId::Combined, DropoutMode::Stochastic(3)).unwrap();
        let c = model.forward_head(&x, HeadId::Combined, DropoutMode::Stochastic(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let mut no_drop = cfg(0.5, 0.5);
        no_drop.dropout_rate = 0.0;
        let model = build_multihead(&base, no_drop, 0).unwrap();
        assert_eq!(
            model.forward_head(&x, HeadId::Clean, DropoutMode::Stochastic(3)).unwrap(),
            model.forward_head(&x, HeadId::Clean, DropoutMode::Off).unwrap()
        );
    }

    #[test]
    fn backbone_and_teachers_refuse_mutation() {
        let base = dense_net(6, 3);
        let mut model = build_multihead(&base, cfg(0.5, 0.5), 0).unwrap();
        assert!(matches!(model.trainable_mut(Section::Backbone), Err(Error::Frozen(_))));
        assert!(model.trainable_mut(Section::Shared).is_ok());
        let mut frozen = build_multihead(&base, cfg(0.0, 0.5), 0).unwrap();
        assert!(matches!(frozen.trainable_mut(Section::Head(HeadId::Clean)), Err(Error::Frozen(_))));
        assert_eq!(frozen.dropout_rate(), 0.0);
        let mut teacher = clone_frozen_teacher(&base);
        assert!(matches!(teacher.parameters_mut(), Err(Error::Frozen(_))));
        assert_eq!(teacher.network(), &base);
    }

    #[test]
    fn single_layout_and_parts_roundtrip() {
        let base = dense_net(8, 4);
        let model = build_with_layout(&base, cfg(0.25, 0.5), HeadLayout::Single(HeadId::Combined), 5).unwrap();
        assert!(model.head(HeadId::Clean).is_err());
        assert_eq!(model.primary_head(), HeadId::Combined);
        let rebuilt = MultiHeadModel::from_parts(
            *model.config(),
            model.layout(),
            model.build_seed(),
            model.input_shape(),
            model.backbone().to_vec(),
            model.shared().to_vec(),
            vec![(HeadId::Combined, model.head(HeadId::Combined).unwrap().to_vec())],
        )
        .unwrap();
        assert_eq!(rebuilt, model);
        let bad = MultiHeadModel::from_parts(
            *model.config(),
            model.layout(),
            0,
            model.input_shape(),
            model.backbone()[1..].to_vec(),
            model.shared().to_vec(),
            vec![(HeadId::Combined, model.head(HeadId::Combined).unwrap().to_vec())],
        );
        assert!(bad.is_err());
    }
}
