#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_kd::corruptions::{AugmentedExample, CorruptionKind, CorruptionSpec, Provenance};
use robust_kd::image::Image;
use robust_kd::model::{build_multihead, clone_frozen_teacher, HeadId, MultiHeadModel, PartitionConfig, Section, TeacherHandle};
use robust_kd::nn::{Architecture, LayerSpec, Network};
use robust_kd::model::DropoutMode;
use robust_kd::nn::Activations;
use robust_kd::training::{classification_loss, distillation_loss, DistillConfig, Objective, Teachers};

pub const SHAPE: (usize, usize, usize) = (4, 4, 2);
pub const CLASSES: usize = 5;

/// Six layers: a pooling conv and a residual conv in the backbone, then four
/// dense layers of which the last four are tuned (two shared, two per head).
pub fn tiny_arch() -> Architecture {
    let (h, w, c) = SHAPE;
    Architecture {
        input_shape: SHAPE,
        layers: vec![
            LayerSpec::Conv { in_channels: c, out_channels: 4, pool: true, residual: false },
            LayerSpec::Conv { in_channels: 4, out_channels: 4, pool: false, residual: true },
            LayerSpec::Dense { inputs: (h / 2) * (w / 2) * 4, outputs: 8, relu: true, residual: false },
            LayerSpec::Dense { inputs: 8, outputs: 8, relu: true, residual: true },
            LayerSpec::Dense { inputs: 8, outputs: 8, relu: true, residual: false },
            LayerSpec::Dense { inputs: 8, outputs: CLASSES, relu: false, residual: false },
        ],
    }
}

pub fn tiny_partition(dropout_rate: f64) -> PartitionConfig {
    PartitionConfig { fraction_tuned: 4.0 / 6.0, head_fraction: 0.5, dropout_rate }
}

pub fn tiny_base(seed: u64) -> Network {
    Network::init(&tiny_arch(), seed).unwrap()
}

/// Multi-head model whose heads and shared section have been moved away
/// from the base weights, so every loss term is active.
pub fn tiny_model(seed: u64, dropout_rate: f64) -> (Network, MultiHeadModel) {
    let base = tiny_base(seed);
    let mut model = build_multihead(&base, tiny_partition(dropout_rate), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut sections = vec![Section::Shared];
    sections.extend(HeadId::ALL.map(Section::Head));
    for section in sections {
        for layer in model.trainable_mut(section).unwrap() {
            for p in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *p += rng.gen_range(-0.3..0.3);
            }
        }
    }
    (base, model)
}

pub fn tiny_teachers(base: &Network, seed: u64) -> Teachers {
    let (h, w, c) = SHAPE;
    let arch = Architecture {
        input_shape: SHAPE,
        layers: vec![
            LayerSpec::Dense { inputs: h * w * c, outputs: 6, relu: true, residual: false },
            LayerSpec::Dense { inputs: 6, outputs: CLASSES, relu: false, residual: false },
        ],
    };
    Teachers {
        clean: clone_frozen_teacher(base),
        robust: TeacherHandle::robust(Network::init(&arch, seed + 100).unwrap()),
    }
}

pub fn random_image<R: Rng>(rng: &mut R) -> Image {
    let (h, w, c) = SHAPE;
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

pub fn clean_example<R: Rng>(rng: &mut R, index: usize) -> AugmentedExample {
    AugmentedExample::clean(random_image(rng), rng.gen_range(0..CLASSES), index)
}

pub fn augmented_example<R: Rng>(rng: &mut R, index: usize) -> AugmentedExample {
    let seed = rng.gen();
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, rng.gen_range(1..=5), seed).unwrap();
    AugmentedExample::augmented(random_image(rng), rng.gen_range(0..CLASSES), index, seed, Provenance::Corruption(spec))
}

/// Random batch with both gates present.
pub fn mixed_batch<R: Rng>(rng: &mut R, len: usize) -> Vec<AugmentedExample> {
    assert!(len >= 2);
    (0..len)
        .map(|i| match i {
            0 => clean_example(rng, i),
            1 => augmented_example(rng, i),
            _ if rng.gen_bool(0.5) => clean_example(rng, i),
            _ => augmented_example(rng, i),
        })
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn sections(model: &MultiHeadModel) -> Vec<Section> {
    let mut out = vec![Section::Shared];
    out.extend(model.layout().heads().into_iter().map(Section::Head));
    out
}

fn section_grads(obj: &Objective, section: Section) -> Option<Vec<f64>> {
    let layers = match section {
        Section::Shared => Some(&obj.grads.shared[..]),
        Section::Head(id) => obj.grads.head(id),
        Section::Backbone => unreachable!(),
    }?;
    Some(layers.iter().flat_map(|g| g.values()).collect())
}

fn bump(model: &mut MultiHeadModel, section: Section, mut index: usize, delta: f64) {
    for layer in model.trainable_mut(section).unwrap() {
        let n = layer.weight.len();
        if index < n {
            layer.weight[index] += delta;
            return;
        }
        index -= n;
        if index < layer.bias.len() {
            layer.bias[index] += delta;
            return;
        }
        index -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

/// Central differences over every trainable parameter of `model`. Returns
/// the worst relative error and the number of parameters checked.
pub fn max_fd_error(model: &MultiHeadModel, eval: impl Fn(&MultiHeadModel) -> Objective) -> (f64, usize) {
    let eps = 1e-5;
    let base = eval(model);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for section in sections(model) {
        let count: usize = model.section(section).unwrap().iter().map(|l| l.param_count()).sum();
        let grads = section_grads(&base, section).unwrap_or_else(|| vec![0.0; count]);
        assert_eq!(grads.len(), count);
        for (i, &g) in grads.iter().enumerate() {
            let mut plus = model.clone();
            bump(&mut plus, section, i, eps);
            let mut minus = model.clone();
            bump(&mut minus, section, i, -eps);
            let fd = (eval(&plus).value - eval(&minus).value) / (2.0 * eps);
            worst = worst.max(rel_err(g, fd));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Per-example gated mean computed from single forwards and the primitive
/// losses.
pub fn brute_force_total(batch: &[AugmentedExample], model: &MultiHeadModel, teachers: &Teachers, c: &DistillConfig) -> f64 {
    let mut sum = 0.0;
    for ex in batch {
        let x = Activations::from_image(&ex.input).unwrap();
        let logits = |h| model.forward_head(&x, h, DropoutMode::Off).unwrap().data;
        let branch = |heads: [HeadId; 2], teacher: &TeacherHandle| -> f64 {
            let t = teacher.forward(&x).unwrap().data;
            heads
                .iter()
                .map(|&h| {
                    let z = logits(h);
                    c.lambda_c * classification_loss(&z, ex.label) + c.lambda_d * distillation_loss(&z, &t, c.temperature)
                })
                .sum()
        };
        let beta = ex.beta();
        let l_clean = branch([HeadId::Clean, HeadId::Combined], &teachers.clean);
        let l_aug = branch([HeadId::Unclean, HeadId::Combined], &teachers.robust);
        sum += beta * l_clean + (1.0 - beta) * l_aug;
    }
    sum / batch.len() as f64
}
