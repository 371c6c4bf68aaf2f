use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{Layer, LayerSpec};
use super::stack;
use super::tensor::Activations;
use crate::error::{Error, Result};
use crate::image::Image;

/// Upper bound on `height * width * channels` of a network input.
pub const MAX_INPUT_SIZE: usize = 1 << 22;

/// A plain feed-forward classifier: a stack of layers ending in a logit layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

/// Serializable description of a network's wiring.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn validate(&self) -> Result<usize> {
        if self.layers.is_empty() {
            return Err(Error::validation("architecture has no layers"));
        }
        let (h, w, c) = self.input_shape;
        let size = h.checked_mul(w).and_then(|n| n.checked_mul(c));
        if size.map_or(true, |n| n == 0 || n > MAX_INPUT_SIZE) {
            return Err(Error::validation(format!("unsupported input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape;
        for spec in &self.layers {
            spec.validate()?;
            shape = spec.output_shape(shape)?;
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { relu: false, .. }) => Ok(shape.2),
            _ => Err(Error::validation("final layer must be a linear dense logit layer")),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Small convolutional student (20 layers). Nearly all of the compute
    /// sits in residual conv stages at 8x8 and 4x4; the top is a short
    /// residual dense tower on the flattened 2x2x32 map plus a logit layer,
    /// so repeated stochastic passes over the tuned tail stay cheap.
    pub fn student(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        let (h, w, c) = input_shape;
        let conv = |i, o, pool, residual| LayerSpec::Conv { in_channels: i, out_channels: o, pool, residual };
        let mut layers = vec![conv(c, 16, true, false)];
        layers.extend((0..5).map(|_| conv(16, 16, false, true)));
        layers.push(conv(16, 24, true, false));
        layers.extend((0..8).map(|_| conv(24, 24, false, true)));
        layers.push(conv(24, 32, true, false));
        let width = (h / 8) * (w / 8) * 32;
        layers.extend((0..3).map(|_| LayerSpec::Dense { inputs: width, outputs: width, relu: true, residual: true }));
        layers.push(LayerSpec::Dense { inputs: width, outputs: num_classes, relu: false, residual: false });
        Architecture { input_shape, layers }
    }

    /// Smaller convolutional teacher, roughly a quarter of the student's size.
    pub fn teacher(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        let (h, w, c) = input_shape;
        let layers = vec![
            LayerSpec::Conv { in_channels: c, out_channels: 12, pool: true, residual: false },
            LayerSpec::Conv { in_channels: 12, out_channels: 24, pool: true, residual: false },
            LayerSpec::Conv { in_channels: 24, out_channels: 48, pool: true, residual: false },
            LayerSpec::Dense { inputs: (h / 8) * (w / 8) * 48, outputs: 64, relu: true, residual: false },
            LayerSpec::Dense { inputs: 64, outputs: num_classes, relu: false, residual: false },
        ];
        Architecture { input_shape, layers }
    }
}

impl Network {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|&spec| Layer::init(spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            input_shape: arch.input_shape,
            layers,
        })
    }

    pub fn from_layers(input_shape: (usize, usize, usize), layers: Vec<Layer>) -> Result<Self> {
        let net = Network { input_shape, layers };
        net.architecture().validate()?;
        Ok(net)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape,
            layers: self.layers.iter().map(|l| l.spec).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| l.spec) {
            Some(LayerSpec::Dense { outputs, .. }) => outputs,
            _ => 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn check_input(&self, x: &Activations) -> Result<()> {
        if x.sample_shape() != self.input_shape {
            return Err(Error::validation(format!(
                "input shape {:?} does not match network input {:?}",
                x.sample_shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Activations) -> Result<Activations> {
        self.check_input(x)?;
        stack::forward(&self.layers, x)
    }

    pub fn logits(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let out = self.forward(&Activations::from_images(images)?)?;
        Ok(out.rows().map(<[f64]>::to_vec).collect())
    }

    /// Argmax predictions, evaluated in chunks to bound memory.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let refs: Vec<&Image> = chunk.iter().collect();
            out.extend(self.logits(&refs)?.iter().map(|l| argmax(l)));
        }
        Ok(out)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_architectures_have_the_intended_sizes() {
        let student = Architecture::student((16, 16, 3), 10);
        let teacher = Architecture::teacher((16, 16, 3), 10);
        assert_eq!(student.validate().unwrap(), 10);
        assert_eq!(teacher.validate().unwrap(), 10);
        assert_eq!(student.layers.len(), 20);
        let (s, t) = (student.param_count(), teacher.param_count());
        assert!((90_000..=115_000).contains(&s), "student has {s} params");
        assert!((25_000..=35_000).contains(&t), "teacher has {t} params");
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Architecture::teacher((8, 8, 1), 3);
        assert_eq!(Network::init(&arch, 5).unwrap(), Network::init(&arch, 5).unwrap());
        assert_ne!(Network::init(&arch, 5).unwrap(), Network::init(&arch, 6).unwrap());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
