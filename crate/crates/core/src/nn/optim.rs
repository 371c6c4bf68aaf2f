use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerGrad};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMoments {
    m_weight: Vec<f64>,
    v_weight: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

impl LayerMoments {
    pub fn for_layer(layer: &Layer) -> Self {
        LayerMoments {
            m_weight: vec![0.0; layer.weight.len()],
            v_weight: vec![0.0; layer.weight.len()],
            m_bias: vec![0.0; layer.bias.len()],
            v_bias: vec![0.0; layer.bias.len()],
        }
    }
}

/// Adam state for one stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct StackOptimizer {
    config: AdamConfig,
    step: u64,
    moments: Vec<LayerMoments>,
}

impl StackOptimizer {
    pub fn new(config: AdamConfig, layers: &[Layer]) -> Self {
        StackOptimizer {
            config,
            step: 0,
            moments: layers.iter().map(LayerMoments::for_layer).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, layers: &mut [Layer], grads: &[LayerGrad]) {
        assert_eq!(layers.len(), grads.len(), "one gradient per layer");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        };
        for ((layer, grad), mom) in layers.iter_mut().zip(grads).zip(&mut self.moments) {
            update(&mut layer.weight, &grad.weight, &mut mom.m_weight, &mut mom.v_weight);
            update(&mut layer.bias, &grad.bias, &mut mom.m_bias, &mut mom.v_bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::LayerSpec;

    #[test]
    fn first_step_moves_each_parameter_by_lr_against_gradient_sign() {
        let spec = LayerSpec::Dense {
            inputs: 2,
            outputs: 1,
            relu: false,
            residual: false,
        };
        let mut layers = vec![Layer::zeros(spec)];
        let mut opt = StackOptimizer::new(AdamConfig::with_lr(0.1), &layers);
        let grads = vec![LayerGrad {
            weight: vec![3.0, -0.5],
            bias: vec![0.0],
        }];
        opt.step(&mut layers, &grads);
        assert!((layers[0].weight[0] + 0.1).abs() < 1e-6);
        assert!((layers[0].weight[1] - 0.1).abs() < 1e-6);
        assert_eq!(layers[0].bias[0], 0.0);
        assert_eq!(opt.steps(), 1);
    }
}
