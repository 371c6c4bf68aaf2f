//! Forward and backward passes through a sequence of layers, with optional
//! inverted dropout applied to the input of every layer in the stack.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Layer, LayerCache, LayerGrad};
use super::tensor::Activations;
use crate::error::Result;

pub enum Dropout<'a> {
    Off,
    On { rate: f64, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        match self {
            Dropout::On { rate, rng } if *rate > 0.0 => Some(sample_mask(rng, len, *rate)),
            _ => None,
        }
    }
}

/// Inverted-dropout mask: entries are either 0 or `1 / (1 - rate)`.
pub fn sample_mask<R: Rng>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StackCache {
    layers: Vec<LayerCache>,
    masks: Vec<Option<Vec<f64>>>,
}

pub fn forward(layers: &[Layer], x: &Activations) -> Result<Activations> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

/// Stochastic inference pass; no caches are kept.
pub fn forward_dropout(layers: &[Layer], x: &Activations, mut dropout: Dropout<'_>) -> Result<Activations> {
    let mut cur = x.clone();
    for layer in layers {
        if let Some(mask) = dropout.mask(cur.data.len()) {
            apply_mask(&mut cur.data, &mask);
        }
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

/// Runs several stochastic passes as one batch. `x` holds one equal-sized
/// block of rows per generator; block `p` draws its masks from `rngs[p]`
/// exactly as `forward_dropout` would on that block alone.
pub fn forward_dropout_blocks(
    layers: &[Layer],
    x: &Activations,
    rate: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Activations> {
    if rngs.is_empty() || x.batch % rngs.len() != 0 {
        return Err(crate::error::Error::validation("batch does not split into one block per pass"));
    }
    let mut cur = x.clone();
    for layer in layers {
        if rate > 0.0 {
            let block = cur.data.len() / rngs.len();
            for (chunk, rng) in cur.data.chunks_mut(block).zip(rngs.iter_mut()) {
                let scale = 1.0 / (1.0 - rate);
                for d in chunk {
                    *d *= if rng.gen::<f64>() < rate { 0.0 } else { scale };
                }
            }
        }
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

pub fn forward_train(
    layers: &[Layer],
    x: &Activations,
    mut dropout: Dropout<'_>,
) -> Result<(Activations, StackCache)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    let mut masks = Vec::with_capacity(layers.len());
    for layer in layers {
        let mask = dropout.mask(cur.data.len());
        if let Some(m) = &mask {
            apply_mask(&mut cur.data, m);
        }
        let (out, cache) = layer.forward_train(&cur)?;
        caches.push(cache);
        masks.push(mask);
        cur = out;
    }
    Ok((
        cur,
        StackCache {
            layers: caches,
            masks,
        },
    ))
}

/// Returns per-layer parameter gradients (in layer order) and optionally the
/// gradient with respect to the stack input.
pub fn backward(
    layers: &[Layer],
    cache: &StackCache,
    grad_out: &Activations,
    need_input_grad: bool,
) -> (Vec<LayerGrad>, Option<Activations>) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut grad = grad_out.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let need = need_input_grad || i > 0;
        let (g, dx) = layer.backward(&cache.layers[i], &grad, need);
        grads.push(g);
        if let Some(mut dx) = dx {
            if let Some(mask) = &cache.masks[i] {
                apply_mask(&mut dx.data, mask);
            }
            grad = dx;
        }
    }
    grads.reverse();
    let input_grad = need_input_grad.then_some(grad);
    (grads, input_grad)
}

fn apply_mask(data: &mut [f64], mask: &[f64]) {
    for (d, m) in data.iter_mut().zip(mask) {
        *d *= m;
    }
}
