use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Activations;
use crate::error::{Error, Result};

/// Shape and wiring of one parameterised layer.
///
/// Convolutions are 3x3, stride 1, zero padded, followed by ReLU and an
/// optional 2x2 max-pool. Dense layers flatten their input. Residual layers
/// add their input to the activation and must preserve the shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        pool: bool,
        #[serde(default)]
        residual: bool,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
        residual: bool,
    },
}

/// Upper bound on the weights of a single layer.
pub const MAX_LAYER_WEIGHTS: usize = 1 << 26;

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            } => 9 * in_channels * out_channels,
            LayerSpec::Dense {
                inputs, outputs, ..
            } => inputs * outputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            LayerSpec::Dense { outputs, .. } => outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, k) = match *self {
            LayerSpec::Conv { in_channels, out_channels, .. } => (in_channels, out_channels, 9),
            LayerSpec::Dense { inputs, outputs, .. } => (inputs, outputs, 1),
        };
        let weights = a.checked_mul(b).and_then(|n| n.checked_mul(k));
        if weights.map_or(true, |n| n > MAX_LAYER_WEIGHTS) {
            return Err(Error::validation("layer is too large"));
        }
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                pool,
                residual,
            } => {
                if in_channels == 0 || out_channels == 0 {
                    Err(Error::validation("conv layer with zero channels"))
                } else if residual && (pool || in_channels != out_channels) {
                    Err(Error::validation(
                        "residual conv layer must keep its shape and cannot pool",
                    ))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Dense {
                inputs,
                outputs,
                residual,
                ..
            } => {
                if inputs == 0 || outputs == 0 {
                    Err(Error::validation("dense layer with zero width"))
                } else if residual && inputs != outputs {
                    Err(Error::validation("residual dense layer must be square"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Output sample shape `(h, w, c)` for a given input sample shape.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (h, w, c) = input;
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                pool,
                ..
            } => {
                if c != in_channels {
                    return Err(Error::validation(format!(
                        "conv expects {in_channels} channels, got {c}"
                    )));
                }
                if pool {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::validation(format!(
                            "cannot 2x2-pool a {h}x{w} feature map"
                        )));
                    }
                    Ok((h / 2, w / 2, out_channels))
                } else {
                    Ok((h, w, out_channels))
                }
            }
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if h * w * c != inputs {
                    return Err(Error::validation(format!(
                        "dense layer expects {inputs} features, got {}",
                        h * w * c
                    )));
                }
                Ok((1, 1, outputs))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        LayerGrad {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|&g| g == 0.0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.iter().chain(&self.bias).copied()
    }
}

/// Everything a layer needs to run its backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv {
        in_shape: (usize, usize, usize),
        cols: Vec<f64>,
        pre: Vec<f64>,
        pool_argmax: Option<Vec<u8>>,
    },
    Dense {
        input: Vec<f64>,
        pre: Vec<f64>,
    },
}

fn gemm(
    alpha: f64,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    beta: f64,
    c: &mut ArrayViewMut2<'_, f64>,
) {
    general_mat_mul(alpha, &a, &b, beta, c);
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer sized by caller")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("buffer sized by caller")
}

impl Layer {
    pub fn zeros(spec: LayerSpec) -> Self {
        Layer {
            spec,
            weight: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.bias_len()],
        }
    }

    /// He-normal initialisation; residual branches start small and the
    /// logit layer uses a unit-gain variance.
    pub fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (fan_in, gain) = match spec {
            LayerSpec::Conv {
                in_channels,
                residual,
                ..
            } => (9 * in_channels, if residual { 0.25 } else { 2.0 }),
            LayerSpec::Dense {
                inputs,
                relu,
                residual,
                ..
            } => {
                let g = match (relu, residual) {
                    (_, true) => 0.25,
                    (true, false) => 2.0,
                    (false, false) => 1.0,
                };
                (inputs, g)
            }
        };
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..spec.weight_len()).map(|_| normal.sample(rng)).collect();
        Ok(Layer {
            spec,
            weight,
            bias: vec![0.0; spec.bias_len()],
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.iter().chain(&self.bias).copied()
    }

    pub fn forward(&self, x: &Activations) -> Result<Activations> {
        Ok(self.forward_impl(x, false)?.0)
    }

    pub fn forward_train(&self, x: &Activations) -> Result<(Activations, LayerCache)> {
        let (out, cache) = self.forward_impl(x, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        x: &Activations,
        keep_cache: bool,
    ) -> Result<(Activations, Option<LayerCache>)> {
        let (oh, ow, oc) = self.spec.output_shape(x.sample_shape())?;
        match self.spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                pool,
                residual,
            } => {
                let (n, h, w) = (x.batch, x.height, x.width);
                let rows = n * h * w;
                let k = 9 * in_channels;
                let cols = im2col(x);
                let mut pre = vec![0.0; rows * out_channels];
                for r in 0..rows {
                    pre[r * out_channels..(r + 1) * out_channels].copy_from_slice(&self.bias);
                }
                gemm(
                    1.0,
                    view(&cols, rows, k),
                    view(&self.weight, k, out_channels),
                    1.0,
                    &mut view_mut(&mut pre, rows, out_channels),
                );
                let mut act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
                if residual {
                    for (y, xi) in act.iter_mut().zip(&x.data) {
                        *y += xi;
                    }
                }
                let (data, argmax) = if pool {
                    let (pooled, idx) = max_pool(&act, n, h, w, out_channels);
                    (pooled, Some(idx))
                } else {
                    (act, None)
                };
                let out = Activations {
                    batch: n,
                    height: oh,
                    width: ow,
                    channels: oc,
                    data,
                };
                let cache = keep_cache.then(|| LayerCache::Conv {
                    in_shape: x.sample_shape(),
                    cols,
                    pre,
                    pool_argmax: argmax,
                });
                Ok((out, cache))
            }
            LayerSpec::Dense {
                inputs,
                outputs,
                relu,
                residual,
            } => {
                let n = x.batch;
                let mut pre = vec![0.0; n * outputs];
                for r in 0..n {
                    pre[r * outputs..(r + 1) * outputs].copy_from_slice(&self.bias);
                }
                gemm(
                    1.0,
                    view(&x.data, n, inputs),
                    view(&self.weight, inputs, outputs),
                    1.0,
                    &mut view_mut(&mut pre, n, outputs),
                );
                let mut data: Vec<f64> = if relu {
                    pre.iter().map(|&z| z.max(0.0)).collect()
                } else {
                    pre.clone()
                };
                if residual {
                    for (y, xi) in data.iter_mut().zip(&x.data) {
                        *y += xi;
                    }
                }
                let out = Activations {
                    batch: n,
                    height: 1,
                    width: 1,
                    channels: outputs,
                    data,
                };
                let cache = keep_cache.then(|| LayerCache::Dense {
                    input: x.data.clone(),
                    pre,
                });
                Ok((out, cache))
            }
        }
    }

    /// Backpropagates `grad_out`, returning parameter gradients and, when
    /// requested, the gradient with respect to the layer input.
    pub fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &Activations,
        need_input_grad: bool,
    ) -> (LayerGrad, Option<Activations>) {
        match (self.spec, cache) {
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    residual,
                    ..
                },
                LayerCache::Conv {
                    in_shape,
                    cols,
                    pre,
                    pool_argmax,
                },
            ) => {
                let (h, w, _) = *in_shape;
                let n = grad_out.batch;
                let rows = n * h * w;
                let k = 9 * in_channels;
                let mut dz = match pool_argmax {
                    Some(idx) => unpool(&grad_out.data, idx, n, h, w, out_channels),
                    None => grad_out.data.clone(),
                };
                for (g, &z) in dz.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                let mut dw = vec![0.0; k * out_channels];
                gemm(
                    1.0,
                    view(cols, rows, k).t(),
                    view(&dz, rows, out_channels),
                    0.0,
                    &mut view_mut(&mut dw, k, out_channels),
                );
                let db = column_sums(&dz, out_channels);
                let dx = need_input_grad.then(|| {
                    let mut dcols = vec![0.0; rows * k];
                    gemm(
                        1.0,
                        view(&dz, rows, out_channels),
                        view(&self.weight, k, out_channels).t(),
                        0.0,
                        &mut view_mut(&mut dcols, rows, k),
                    );
                    let mut dx = col2im(&dcols, n, h, w, in_channels);
                    if residual {
                        for (d, g) in dx.data.iter_mut().zip(&grad_out.data) {
                            *d += g;
                        }
                    }
                    dx
                });
                (LayerGrad { weight: dw, bias: db }, dx)
            }
            (
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    relu,
                    residual,
                },
                LayerCache::Dense { input, pre },
            ) => {
                let n = grad_out.batch;
                let mut dz = grad_out.data.clone();
                if relu {
                    for (g, &z) in dz.iter_mut().zip(pre) {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                let mut dw = vec![0.0; inputs * outputs];
                gemm(
                    1.0,
                    view(input, n, inputs).t(),
                    view(&dz, n, outputs),
                    0.0,
                    &mut view_mut(&mut dw, inputs, outputs),
                );
                let db = column_sums(&dz, outputs);
                let dx = need_input_grad.then(|| {
                    let mut dx = vec![0.0; n * inputs];
                    gemm(
                        1.0,
                        view(&dz, n, outputs),
                        view(&self.weight, inputs, outputs).t(),
                        0.0,
                        &mut view_mut(&mut dx, n, inputs),
                    );
                    if residual {
                        for (d, g) in dx.iter_mut().zip(&grad_out.data) {
                            *d += g;
                        }
                    }
                    Activations {
                        batch: n,
                        height: 1,
                        width: 1,
                        channels: inputs,
                        data: dx,
                    }
                });
                (LayerGrad { weight: dw, bias: db }, dx)
            }
            _ => panic!("layer cache does not match layer kind"),
        }
    }
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Patch matrix with one row per output pixel and columns ordered
/// `(ky, kx, channel)`.
fn im2col(x: &Activations) -> Vec<f64> {
    let (n, h, w, c) = (x.batch, x.height, x.width, x.channels);
    let k = 9 * c;
    let mut cols = vec![0.0; n * h * w * k];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], n: usize, h: usize, w: usize, c: usize) -> Activations {
    let k = 9 * c;
    let mut dx = Activations::zeros(n, h, w, c);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ci in 0..c {
                            dx.data[dst + ci] += dcols[src + ci];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max_pool(act: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    let mut idx = vec![0u8; n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let o = ((b * oh + y) * ow + x) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0u8;
                    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = act[((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch];
                        if v > best {
                            best = v;
                            best_i = i as u8;
                        }
                    }
                    out[o + ch] = best;
                    idx[o + ch] = best_i;
                }
            }
        }
    }
    (out, idx)
}

fn unpool(grad: &[f64], idx: &[u8], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let o = ((b * oh + y) * ow + x) * c;
                for ch in 0..c {
                    let (dy, dx) = match idx[o + ch] {
                        0 => (0, 0),
                        1 => (0, 1),
                        2 => (1, 0),
                        _ => (1, 1),
                    };
                    out[((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch] = grad[o + ch];
                }
            }
        }
    }
    out
}
