use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Noise,
    Blur,
    Digital,
    WeatherProxy,
}

macro_rules! kinds {
    ($( $variant:ident => $name:literal, $family:ident; )*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum CorruptionKind { $( $variant, )* }

        impl CorruptionKind {
            pub const ALL: &'static [CorruptionKind] = &[ $( CorruptionKind::$variant, )* ];

            pub fn name(self) -> &'static str {
                match self { $( CorruptionKind::$variant => $name, )* }
            }

            pub fn family(self) -> Family {
                match self { $( CorruptionKind::$variant => Family::$family, )* }
            }
        }

        impl FromStr for CorruptionKind {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $( $name => Ok(CorruptionKind::$variant), )*
                    other => Err(Error::UnsupportedCorruption(other.to_string())),
                }
            }
        }
    };
}

kinds! {
    Identity => "identity", Digital;
    GaussianNoise => "gaussian_noise", Noise;
    ShotNoise => "shot_noise", Noise;
    ImpulseNoise => "impulse_noise", Noise;
    SpeckleNoise => "speckle_noise", Noise;
    GaussianBlur => "gaussian_blur", Blur;
    DefocusBlur => "defocus_blur", Blur;
    MotionBlur => "motion_blur", Blur;
    Contrast => "contrast", Digital;
    Pixelate => "pixelate", Digital;
    JpegQuant => "jpeg_quant", Digital;
    Brightness => "brightness", WeatherProxy;
    Fog => "fog", WeatherProxy;
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for CorruptionKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CorruptionKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl CorruptionKind {
    /// Applies the corruption with the given distortion magnitude. Output is
    /// clamped to `[0, 1]`.
    pub fn apply(self, image: &Image, magnitude: f64, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = match self {
            CorruptionKind::Identity => return image.clone(),
            CorruptionKind::GaussianNoise => image.map(|p| p + magnitude * normal(&mut rng)),
            CorruptionKind::ShotNoise => {
                image.map(|p| p + (p.max(0.0) * magnitude).sqrt() * normal(&mut rng))
            }
            CorruptionKind::ImpulseNoise => image.map(|p| {
                let u: f64 = rng.gen();
                if u < magnitude / 2.0 {
                    0.0
                } else if u < magnitude {
                    1.0
                } else {
                    p
                }
            }),
            CorruptionKind::SpeckleNoise => image.map(|p| p + p * magnitude * normal(&mut rng)),
            CorruptionKind::GaussianBlur => gaussian_blur(image, magnitude),
            CorruptionKind::DefocusBlur => convolve(image, &disk_kernel(magnitude)),
            CorruptionKind::MotionBlur => {
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                convolve(image, &motion_kernel(magnitude, angle))
            }
            CorruptionKind::Contrast => {
                let mean = image.mean();
                image.map(|p| mean + (1.0 - magnitude) * (p - mean))
            }
            CorruptionKind::Pixelate => pixelate(image, magnitude),
            CorruptionKind::JpegQuant => block_dct_quantize(image, magnitude),
            CorruptionKind::Brightness => image.map(|p| p + magnitude),
            CorruptionKind::Fog => fog(image, magnitude, &mut rng),
        };
        out.clamp_unit();
        out
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Square kernel stored row-major with odd side length.
#[derive(Clone, Debug)]
struct Kernel {
    side: usize,
    weights: Vec<f64>,
}

impl Kernel {
    fn normalized(side: usize, mut weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Kernel { side, weights }
    }
}

fn convolve(image: &Image, kernel: &Kernel) -> Image {
    let half = (kernel.side / 2) as isize;
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..image.channels {
                let mut acc = 0.0;
                for ky in 0..kernel.side {
                    for kx in 0..kernel.side {
                        let w = kernel.weights[ky * kernel.side + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let sy = y as isize + ky as isize - half;
                        let sx = x as isize + kx as isize - half;
                        acc += w * image.get_clamped(sy, sx, c);
                    }
                }
                let i = out.idx(y, x, c);
                out.pixels[i] = acc;
            }
        }
    }
    out
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (2.0 * sigma).ceil() as isize;
    let side = (2 * radius + 1) as usize;
    let mut weights = Vec::with_capacity(side * side);
    for ky in -radius..=radius {
        for kx in -radius..=radius {
            let d2 = (ky * ky + kx * kx) as f64;
            weights.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    convolve(image, &Kernel::normalized(side, weights))
}

/// Anti-aliased disk of the given radius.
fn disk_kernel(radius: f64) -> Kernel {
    let r = radius.max(0.0);
    let half = r.ceil() as isize;
    let side = (2 * half + 1) as usize;
    let mut weights = Vec::with_capacity(side * side);
    for ky in -half..=half {
        for kx in -half..=half {
            let d = ((ky * ky + kx * kx) as f64).sqrt();
            weights.push((r + 0.5 - d).clamp(0.0, 1.0));
        }
    }
    Kernel::normalized(side, weights)
}

/// Line kernel of the given length through the centre at `angle` radians.
fn motion_kernel(length: f64, angle: f64) -> Kernel {
    let half = (length / 2.0).ceil() as isize;
    let side = (2 * half + 1) as usize;
    let mut weights = vec![0.0; side * side];
    let samples = (4.0 * length).ceil().max(1.0) as usize;
    let (dy, dx) = angle.sin_cos();
    for i in 0..=samples {
        let t = if samples == 0 { 0.0 } else { i as f64 / samples as f64 - 0.5 } * length;
        let (fy, fx) = (t * dy + half as f64, t * dx + half as f64);
        let (y0, x0) = (fy.floor(), fx.floor());
        let (wy, wx) = (fy - y0, fx - x0);
        for (oy, ox, w) in [
            (0, 0, (1.0 - wy) * (1.0 - wx)),
            (0, 1, (1.0 - wy) * wx),
            (1, 0, wy * (1.0 - wx)),
            (1, 1, wy * wx),
        ] {
            let (yy, xx) = (y0 as isize + oy, x0 as isize + ox);
            if yy >= 0 && xx >= 0 && (yy as usize) < side && (xx as usize) < side {
                weights[yy as usize * side + xx as usize] += w;
            }
        }
    }
    Kernel::normalized(side, weights)
}

/// Box-downsamples by `1 - magnitude` and upsamples back with nearest
/// neighbour lookup.
fn pixelate(image: &Image, magnitude: f64) -> Image {
    let scale = (1.0 - magnitude).clamp(0.05, 1.0);
    let (h, w) = (image.height, image.width);
    let sh = ((h as f64 * scale).round() as usize).clamp(1, h);
    let sw = ((w as f64 * scale).round() as usize).clamp(1, w);
    if sh == h && sw == w {
        return image.clone();
    }
    let mut small = vec![0.0; sh * sw * image.channels];
    let mut counts = vec![0usize; sh * sw];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = (y * sh / h, x * sw / w);
            counts[ty * sw + tx] += 1;
            for c in 0..image.channels {
                small[(ty * sw + tx) * image.channels + c] += image.get(y, x, c);
            }
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = (y * sh / h, x * sw / w);
            let n = counts[ty * sw + tx] as f64;
            for c in 0..image.channels {
                let i = out.idx(y, x, c);
                out.pixels[i] = small[(ty * sw + tx) * image.channels + c] / n;
            }
        }
    }
    out
}

const BLOCK: usize = 4;

fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// JPEG-style lossy coding proxy: orthonormal 4x4 block DCT, uniform
/// quantisation with a step growing with spatial frequency, inverse DCT.
fn block_dct_quantize(image: &Image, step: f64) -> Image {
    if step <= 0.0 {
        return image.clone();
    }
    let basis = dct_basis();
    let mut out = image.clone();
    for by in (0..image.height).step_by(BLOCK) {
        for bx in (0..image.width).step_by(BLOCK) {
            for c in 0..image.channels {
                let mut block = [[0.0; BLOCK]; BLOCK];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = image.get_clamped((by + i) as isize, (bx + j) as isize, c);
                    }
                }
                let mut coef = [[0.0; BLOCK]; BLOCK];
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let mut s = 0.0;
                        for i in 0..BLOCK {
                            for j in 0..BLOCK {
                                s += basis[u][i] * basis[v][j] * block[i][j];
                            }
                        }
                        let q = step * (1.0 + (u + v) as f64);
                        coef[u][v] = (s / q).round() * q;
                    }
                }
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        if by + i >= image.height || bx + j >= image.width {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..BLOCK {
                            for v in 0..BLOCK {
                                s += basis[u][i] * basis[v][j] * coef[u][v];
                            }
                        }
                        let idx = out.idx(by + i, bx + j, c);
                        out.pixels[idx] = s;
                    }
                }
            }
        }
    }
    out
}

/// Blends the image toward a smooth random haze field.
fn fog(image: &Image, magnitude: f64, rng: &mut ChaCha8Rng) -> Image {
    const GRID: usize = 5;
    let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen::<f64>()).collect();
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h.max(2) - 1) as f64 * (GRID - 1) as f64;
            let gx = x as f64 / (w.max(2) - 1) as f64 * (GRID - 1) as f64;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let haze = grid[y0 * GRID + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * GRID + x1] * (1.0 - fy) * fx
                + grid[y1 * GRID + x0] * fy * (1.0 - fx)
                + grid[y1 * GRID + x1] * fy * fx;
            let haze = 0.5 + 0.5 * haze;
            for c in 0..image.channels {
                let i = out.idx(y, x, c);
                out.pixels[i] = (image.pixels[i] + magnitude * haze) / (1.0 + magnitude);
            }
        }
    }
    out
}
