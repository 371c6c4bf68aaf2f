//! Dataset sources: procedural small-image datasets and the CIFAR-10 binary
//! format.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dataset, Example, Image};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Ten classes of filled/hollow shapes and periodic textures.
    Shapes10,
    /// Six classes disjoint from `Shapes10`, used for transfer probing.
    Glyphs6,
}

impl Generator {
    pub fn num_classes(self) -> usize {
        match self {
            Generator::Shapes10 => 10,
            Generator::Glyphs6 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Generator::Shapes10 => "shapes10",
            Generator::Glyphs6 => "glyphs6",
        }
    }
}

fn default_size() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        generator: Generator,
        count: usize,
        seed: u64,
        #[serde(default = "default_size")]
        size: usize,
    },
    /// CIFAR-10 binary batch files (`data_batch_*.bin`), optionally
    /// downsampled by an integer factor with box averaging.
    Cifar10Bin {
        paths: Vec<PathBuf>,
        #[serde(default)]
        downsample: Option<usize>,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSource {
    /// Loads the dataset; `field` names the config entry for error messages.
    pub fn load(&self, field: &str) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic {
                generator,
                count,
                seed,
                size,
            } => {
                if *count == 0 {
                    return Err(Error::config(format!("{field}.count"), "must be positive"));
                }
                if *size < 8 || size % 8 != 0 {
                    return Err(Error::config(
                        format!("{field}.size"),
                        "must be a positive multiple of 8",
                    ));
                }
                Ok(generate(*generator, *count, *seed, *size))
            }
            DatasetSource::Cifar10Bin {
                paths,
                downsample,
                limit,
            } => {
                if paths.is_empty() {
                    return Err(Error::config(format!("{field}.paths"), "no dataset files given"));
                }
                let mut examples = Vec::new();
                for (i, path) in paths.iter().enumerate() {
                    let bytes = std::fs::read(path).map_err(|e| {
                        Error::config(
                            format!("{field}.paths[{i}]"),
                            format!("cannot read {}: {e}", path.display()),
                        )
                    })?;
                    examples.extend(parse_cifar10_binary(&bytes, downsample.unwrap_or(1))?);
                }
                if let Some(limit) = limit {
                    examples.truncate(*limit);
                }
                Dataset::new("cifar10", 10, examples)
            }
        }
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Decodes CIFAR-10 binary records: one label byte followed by the red,
/// green and blue 32x32 planes.
pub fn parse_cifar10_binary(bytes: &[u8], downsample: usize) -> Result<Vec<Example>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "CIFAR-10 binary length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    if downsample == 0 || CIFAR_SIDE % downsample != 0 || (CIFAR_SIDE / downsample) % 8 != 0 {
        return Err(Error::Dataset(format!("unsupported downsample factor {downsample}")));
    }
    let side = CIFAR_SIDE / downsample;
    let area = (downsample * downsample) as f64;
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Dataset(format!("CIFAR-10 label {label} out of range")));
            }
            let planes = &rec[1..];
            let mut pixels = vec![0.0; side * side * 3];
            for c in 0..3 {
                for y in 0..CIFAR_SIDE {
                    for x in 0..CIFAR_SIDE {
                        let v = planes[c * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x] as f64 / 255.0;
                        let (ty, tx) = (y / downsample, x / downsample);
                        pixels[(ty * side + tx) * 3 + c] += v / area;
                    }
                }
            }
            Ok(Example {
                image: Image::new(side, side, 3, pixels)?,
                label,
            })
        })
        .collect()
}

/// Generates `count` class-balanced examples (label = index mod classes).
pub fn generate(generator: Generator, count: usize, seed: u64, size: usize) -> Dataset {
    let classes = generator.num_classes();
    let examples = (0..count)
        .map(|i| {
            let label = i % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            Example {
                image: render(generator, label, size, &mut rng),
                label,
            }
        })
        .collect();
    Dataset {
        name: generator.name().to_string(),
        num_classes: classes,
        examples,
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_colors(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let fg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let bg = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if (luminance(fg) - luminance(bg)).abs() >= 0.35 {
            return (fg, bg);
        }
    }
}

struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
    cos: f64,
    sin: f64,
    period: f64,
    phase_x: f64,
    phase_y: f64,
}

fn render(generator: Generator, label: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let (fg, bg) = random_colors(rng);
    let s = size as f64;
    let angle = rng.gen_range(-0.3..0.3);
    let p = Placement {
        cx: s / 2.0 + rng.gen_range(-0.12..0.12) * s,
        cy: s / 2.0 + rng.gen_range(-0.12..0.12) * s,
        r: rng.gen_range(0.26..0.40) * s,
        cos: f64::cos(angle),
        sin: f64::sin(angle),
        period: rng.gen_range(1.6..2.6) * s / 16.0,
        phase_x: rng.gen_range(0.0..8.0),
        phase_y: rng.gen_range(0.0..8.0),
    };
    const SUB: usize = 4;
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    if inside(generator, label, &p, px, py) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUB * SUB) as f64;
            for c in 0..3 {
                let v = cov * fg[c] + (1.0 - cov) * bg[c] + noise.sample(rng);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: size,
        width: size,
        channels: 3,
        pixels,
    }
}

fn inside(generator: Generator, label: usize, p: &Placement, px: f64, py: f64) -> bool {
    let (ox, oy) = (px - p.cx, py - p.cy);
    // Shape-local coordinates (rotated).
    let dx = p.cos * ox + p.sin * oy;
    let dy = -p.sin * ox + p.cos * oy;
    let r = p.r;
    let d = (dx * dx + dy * dy).sqrt();
    let cheb = dx.abs().max(dy.abs());
    let band = |u: f64| ((u / p.period).floor() as i64).rem_euclid(2) == 0;
    match (generator, label) {
        (Generator::Shapes10, 0) => d < r,
        (Generator::Shapes10, 1) => cheb < 0.85 * r,
        (Generator::Shapes10, 2) => {
            // Upward triangle with apex at (0, -r) and base at y = 0.8r.
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        (Generator::Shapes10, 3) => {
            (dx.abs() < 0.3 * r && dy.abs() < r) || (dy.abs() < 0.3 * r && dx.abs() < r)
        }
        (Generator::Shapes10, 4) => {
            ((dx - dy).abs() < 0.42 * r || (dx + dy).abs() < 0.42 * r) && cheb < 0.8 * r
        }
        (Generator::Shapes10, 5) => d < r && d > 0.55 * r,
        (Generator::Shapes10, 6) => cheb < 0.9 * r && cheb > 0.55 * r,
        (Generator::Shapes10, 7) => band(py + p.phase_y),
        (Generator::Shapes10, 8) => band(px + p.phase_x),
        (Generator::Shapes10, _) => band(px + p.phase_x) ^ band(py + p.phase_y),
        (Generator::Glyphs6, 0) => band((px + py) / 2f64.sqrt() + p.phase_x),
        (Generator::Glyphs6, 1) => band((px - py) / 2f64.sqrt() + p.phase_x + 16.0),
        (Generator::Glyphs6, 2) => {
            (dx > -r && dx < -0.4 * r && dy.abs() < r) || (dy > 0.5 * r && dy < r && dx.abs() < r)
        }
        (Generator::Glyphs6, 3) => {
            (dy > -r && dy < -0.5 * r && dx.abs() < r) || (dx.abs() < 0.28 * r && dy > -r && dy < r)
        }
        (Generator::Glyphs6, 4) => dx.abs() + dy.abs() < r,
        (Generator::Glyphs6, _) => {
            let cell = 2.0 * p.period;
            let fx = ((px + p.phase_x) / cell).fract() - 0.5;
            let fy = ((py + p.phase_y) / cell).fract() - 0.5;
            (fx * fx + fy * fy).sqrt() < 0.3
        }
    }
}
