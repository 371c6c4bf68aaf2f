use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Gradually varying perturbations. Each variant carries its per-frame step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// Random walk in pixel space; each step has L2 norm
    /// `step_rms * sqrt(num_pixels)` before clamping.
    NoiseWalk { step_rms: f64 },
    /// Additive brightness drifting by `±step` per frame.
    BrightnessWalk { step: f64 },
    /// Horizontal sub-pixel translation by `step_px` per frame.
    ShiftWalk { step_px: f64 },
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise-walk" => Ok(PerturbationKind::NoiseWalk { step_rms: 0.02 }),
            "brightness-walk" => Ok(PerturbationKind::BrightnessWalk { step: 0.03 }),
            "shift-walk" => Ok(PerturbationKind::ShiftWalk { step_px: 0.25 }),
            other => Err(Error::UnsupportedCorruption(other.to_string())),
        }
    }
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::NoiseWalk { .. } => "noise-walk",
            PerturbationKind::BrightnessWalk { .. } => "brightness-walk",
            PerturbationKind::ShiftWalk { .. } => "shift-walk",
        }
    }

    /// Upper bound on the L2 distance between consecutive frames.
    pub fn step_bound(&self, num_pixels: usize) -> f64 {
        match *self {
            PerturbationKind::NoiseWalk { step_rms } => step_rms * (num_pixels as f64).sqrt(),
            PerturbationKind::BrightnessWalk { step } => step * (num_pixels as f64).sqrt(),
            // Linear interpolation along x is 1-Lipschitz in the shift for pixels in [0, 1].
            PerturbationKind::ShiftWalk { step_px } => step_px * (num_pixels as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSequence {
    pub kind: PerturbationKind,
    pub frames: Vec<Image>,
}

impl PerturbationSequence {
    pub fn base(&self) -> &Image {
        &self.frames[0]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn build_perturbation_sequence(
    image: &Image,
    kind: PerturbationKind,
    length: usize,
    seed: u64,
) -> Result<PerturbationSequence> {
    if length < 2 {
        return Err(Error::validation(format!("sequence length {length} < 2")));
    }
    if !image.is_in_unit_range() {
        return Err(Error::validation("image has pixels outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(length);
    frames.push(image.clone());
    match kind {
        PerturbationKind::NoiseWalk { .. } => {
            let step_norm = kind.step_bound(image.pixels.len());
            let mut state = image.pixels.clone();
            for _ in 1..length {
                let dir: Vec<f64> = (0..state.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                for (s, d) in state.iter_mut().zip(&dir) {
                    *s += step_norm * d / norm;
                }
                let mut frame = image.with_pixels(state.clone());
                frame.clamp_unit();
                frames.push(frame);
            }
        }
        PerturbationKind::BrightnessWalk { step } => {
            let mut offset = 0.0;
            for _ in 1..length {
                offset += if rng.gen::<bool>() { step } else { -step };
                let mut frame = image.map(|p| p + offset);
                frame.clamp_unit();
                frames.push(frame);
            }
        }
        PerturbationKind::ShiftWalk { step_px } => {
            let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            for t in 1..length {
                frames.push(shift_horizontal(image, dir * step_px * t as f64));
            }
        }
    }
    Ok(PerturbationSequence { kind, frames })
}

fn shift_horizontal(image: &Image, dx: f64) -> Image {
    let mut out = image.clone();
    let fl = dx.floor();
    let frac = dx - fl;
    for y in 0..image.height {
        for x in 0..image.width {
            let sx = x as isize - fl as isize;
            for c in 0..image.channels {
                let v = (1.0 - frac) * image.get_clamped(y as isize, sx, c) + frac * image.get_clamped(y as isize, sx - 1, c);
                let i = out.idx(y, x, c);
                out.pixels[i] = v;
            }
        }
    }
    out
}
