use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    AutoContrast,
    Equalize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Posterize,
    Solarize,
}

impl AugOp {
    pub const ALL: &'static [AugOp] = &[
        AugOp::AutoContrast,
        AugOp::Equalize,
        AugOp::Rotate,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Posterize,
        AugOp::Solarize,
    ];

    /// Applies the op. `magnitude` lies in `[-1, 1]`; its sign only matters
    /// for geometric ops and a magnitude of exactly 0 is the identity.
    pub fn apply(self, image: &Image, magnitude: f64) -> Image {
        if magnitude == 0.0 {
            return image.clone();
        }
        let m = magnitude.clamp(-1.0, 1.0);
        let strength = m.abs();
        let (h, w) = (image.height as f64, image.width as f64);
        let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
        match self {
            AugOp::AutoContrast => blend(image, &autocontrast(image), strength),
            AugOp::Equalize => blend(image, &equalize(image), strength),
            AugOp::Rotate => {
                let (s, c) = (m * 30f64.to_radians()).sin_cos();
                warp(image, |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    (cy + c * dy - s * dx, cx + s * dy + c * dx)
                })
            }
            AugOp::ShearX => warp(image, |y, x| (y, x + 0.3 * m * (y - cy))),
            AugOp::ShearY => warp(image, |y, x| (y + 0.3 * m * (x - cx), x)),
            AugOp::TranslateX => warp(image, |y, x| (y, x - 0.3 * m * w)),
            AugOp::TranslateY => warp(image, |y, x| (y - 0.3 * m * h, x)),
            AugOp::Posterize => {
                let levels = 2f64.powf(8.0 - 6.0 * strength).round().max(2.0);
                image.map(|p| (p * (levels - 1.0)).round() / (levels - 1.0))
            }
            AugOp::Solarize => {
                let threshold = 1.0 - strength;
                image.map(|p| if p > threshold { 1.0 - p } else { p })
            }
        }
    }
}

fn blend(a: &Image, b: &Image, t: f64) -> Image {
    a.with_pixels(a.pixels.iter().zip(&b.pixels).map(|(x, y)| (1.0 - t) * x + t * y).collect())
}

fn autocontrast(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..image.channels {
        let vals = image.pixels.iter().skip(c).step_by(image.channels);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        if hi - lo < 1e-12 {
            continue;
        }
        for p in out.pixels.iter_mut().skip(c).step_by(image.channels) {
            *p = (*p - lo) / (hi - lo);
        }
    }
    out
}

fn equalize(image: &Image) -> Image {
    const BINS: usize = 32;
    let mut out = image.clone();
    let n = (image.height * image.width) as f64;
    for c in 0..image.channels {
        let mut hist = [0usize; BINS];
        for &p in image.pixels.iter().skip(c).step_by(image.channels) {
            hist[((p * BINS as f64) as usize).min(BINS - 1)] += 1;
        }
        let mut cdf = [0.0; BINS];
        let mut acc = 0usize;
        for (i, &count) in hist.iter().enumerate() {
            acc += count;
            cdf[i] = acc as f64 / n;
        }
        for p in out.pixels.iter_mut().skip(c).step_by(image.channels) {
            *p = cdf[((*p * BINS as f64) as usize).min(BINS - 1)];
        }
    }
    out
}

/// Inverse-maps every output pixel to a source location and samples it
/// bilinearly with edge clamping.
fn warp(image: &Image, src: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let (sy, sx) = src(y as f64, x as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for c in 0..image.channels {
                let v = image.get_clamped(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
                    + image.get_clamped(y0, x0 + 1, c) * (1.0 - fy) * fx
                    + image.get_clamped(y0 + 1, x0, c) * fy * (1.0 - fx)
                    + image.get_clamped(y0 + 1, x0 + 1, c) * fy * fx;
                let i = out.idx(y, x, c);
                out.pixels[i] = v;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpStep {
    pub op: AugOp,
    pub magnitude: f64,
}

/// A mixture of augmentation branches blended with the clean image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationChain {
    pub depth: usize,
    pub branches: Vec<Vec<OpStep>>,
    pub branch_weights: Vec<f64>,
    pub skip_weight: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugMixParams {
    pub width: usize,
    pub max_depth: usize,
    pub max_magnitude: f64,
}

impl Default for AugMixParams {
    fn default() -> Self {
        AugMixParams {
            width: 3,
            max_depth: 3,
            max_magnitude: 0.6,
        }
    }
}

impl AugmentationChain {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("chain depth must be at least 1"));
        }
        if self.branches.is_empty() || self.branches.iter().any(Vec::is_empty) {
            return Err(Error::validation("augmentation chain has an empty ops sequence"));
        }
        if self.branches.iter().any(|b| b.len() > self.depth) {
            return Err(Error::validation("branch longer than chain depth"));
        }
        if self
            .branches
            .iter()
            .flatten()
            .any(|s| !s.magnitude.is_finite() || s.magnitude.abs() > 1.0)
        {
            return Err(Error::validation("op magnitudes must lie in [-1, 1]"));
        }
        if self.branch_weights.len() != self.branches.len() {
            return Err(Error::validation("one branch weight per branch required"));
        }
        if self.branch_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::validation("branch weights must be non-negative"));
        }
        let total: f64 = self.branch_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("branch weights sum to {total}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.skip_weight) {
            return Err(Error::validation("skip weight must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Samples a chain: Dirichlet(1,..,1) branch weights, Beta(1,1) skip
    /// weight, uniform depth in `1..=max_depth` and uniform ops.
    pub fn sample(params: &AugMixParams, seed: u64) -> Result<Self> {
        if params.width == 0 || params.max_depth == 0 {
            return Err(Error::validation("augmix width and depth must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch_weights = if params.width == 1 {
            vec![1.0]
        } else {
            let dir = Dirichlet::new_with_size(1.0, params.width)
                .map_err(|e| Error::validation(e.to_string()))?;
            let mut w = dir.sample(&mut rng);
            let total: f64 = w.iter().sum();
            for x in &mut w {
                *x /= total;
            }
            w
        };
        let skip_weight = Beta::new(1.0, 1.0).expect("valid beta").sample(&mut rng);
        let branches = (0..params.width)
            .map(|_| {
                let depth = rng.gen_range(1..=params.max_depth);
                (0..depth)
                    .map(|_| {
                        let op = *AugOp::ALL.choose(&mut rng).expect("non-empty");
                        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                        let magnitude = sign * rng.gen_range(0.1..=1.0) * params.max_magnitude.clamp(0.0, 1.0);
                        OpStep { op, magnitude }
                    })
                    .collect()
            })
            .collect();
        let chain = AugmentationChain {
            depth: params.max_depth,
            branches,
            branch_weights,
            skip_weight,
            seed,
        };
        chain.validate()?;
        Ok(chain)
    }
}

/// `skip * image + (1 - skip) * sum_b w_b * branch_b(image)`, clamped to `[0, 1]`.
pub fn augment_chain(image: &Image, chain: &AugmentationChain) -> Result<Image> {
    chain.validate()?;
    let mut mixed = vec![0.0; image.pixels.len()];
    for (branch, &weight) in chain.branches.iter().zip(&chain.branch_weights) {
        let mut cur = image.clone();
        for step in branch {
            cur = step.op.apply(&cur, step.magnitude);
        }
        for (m, p) in mixed.iter_mut().zip(&cur.pixels) {
            *m += weight * p;
        }
    }
    let s = chain.skip_weight;
    let mut out = image.with_pixels(
        image
            .pixels
            .iter()
            .zip(&mixed)
            .map(|(x, m)| s * x + (1.0 - s) * m)
            .collect(),
    );
    out.clamp_unit();
    Ok(out)
}
