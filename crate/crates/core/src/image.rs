//! Images and labelled datasets.
//!
//! Pixels are stored row-major in HWC order with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::validation(format!(
                "pixel buffer has {} values, expected {}x{}x{}",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.idx(y, x, c)]
    }

    /// Pixel lookup with edge clamping for out-of-bounds coordinates.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        self.with_pixels(self.pixels.iter().map(|&p| f(p)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn with_pixels(&self, pixels: Vec<f64>) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, examples: Vec<Example>) -> Result<Self> {
        if let Some(bad) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                bad.label, num_classes
            )));
        }
        if let Some(first) = examples.first() {
            if examples.iter().any(|e| !e.image.same_shape(&first.image)) {
                return Err(Error::Dataset("images have inconsistent shapes".into()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.examples.first().map(|e| e.image.shape())
    }

    pub fn images(&self) -> Vec<Image> {
        self.examples.iter().map(|e| e.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}
