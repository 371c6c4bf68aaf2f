use crate::error::{Error, Result};
use crate::image::Image;

/// Batched activations in NHWC order. Dense layers see each sample as a flat
/// row of `height * width * channels` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Activations {
    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Activations {
            batch,
            height,
            width,
            channels,
            data: vec![0.0; batch * height * width * channels],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let features = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != features) {
            return Err(Error::validation("rows have inconsistent lengths"));
        }
        Ok(Activations {
            batch: rows.len(),
            height: 1,
            width: 1,
            channels: features,
            data: rows.concat(),
        })
    }

    /// Stacks images into a network input, centring pixel values around zero.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::validation("cannot build activations from an empty batch"))?;
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != (h, w, c) {
                return Err(Error::validation(format!(
                    "image shape {:?} does not match batch shape {:?}",
                    img.shape(),
                    (h, w, c)
                )));
            }
            data.extend(img.pixels.iter().map(|p| p - 0.5));
        }
        Ok(Activations {
            batch: images.len(),
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn from_image(image: &Image) -> Result<Self> {
        Self::from_images(&[image])
    }

    pub fn features(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.data[i * f..(i + 1) * f]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.features().max(1))
    }

    /// Copies out a subset of samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Activations {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Activations {
            batch: indices.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    /// `times` copies of the whole batch, one after another.
    pub fn repeat(&self, times: usize) -> Activations {
        Activations {
            batch: self.batch * times,
            data: self.data.repeat(times),
            ..*self
        }
    }

    pub fn concat(parts: &[Activations]) -> Result<Activations> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("nothing to concatenate"))?;
        if parts.iter().any(|p| p.sample_shape() != first.sample_shape()) {
            return Err(Error::validation("cannot concatenate activations of different shapes"));
        }
        Ok(Activations {
            batch: parts.iter().map(|p| p.batch).sum(),
            height: first.height,
            width: first.width,
            channels: first.channels,
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        })
    }
}
