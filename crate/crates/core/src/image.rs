//! Image containers shared by every stage of the pipeline.
//!
//! Pixels are stored channel-major (`C × H × W`) as `f32`. The canonical
//! domain at dataset boundaries is `[0, 1]`; diffusion operates on `[-1, 1]`.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Tolerance for declared value ranges.
pub const RANGE_SLACK: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Canonical pixel domain `[0, 1]`.
    Unit,
    /// Diffusion domain `[-1, 1]`.
    Signed,
    /// Noised states; no bound.
    Unbounded,
}

impl ValueRange {
    pub fn bounds(self) -> Option<(f32, f32)> {
        match self {
            ValueRange::Unit => Some((0.0, 1.0)),
            ValueRange::Signed => Some((-1.0, 1.0)),
            ValueRange::Unbounded => None,
        }
    }

    fn check(self, data: &[f32]) -> Result<()> {
        let Some((lo, hi)) = self.bounds() else {
            return if data.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(validation("non-finite pixel value"))
            };
        };
        match data
            .iter()
            .find(|v| !(**v >= lo - RANGE_SLACK && **v <= hi + RANGE_SLACK))
        {
            Some(v) => Err(validation(format!(
                "pixel value {v} outside declared range [{lo}, {hi}]"
            ))),
            None => Ok(()),
        }
    }
}

/// A single `C × H × W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "empty image shape ({channels}, {height}, {width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values for image shape ({channels}, {height}, {width})",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    pub fn clamp_unit(mut self) -> Image {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Largest absolute difference to another image of the same shape.
    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Mean absolute response of the 4-neighbour Laplacian over interior pixels.
    ///
    /// Used as a high-frequency energy statistic.
    pub fn mean_abs_laplacian(&self) -> f64 {
        if self.height < 3 || self.width < 3 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for c in 0..self.channels {
            for y in 1..self.height - 1 {
                for x in 1..self.width - 1 {
                    let lap = self.get(c, y - 1, x)
                        + self.get(c, y + 1, x)
                        + self.get(c, y, x - 1)
                        + self.get(c, y, x + 1)
                        - 4.0 * self.get(c, y, x);
                    acc += lap.abs() as f64;
                    count += 1;
                }
            }
        }
        acc / count as f64
    }
}

/// A rank-4 `(N, C, H, W)` batch with a declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    shape: (usize, usize, usize, usize),
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageBatch {
    pub fn new(
        shape: (usize, usize, usize, usize),
        data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        let (n, c, h, w) = shape;
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty batch shape {shape:?}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("{c} channels; expected 1 or 3")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "buffer of {} values for batch shape {shape:?}",
                data.len()
            )));
        }
        range.check(&data)?;
        Ok(Self { shape, data, range })
    }

    pub fn from_images(images: &[Image], range: ValueRange) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image list".into()))?;
        let (c, h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(Error::Shape(format!(
                    "image shape {:?} differs from batch shape {:?}",
                    img.shape(),
                    (c, h, w)
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Self::new((images.len(), c, h, w), data, range)
    }

    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new((n, c, h, w), data, range)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape, device)?)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    /// Per-image `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.shape.1, self.shape.2, self.shape.3)
    }

    pub fn len(&self) -> usize {
        self.shape.0
    }

    pub fn is_empty(&self) -> bool {
        self.shape.0 == 0
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn image(&self, i: usize) -> Image {
        let (_, c, h, w) = self.shape;
        let n = c * h * w;
        Image {
            channels: c,
            height: h,
            width: w,
            data: self.data[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn images(&self) -> impl Iterator<Item = Image> + '_ {
        (0..self.len()).map(|i| self.image(i))
    }

    /// Maps `[0, 1]` data affinely onto `[-1, 1]`; other ranges pass through.
    pub fn to_signed(&self) -> ImageBatch {
        match self.range {
            ValueRange::Unit => ImageBatch {
                shape: self.shape,
                data: self.data.iter().map(|v| v * 2.0 - 1.0).collect(),
                range: ValueRange::Signed,
            },
            _ => self.clone(),
        }
    }

    /// Maps diffusion-domain data back to `[0, 1]`, clamping.
    pub fn to_unit(&self) -> ImageBatch {
        let data = match self.range {
            ValueRange::Unit => self.data.clone(),
            _ => self
                .data
                .iter()
                .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect(),
        };
        ImageBatch {
            shape: self.shape,
            data,
            range: ValueRange::Unit,
        }
    }
}
