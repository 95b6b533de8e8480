//! The raster container shared by every stage of the pipeline.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval that pixel values are normalized into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const SIGNED_UNIT: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("empty value range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

impl Default for ValueRange {
    fn default() -> Self {
        Self::SIGNED_UNIT
    }
}

/// `C x H x W` raster stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl ImageTile {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "tile dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "tile {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
            range: ValueRange::SIGNED_UNIT,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
            range: ValueRange::SIGNED_UNIT,
        }
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
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
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Single-channel tile holding channel `c`.
    pub fn channel_tile(&self, c: usize) -> ImageTile {
        ImageTile {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
            range: self.range,
        }
    }

    pub fn same_shape(&self, other: &ImageTile) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_within_range(&self) -> bool {
        self.data.iter().all(|&v| self.range.contains(v))
    }

    /// Linear map of every pixel from the current range into `target`.
    pub fn rescaled(&self, target: ValueRange) -> ImageTile {
        let scale = target.width() / self.range.width();
        let data = self
            .data
            .iter()
            .map(|&v| (v - self.range.lo) * scale + target.lo)
            .collect();
        ImageTile {
            range: target,
            ..self.with_data(data)
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTile {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn clamped(&self) -> ImageTile {
        let r = self.range;
        self.map(|v| v.clamp(r.lo, r.hi))
    }

    fn with_data(&self, data: Vec<f32>) -> ImageTile {
        debug_assert_eq!(data.len(), self.data.len());
        ImageTile {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
            range: self.range,
        }
    }

    /// Rectangular window starting at `(y0, x0)`; must lie inside the tile.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTile> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds tile {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let start = self.index(c, y, x0);
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        ImageTile::new(self.channels, h, w, data, self.range)
    }

    pub fn flip_horizontal(&self) -> ImageTile {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Channel-wise concatenation; spatial dims must agree.
    pub fn concat_channels(tiles: &[&ImageTile]) -> Result<ImageTile> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for t in tiles {
            if (t.height, t.width) != (h, w) {
                return Err(Error::shape(format!(
                    "cannot concatenate {}x{} with {h}x{w}",
                    t.height, t.width
                )));
            }
            channels += t.channels;
            data.extend_from_slice(&t.data);
        }
        ImageTile::new(channels, h, w, data, first.range)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks same-shaped tiles into an `N x C x H x W` batch.
    pub fn batch_to_tensor(tiles: &[&ImageTile], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = tiles
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let mut data = Vec::with_capacity(tiles.len() * first.data.len());
        for t in tiles {
            if !t.same_shape(first) {
                return Err(Error::shape("batch tiles differ in shape"));
            }
            data.extend_from_slice(&t.data);
        }
        let t = Tensor::from_vec(
            data,
            (tiles.len(), first.channels, first.height, first.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `C x H x W` or `1 x C x H x W`.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<ImageTile> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::shape(format!(
                    "expected a single CxHxW image, got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        ImageTile::new(c, h, w, data, range)
    }

    /// Splits an `N x C x H x W` tensor into tiles.
    pub fn unbatch(t: &Tensor, range: ValueRange) -> Result<Vec<ImageTile>> {
        let n = t.dim(0)?;
        (0..n)
            .map(|i| ImageTile::from_tensor(&t.get(i)?, range))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_endpoints() {
        let t = ImageTile::new(1, 1, 3, vec![0.0, 127.5, 255.0], ValueRange::new(0.0, 255.0).unwrap())
            .unwrap();
        let r = t.rescaled(ValueRange::SIGNED_UNIT);
        assert_eq!(r.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn crop_out_of_bounds() {
        let t = ImageTile::filled(1, 4, 4, 0.0);
        assert!(t.crop(2, 2, 3, 1).is_err());
        assert_eq!(t.crop(1, 1, 3, 3).unwrap().dims(), (1, 3, 3));
    }

    #[test]
    fn tensor_round_trip() {
        let t = ImageTile::from_fn(3, 5, 4, |c, y, x| (c * 100 + y * 10 + x) as f32 / 1000.0);
        let back = ImageTile::from_tensor(&t.to_tensor(DType::F32, &Device::Cpu).unwrap(), t.range())
            .unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(ImageTile::new(1, 2, 2, vec![0.0; 3], ValueRange::UNIT).is_err());
    }
}
