//! RGB float images and their conversions to/from tensors and 8-bit PNG.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// Three-channel image stored planar (CHW), values nominally in `[0, 1]`.
///
/// Values outside the nominal range are allowed; enhancement networks produce
/// them before their output tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a 3x{height}x{width} image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    /// Builds an image from a `(channel, y, x) -> value` function.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
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

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.num_pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.num_pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let (h, w) = (h as usize, w as usize);
        let mut data = vec![0f32; Self::CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..Self::CHANNELS {
                let v = self.get(c, y as usize, x as usize).clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Quantizes to the 8-bit grid, i.e. what a PNG round trip would give.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, Self::CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks same-sized images into a `(B, 3, H, W)` tensor.
    pub fn stack(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack an empty image list".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::Shape(format!(
                    "cannot stack {}x{} with {h}x{w}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), Self::CHANNELS, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4 tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    /// Splits a `(B, 3, H, W)` tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Self>> {
        let (b, _, _, _) = t.dims4()?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Bilinear resize. Returns a clone when the size already matches.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..Self::CHANNELS {
                px.0[c] = self.get(c, y as usize, x as usize);
            }
        }
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Self::from_fn(height, width, |c, y, x| out.get_pixel(x as u32, y as u32).0[c])
    }

    /// Resizes so that both sides are the nearest multiple of `stride`, after
    /// shrinking to at most `max_side` on the long side.
    pub fn fit_to_stride(&self, stride: usize, max_side: usize) -> Result<Self> {
        let (h, w) = fitted_size(self.height, self.width, stride, max_side)?;
        Ok(self.resize(h, w))
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }
}

/// Target size for [`ImageTensor::fit_to_stride`].
pub fn fitted_size(height: usize, width: usize, stride: usize, max_side: usize) -> Result<(usize, usize)> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput("image has zero pixels".into()));
    }
    if stride == 0 || max_side < stride {
        return Err(Error::Config(format!(
            "stride {stride} incompatible with max side {max_side}"
        )));
    }
    let long = height.max(width) as f64;
    let scale = if long > max_side as f64 {
        max_side as f64 / long
    } else {
        1.0
    };
    let snap = |side: usize| {
        let scaled = side as f64 * scale;
        let k = (scaled / stride as f64).round().max(1.0) as usize;
        let k = k.min(max_side / stride);
        k * stride
    };
    Ok((snap(height), snap(width)))
}
