//! Histogram prior: per-channel color histograms embedded as one token per scale.

use candle_core::{Device, DType, Tensor};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::Linear;
use crate::params::ParamStore;

/// Per-channel normalized histogram, stored channel-major (`[r bins, g bins, b bins]`).
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramVector {
    bins: usize,
    values: Vec<f32>,
}

impl HistogramVector {
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Flattened `3 * bins` vector.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.values[c * self.bins..(c + 1) * self.bins]
    }

    pub fn zeros(bins: usize) -> Self {
        Self {
            bins,
            values: vec![0.0; 3 * bins],
        }
    }

    pub fn from_values(bins: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != 3 * bins {
            return Err(Error::Shape(format!(
                "histogram needs {} values, got {}",
                3 * bins,
                values.len()
            )));
        }
        Ok(Self { bins, values })
    }
}

/// Bin index for a value; `[0, 1]` is split into `bins` equal intervals with
/// the last one closed on the right. Values are clamped first.
#[inline]
pub fn bin_index(value: f32, bins: usize) -> usize {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    ((v * bins as f32) as usize).min(bins - 1)
}

pub fn compute_channel_histogram(image: &ImageTensor, bins: usize) -> Result<HistogramVector> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    let n = image.num_pixels();
    if n == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let mut values = vec![0f32; 3 * bins];
    let mass = 1.0 / n as f64;
    for c in 0..3 {
        let mut counts = vec![0usize; bins];
        for &v in image.channel(c) {
            counts[bin_index(v, bins)] += 1;
        }
        for (b, &k) in counts.iter().enumerate() {
            values[c * bins + b] = (k as f64 * mass) as f32;
        }
    }
    Ok(HistogramVector { bins, values })
}

/// Histograms of every image in a `(B, 3, H, W)` batch as a `(B, 3 * bins)`
/// tensor. Binning is piecewise constant, so the result carries no gradient.
pub fn batch_histograms(images: &Tensor, bins: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat = images.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per_image = 3 * h * w;
    let mut out = Vec::with_capacity(b * 3 * bins);
    for i in 0..b {
        let img = ImageTensor::new(h, w, flat[i * per_image..(i + 1) * per_image].to_vec())?;
        out.extend_from_slice(compute_channel_histogram(&img, bins)?.values());
    }
    Ok(Tensor::from_vec(out, (b, 3 * bins), images.device())?.to_dtype(images.dtype())?)
}

/// Affine map from the shared `3B` histogram vector to one scale's token width.
#[derive(Debug, Clone)]
pub struct HistogramEmbedding {
    proj: Linear,
    bins: usize,
}

impl HistogramEmbedding {
    pub fn new(ps: &ParamStore, name: &str, bins: usize, width: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, name, 3 * bins, width, true)?,
            bins,
        })
    }

    /// `(B, 3 * bins)` to `(B, 1, C)`.
    pub fn forward(&self, hist: &Tensor) -> Result<Tensor> {
        let (_, n) = hist.dims2()?;
        if n != 3 * self.bins {
            return Err(Error::Shape(format!(
                "histogram of length {n}, embedding expects {}",
                3 * self.bins
            )));
        }
        Ok(self.proj.forward(hist)?.unsqueeze(1)?)
    }

    /// Embeds a single histogram into a `(1, C)` token.
    pub fn embed(&self, hist: &HistogramVector, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(hist.values(), (1, hist.values().len()), device)?.to_dtype(dtype)?;
        Ok(self.forward(&t)?.squeeze(1)?)
    }
}
