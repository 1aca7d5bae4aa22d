//! Small differentiable building blocks shared by both networks.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), (d_out, d_in), Init::Normal { std: 0.02 })?;
        let bias = if bias {
            Some(ps.get(&format!("{name}.bias"), d_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let flat = x.reshape((rows, d_in))?;
        let y = flat.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.c_in;
        self
    }
}

impl Conv2d {
    pub fn new(ps: &ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        let per_group = spec.c_in / spec.groups;
        let fan_in = per_group * spec.kernel * spec.kernel;
        let weight = ps.get(
            &format!("{name}.weight"),
            (spec.c_out, per_group, spec.kernel, spec.kernel),
            Init::FanIn { fan_in },
        )?;
        let bias = if spec.bias {
            Some(ps.get(&format!("{name}.bias"), spec.c_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Normalizes over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.get(&format!("{name}.gamma"), dim, Init::Ones)?,
            beta: ps.get(&format!("{name}.beta"), dim, Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dims of `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(ps: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.get(&format!("{name}.gamma"), (1, channels, 1, 1), Init::Ones)?,
            beta: ps.get(&format!("{name}.beta"), (1, channels, 1, 1), Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = instance_normalize(x, self.eps)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Parameter-free instance normalization.
pub fn instance_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// 2x2 max pooling with stride 2 built from reductions. Candle's own
/// `max_pool2d` scales its gradient by the window size.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let windows = x.contiguous()?.reshape((b, c, h / 2, 2, w / 2, 2))?;
    Ok(windows.max(5)?.max(3)?)
}

/// Nearest-neighbour 2x upsampling as a broadcast, so gradients accumulate
/// like any other use of the input.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?;
    Ok(y.contiguous()?.reshape((b, c, 2 * h, 2 * w))?)
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Row-stochastic `(out, in)` interpolation matrix for 1-D bilinear
/// resampling with half-pixel centers (edges clamped).
pub fn bilinear_weights(out_len: usize, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

/// Bilinear resampling of `(B, C, h, w)` to `(B, C, out_h, out_w)` as two
/// matrix products, so it is differentiable end to end.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let device = x.device();
    let rows = interp_matrix(out_h, h, dtype, device)?;
    let cols = interp_matrix(out_w, w, dtype, device)?;
    let y = x.broadcast_matmul(&cols.t()?)?;
    Ok(rows.broadcast_matmul(&y)?)
}

fn interp_matrix(out_len: usize, in_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = bilinear_weights(out_len, in_len);
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_and_upsampling_gradients() {
        let x = candle_core::Var::new(&[[[[1.0f64, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 6.0]]]], &Device::Cpu).unwrap();
        let p = max_pool2x2(x.as_tensor()).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 7.0]);
        let g = p.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

        let y = candle_core::Var::new(&[[[[1.0f64, 2.0]]]], &Device::Cpu).unwrap();
        let u = upsample2x(y.as_tensor()).unwrap();
        assert_eq!(u.dims(), &[1, 1, 2, 4]);
        assert_eq!(u.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let both = (u.sum_all().unwrap() + y.as_tensor().sum_all().unwrap()).unwrap();
        let g = both.backward().unwrap();
        assert_eq!(g.get(y.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for &(o, i) in &[(4, 8), (8, 4), (3, 3), (1, 5), (5, 1)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::full(0.25f32, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let x = Tensor::from_vec(vec![0f32, 1., 2., 3.], (1, 1, 1, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 1, 2).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.5, 2.5]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ps = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&ps, "ln", 4).unwrap();
        let x = Tensor::from_vec(vec![1f64, 2., 3., 10.], (1, 4), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
