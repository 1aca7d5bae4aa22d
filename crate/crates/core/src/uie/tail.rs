//! Output tails. The normalization tail rescales a channel to `[0, 1]` only
//! when it overflows; in-range channels pass through untouched.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::instance_normalize;

/// Guard added to the rescaling denominator.
pub const TAIL_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailKind {
    /// Rescale overflowing channels (the default).
    Normalize,
    /// Raw output.
    None,
    Clip,
    Sigmoid,
    InstanceNormSigmoid,
    InstanceNormClip,
}

impl TailKind {
    pub const ALL: [TailKind; 6] = [
        TailKind::Normalize,
        TailKind::None,
        TailKind::Clip,
        TailKind::Sigmoid,
        TailKind::InstanceNormSigmoid,
        TailKind::InstanceNormClip,
    ];

    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            TailKind::Normalize => normalization_tail(x)?,
            TailKind::None => x.clone(),
            TailKind::Clip => x.clamp(0f32, 1f32)?,
            TailKind::Sigmoid => candle_nn::ops::sigmoid(x)?,
            TailKind::InstanceNormSigmoid => candle_nn::ops::sigmoid(&instance_normalize(x, 1e-5)?)?,
            TailKind::InstanceNormClip => instance_normalize(x, 1e-5)?.clamp(0f32, 1f32)?,
        })
    }
}

impl fmt::Display for TailKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailKind::Normalize => "normalize",
            TailKind::None => "none",
            TailKind::Clip => "clip",
            TailKind::Sigmoid => "sigmoid",
            TailKind::InstanceNormSigmoid => "in-sigmoid",
            TailKind::InstanceNormClip => "in-clip",
        })
    }
}

impl FromStr for TailKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TailKind::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown tail {s:?}")))
    }
}

/// Scalar form on one channel. Returns whether the channel was rescaled.
pub fn normalize_channel(values: &mut [f32]) -> bool {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo < 0.0 || hi > 1.0) {
        return false;
    }
    // Same f32 operation order as the tensor form.
    let den = (hi - lo) + TAIL_DELTA as f32;
    for v in values.iter_mut() {
        *v = (*v - lo) / den;
    }
    true
}

/// Applies [`normalize_channel`] to every channel of a CHW buffer.
pub fn normalize_image(img: &mut crate::image::ImageTensor) {
    for c in 0..3 {
        normalize_channel(img.channel_mut(c));
    }
}

/// Differentiable form on a `(B, C, H, W)` tensor: each `(b, c)` plane whose
/// minimum is below 0 or maximum above 1 becomes
/// `(x - min) / (max - min + delta)`; other planes are selected unchanged.
pub fn normalization_tail(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let lo = flat.min_keepdim(2)?;
    let hi = flat.max_keepdim(2)?;
    let overflow = (lo.lt(0.0)?.to_dtype(DType::U8)? + hi.gt(1.0)?.to_dtype(DType::U8)?)?.gt(0u8)?;
    let scaled = flat
        .broadcast_sub(&lo)?
        .broadcast_div(&((&hi - &lo)? + TAIL_DELTA)?)?;
    let mask = overflow.broadcast_as((b, c, h * w))?;
    Ok(mask.where_cond(&scaled, &flat)?.reshape((b, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn plane(v: &[f32]) -> Tensor {
        Tensor::from_slice(v, (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn hand_evaluated_example() {
        let mut v = [-0.2f32, 0.4, 1.1];
        assert!(normalize_channel(&mut v));
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.6 / 1.3).abs() < 1e-6);
        assert!((v[2] - 1.0).abs() < 1e-6);
        let t = normalization_tail(&plane(&[-0.2, 0.4, 1.1])).unwrap();
        assert_eq!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap(), v.to_vec());
    }

    #[test]
    fn in_range_channel_is_bitwise_unchanged() {
        let v = [0.0f32, 0.123_456_7, 0.999_999_9, 1.0];
        let mut w = v;
        assert!(!normalize_channel(&mut w));
        assert_eq!(w, v);
        let t = normalization_tail(&plane(&v)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bits: Vec<u32> = t.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits, v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn constant_overflow_becomes_zero() {
        let x = Tensor::full(2f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let y = normalization_tail(&x).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let mut v = [2.0f32; 5];
        normalize_channel(&mut v);
        assert_eq!(v, [0.0; 5]);
    }

    #[test]
    fn channels_are_independent() {
        let data: Vec<f32> = vec![0.1, 0.5, /* */ -1.0, 3.0, /* */ 0.2, 0.3];
        let x = Tensor::from_vec(data, (1, 3, 1, 2), &Device::Cpu).unwrap();
        let y = normalization_tail(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&y[..2], &[0.1, 0.5]);
        assert_eq!(y[2], 0.0);
        assert!((y[3] - 1.0).abs() < 1e-6);
        assert_eq!(&y[4..], &[0.2, 0.3]);
    }

    #[test]
    fn gradient_flows_through_rescaled_planes() {
        let x = Var::new(&[[[[-0.5f64, 0.25, 1.5]]]], &Device::Cpu).unwrap();
        let y = normalization_tail(x.as_tensor()).unwrap();
        // d/dx_mid of (x_mid - lo)/(hi - lo) = 1/(hi - lo) = 0.5
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((g[1] - 0.5).abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn tail_kinds_parse_and_bound() {
        let x = Tensor::from_vec(vec![-2f32, 0.5, 3.0, 0.2], (1, 1, 2, 2), &Device::Cpu).unwrap();
        for k in TailKind::ALL {
            assert_eq!(k.to_string().parse::<TailKind>().unwrap(), k);
            let y = k.apply(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            if k != TailKind::None {
                assert!(y.iter().all(|v| (0.0..=1.0).contains(v)), "{k}: {y:?}");
            }
        }
        assert!("bogus".parse::<TailKind>().is_err());
    }

    fn channel_strategy() -> impl Strategy<Value = Vec<f32>> {
        prop_oneof![
            prop::collection::vec(0.0f32..=1.0, 1..40),
            prop::collection::vec(-3.0f32..0.0, 1..40),
            prop::collection::vec(1.0001f32..4.0, 1..40),
            prop::collection::vec(-2.0f32..3.0, 1..40),
            (-5.0f32..5.0, 1usize..40).prop_map(|(v, n)| vec![v; n]),
        ]
    }

    proptest! {
        #[test]
        fn idempotent_bounded_and_order_preserving(v in channel_strategy()) {
            let mut once = v.clone();
            let rescaled = normalize_channel(&mut once);
            prop_assert!(once.iter().all(|x| (0.0..=1.0).contains(x)));
            let mut twice = once.clone();
            prop_assert!(!normalize_channel(&mut twice));
            prop_assert_eq!(&twice, &once);
            if !rescaled {
                prop_assert_eq!(&once, &v);
            }
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(once[i] <= once[j]);
                    }
                }
            }
            let t = normalization_tail(&plane(&v)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            prop_assert_eq!(t, once);
        }
    }
}
