//! U-shaped enhancement network built from Conv-IN-ELU blocks, with a global
//! residual from input to output and a configurable output tail.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{max_pool2x2, upsample2x, Conv2d, ConvSpec, InstanceNorm};
use crate::params::ParamStore;
use crate::runconfig::{parse_list, parse_num, KeyValue};

use super::tail::TailKind;

const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nu2NetConfig {
    /// Encoder widths, finest first. One max-pool follows each stage, so
    /// inputs are padded to a multiple of `2^widths.len()`.
    pub widths: Vec<usize>,
    /// Conv-IN-ELU blocks per stage.
    pub blocks: usize,
    pub tail: TailKind,
}

impl Default for Nu2NetConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            blocks: 2,
            tail: TailKind::Normalize,
        }
    }
}

impl Nu2NetConfig {
    /// Narrow variant for CPU smoke runs.
    pub fn toy() -> Self {
        Self {
            widths: vec![8, 16, 16],
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("bad widths {:?}", self.widths)));
        }
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        Ok(())
    }
}

impl KeyValue for Nu2NetConfig {
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "uie_widths" => self.widths = parse_list(key, value)?,
            "uie_blocks" => self.blocks = parse_num(key, value)?,
            "tail" => self.tail = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        let widths = self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("uie_widths".into(), widths),
            ("uie_blocks".into(), self.blocks.to_string()),
            ("tail".into(), self.tail.to_string()),
        ]
    }
}

#[derive(Debug, Clone)]
struct ConvInElu {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ConvInElu {
    fn new(ps: &ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), ConvSpec::new(c_in, c_out, 3))?,
            norm: InstanceNorm::new(ps, &format!("{name}.in"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.elu(ELU_ALPHA)?)
    }
}

#[derive(Debug, Clone)]
struct Stage(Vec<ConvInElu>);

impl Stage {
    fn new(ps: &ParamStore, name: &str, c_in: usize, c_out: usize, blocks: usize) -> Result<Self> {
        (0..blocks)
            .map(|b| ConvInElu::new(ps, &format!("{name}.{b}"), if b == 0 { c_in } else { c_out }, c_out))
            .collect::<Result<Vec<_>>>()
            .map(Stage)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.iter().try_fold(x.clone(), |h, b| b.forward(&h))
    }
}

#[derive(Debug)]
pub struct Nu2Net {
    config: Nu2NetConfig,
    params: ParamStore,
    encoder: Vec<Stage>,
    bottleneck: Stage,
    decoder: Vec<Stage>,
    out: Conv2d,
}

impl Nu2Net {
    pub fn new(config: Nu2NetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed, dtype, device.clone());
        let w = &config.widths;
        let n = w.len();
        let mut encoder = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { 3 } else { w[i - 1] };
            encoder.push(Stage::new(&params, &format!("enc{i}"), c_in, w[i], config.blocks)?);
        }
        let bottleneck = Stage::new(&params, "mid", w[n - 1], w[n - 1], config.blocks)?;
        // Decoder stage i sees the upsampled deeper features next to skip i.
        let mut decoder = Vec::with_capacity(n);
        for i in 0..n {
            let deeper = if i + 1 < n { w[i + 1] } else { w[n - 1] };
            decoder.push(Stage::new(&params, &format!("dec{i}"), deeper + w[i], w[i], config.blocks)?);
        }
        let out = Conv2d::new(&params, "out", ConvSpec::new(w[0], 3, 1))?;
        // Zero residual at initialization: the network starts as tail(input).
        for name in ["out.weight", "out.bias"] {
            let t = params.tensor(name).expect("just created");
            params.set(name, &t.zeros_like()?)?;
        }
        Ok(Self {
            config,
            params,
            encoder,
            bottleneck,
            decoder,
            out,
        })
    }

    pub fn load(weights: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let config: Nu2NetConfig = checkpoint::read_config(weights, ModelKind::Nu2Net)?;
        let mut net = Self::new(config, 0, dtype, device)?;
        net.params.load(weights)?;
        Ok(net)
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        checkpoint::save(weights, ModelKind::Nu2Net, &self.config, &self.params)
    }

    pub fn config(&self) -> &Nu2NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// The residual branch on an input whose sides are multiples of the
    /// stride.
    fn residual(&self, x: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for stage in &self.encoder {
            h = stage.forward(&h)?;
            skips.push(h.clone());
            h = max_pool2x2(&h)?;
        }
        h = self.bottleneck.forward(&h)?;
        for (stage, skip) in self.decoder.iter().zip(&skips).rev() {
            h = Tensor::cat(&[&upsample2x(&h)?, skip], 1)?;
            h = stage.forward(&h)?;
        }
        self.out.forward(&h)
    }

    /// `input + residual(input)` before the tail, at the input's size. Sides
    /// that are not multiples of the stride are edge-replicated for the
    /// residual branch and cropped back afterwards.
    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let s = self.config.stride();
        let (ph, pw) = (h.div_ceil(s) * s - h, w.div_ceil(s) * s - w);
        let padded = if ph + pw == 0 {
            x.clone()
        } else {
            x.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?
        };
        let mut r = self.residual(&padded)?;
        if ph + pw > 0 {
            r = r.narrow(2, 0, h)?.narrow(3, 0, w)?;
        }
        Ok((x + r)?)
    }

    /// `(B, 3, H, W)` in, same shape out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.config.tail.apply(&self.forward_raw(x)?)
    }

    /// Single-image inference.
    pub fn enhance(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let x = image.to_tensor(self.device(), self.dtype())?;
        ImageTensor::from_tensor(&self.forward(&x)?.to_dtype(DType::F32)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_residual_on_in_range_input_is_identity() {
        let net = Nu2Net::new(Nu2NetConfig::toy(), 3, DType::F32, &Device::Cpu).unwrap();
        let img = random_image(12, 10, 1);
        let out = net.enhance(&img).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn output_is_bounded_for_random_weights() {
        let net = Nu2Net::new(Nu2NetConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = net.params().tensor("out.weight").unwrap();
        let w: Vec<f32> = (0..t.elem_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
        net.params()
            .set("out.weight", &Tensor::from_vec(w, t.shape(), &Device::Cpu).unwrap())
            .unwrap();
        let x = Tensor::randn(0f32, 2.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let raw = net.forward_raw(&x).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 16, 16]);
        let lo = raw.flatten_all().unwrap().min(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(lo < 0.0, "raw output should overflow in this setup");
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn odd_sizes_keep_their_shape() {
        let net = Nu2Net::new(Nu2NetConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 13, 7), &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x).unwrap().dims(), &[1, 3, 13, 7]);
        assert!(net.forward(&Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn default_widths_and_parameter_names() {
        let net = Nu2Net::new(Nu2NetConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
        let names = net.params().names();
        assert!(names.contains(&"enc2.1.conv.weight".to_string()));
        assert!(names.contains(&"dec0.0.in.gamma".to_string()));
        let t = net.params().tensor("dec2.0.conv.weight").unwrap();
        assert_eq!(t.dims(), &[128, 256, 3, 3]);
        assert_eq!(net.config().stride(), 8);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let net = Nu2Net::new(Nu2NetConfig::toy(), 4, DType::F64, &dev).unwrap();
        // Give the residual branch something to do.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in ["out.weight", "out.bias"] {
            let t = net.params().tensor(name).unwrap();
            let v: Vec<f64> = (0..t.elem_count()).map(|_| rng.random_range(-0.3..0.3)).collect();
            net.params().set(name, &Tensor::from_vec(v, t.shape(), &dev).unwrap()).unwrap();
        }
        let img: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.2..0.8)).collect();
        let x0 = Tensor::from_vec(img.clone(), (1, 3, 8, 8), &dev).unwrap();
        let weights = Tensor::from_vec((0..3 * 64).map(|i| ((i * 7) % 11) as f64 / 11.0).collect::<Vec<_>>(), (1, 3, 8, 8), &dev).unwrap();
        let f = |x: &Tensor| -> f64 {
            (net.forward(x).unwrap() * &weights).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let var = Var::from_tensor(&x0).unwrap();
        let y = (net.forward(var.as_tensor()).unwrap() * &weights).unwrap().sum_all().unwrap();
        let grad = y.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..img.len()).step_by(5) {
            let mut p = img.clone();
            p[i] += h;
            let mut m = img.clone();
            m[i] -= h;
            let fd = (f(&Tensor::from_vec(p, (1, 3, 8, 8), &dev).unwrap()) - f(&Tensor::from_vec(m, (1, 3, 8, 8), &dev).unwrap())) / (2.0 * h);
            num += (fd - grad[i]).powi(2);
            den += fd.powi(2).max(grad[i].powi(2));
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-2, "relative error {rel}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.safetensors");
        let cfg = Nu2NetConfig {
            tail: TailKind::Clip,
            ..Nu2NetConfig::toy()
        };
        let net = Nu2Net::new(cfg.clone(), 11, DType::F32, &Device::Cpu).unwrap();
        net.save(&path).unwrap();
        let back = Nu2Net::load(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(back.params().snapshot().unwrap(), net.params().snapshot().unwrap());
        assert!(crate::uranker::URanker::load(&path, DType::F32, &Device::Cpu).is_err());
    }
}
