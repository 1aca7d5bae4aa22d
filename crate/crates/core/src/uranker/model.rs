use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::checkpoint::{self, ModelKind};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;

use super::config::URankerConfig;
use super::histogram::batch_histograms;
use super::parallel::{DcpbGroup, MultiScaleFeatures};
use super::serial::SerialBlock;
use super::tokens::TokenSequence;

/// The ranker: serial pyramid, parallel cross-scale groups, and one affine
/// score head per parallel scale; the score is the mean of the heads.
#[derive(Debug)]
pub struct URanker {
    config: URankerConfig,
    params: ParamStore,
    serial: Vec<SerialBlock>,
    groups: Vec<DcpbGroup>,
    head_norms: Vec<LayerNorm>,
    heads: Vec<Linear>,
}

impl URanker {
    pub fn new(config: URankerConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed, dtype, device.clone());
        let serial = (0..config.num_scales())
            .map(|s| SerialBlock::new(&params, &config, s))
            .collect::<Result<Vec<_>>>()?;
        let groups = (0..config.dcpb_groups)
            .map(|g| DcpbGroup::new(&params, &config, g))
            .collect::<Result<Vec<_>>>()?;
        let first = config.first_parallel_scale();
        let mut head_norms = Vec::new();
        let mut heads = Vec::new();
        for (p, &w) in config.widths[first..].iter().enumerate() {
            head_norms.push(LayerNorm::new(&params, &format!("head{p}.norm"), w)?);
            heads.push(Linear::new(&params, &format!("head{p}.fc"), w, 1, true)?);
        }
        Ok(Self {
            config,
            params,
            serial,
            groups,
            head_norms,
            heads,
        })
    }

    pub fn load(weights: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let config: URankerConfig = checkpoint::read_config(weights, ModelKind::URanker)?;
        let mut model = Self::new(config, 0, dtype, device)?;
        model.params.load(weights)?;
        Ok(model)
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        checkpoint::save(weights, ModelKind::URanker, &self.config, &self.params)
    }

    pub fn config(&self) -> &URankerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn serial_blocks(&self) -> &[SerialBlock] {
        &self.serial
    }

    pub fn dcpb_groups(&self) -> &[DcpbGroup] {
        &self.groups
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let stride = self.config.total_stride();
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if h < stride || w < stride || h % stride != 0 || w % stride != 0 {
            return Err(Error::InvalidInput(format!(
                "{h}x{w} input must be a nonzero multiple of the total stride {stride}"
            )));
        }
        Ok(())
    }

    /// Serial outputs of every scale.
    pub fn serial_features(&self, images: &Tensor) -> Result<Vec<TokenSequence>> {
        self.check_input(images)?;
        let hist = batch_histograms(images, self.config.hist_bins)?;
        let mut feats = images.clone();
        let mut out = Vec::with_capacity(self.serial.len());
        for block in &self.serial {
            let seq = block.forward(&feats, &hist)?;
            feats = seq.spatial()?;
            out.push(seq);
        }
        Ok(out)
    }

    /// Features after the last parallel group.
    pub fn features(&self, images: &Tensor) -> Result<MultiScaleFeatures> {
        let serial = self.serial_features(images)?;
        let first = self.config.first_parallel_scale();
        let mut ms = MultiScaleFeatures::new(serial.into_iter().skip(first).collect())?;
        for g in &self.groups {
            ms = g.forward(&ms)?;
        }
        Ok(ms)
    }

    /// `(B, P)` per-scale scores.
    pub fn head_scores(&self, ms: &MultiScaleFeatures) -> Result<Tensor> {
        let mut cols = Vec::with_capacity(self.heads.len());
        for ((cls, norm), head) in ms.class_tokens()?.iter().zip(&self.head_norms).zip(&self.heads) {
            cols.push(head.forward(&norm.forward(&cls.squeeze(1)?)?)?);
        }
        Ok(Tensor::cat(&cols, 1)?)
    }

    /// `(B, 3, H, W)` to `(B,)` quality scores; higher is better. Height and
    /// width must be multiples of the total stride.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let ms = self.features(images)?;
        Ok(self.head_scores(&ms)?.mean(1)?)
    }

    /// Scores one image after fitting it to the stride.
    pub fn score(&self, image: &ImageTensor) -> Result<f32> {
        if image.num_pixels() == 0 {
            return Err(Error::InvalidInput("empty image".into()));
        }
        let fitted = image.fit_to_stride(self.config.total_stride(), self.config.max_side)?;
        let t = fitted.to_tensor(self.device(), self.dtype())?;
        Ok(self.forward(&t)?.to_dtype(DType::F32)?.to_vec1::<f32>()?[0])
    }
}
