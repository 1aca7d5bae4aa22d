use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, LayerNorm};
use crate::params::{Init, ParamStore};

use super::attention::{AttentionLayer, TokenLayout};
use super::config::URankerConfig;
use super::histogram::HistogramEmbedding;
use super::tokens::{spatial_to_tokens, tokens_to_spatial, TokenSequence, SPECIAL_TOKENS};

/// One pyramid level: strided patch embedding, then attention layers over
/// `[class, histogram, image...]` tokens.
#[derive(Debug, Clone)]
pub struct SerialBlock {
    embed: Conv2d,
    embed_norm: LayerNorm,
    class_token: Tensor,
    hist_embed: Option<HistogramEmbedding>,
    layers: Vec<AttentionLayer>,
    width: usize,
    stride: usize,
}

impl SerialBlock {
    pub fn new(ps: &ParamStore, cfg: &URankerConfig, scale: usize) -> Result<Self> {
        let name = format!("serial{scale}");
        let width = cfg.widths[scale];
        let c_in = if scale == 0 { 3 } else { cfg.widths[scale - 1] };
        let stride = cfg.embed_stride(scale);
        let embed = Conv2d::new(
            ps,
            &format!("{name}.embed"),
            ConvSpec::new(c_in, width, stride).stride(stride).padding(0),
        )?;
        let hist_embed = if cfg.histogram_prior {
            Some(HistogramEmbedding::new(ps, &format!("{name}.hist"), cfg.hist_bins, width)?)
        } else {
            None
        };
        let layers = (0..cfg.serial_depth)
            .map(|d| {
                AttentionLayer::new(
                    ps,
                    &format!("{name}.layer{d}"),
                    width,
                    cfg.heads[scale],
                    cfg.mlp_ratio,
                    cfg.attention,
                    cfg.positional,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            embed_norm: LayerNorm::new(ps, &format!("{name}.embed_norm"), width)?,
            class_token: ps.get(&format!("{name}.class_token"), (1, 1, width), Init::Normal { std: 0.02 })?,
            hist_embed,
            layers,
            width,
            stride,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Histogram token for this scale, `(B, 1, C)`; zeros when the prior is
    /// disabled so the token layout stays fixed.
    pub fn hist_token(&self, hist: &Tensor) -> Result<Tensor> {
        match &self.hist_embed {
            Some(e) => e.forward(hist),
            None => {
                let b = hist.dim(0)?;
                Ok(Tensor::zeros((b, 1, self.width), hist.dtype(), hist.device())?)
            }
        }
    }

    /// Runs the block on a `(B, C_in, H, W)` map with `(B, 3*bins)` histograms.
    /// The output sequence has `2 + (H/s)(W/s)` tokens; its image tokens form
    /// the next block's input via [`TokenSequence::spatial`].
    pub fn forward(&self, features: &Tensor, hist: &Tensor) -> Result<TokenSequence> {
        let (b, _, h, w) = features.dims4()?;
        if h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} input not divisible by embedding stride {}",
                self.stride
            )));
        }
        let embedded = self.embed.forward(features)?;
        let (oh, ow) = (h / self.stride, w / self.stride);
        let img = self.embed_norm.forward(&spatial_to_tokens(&embedded)?)?;
        let cls = self.class_token.broadcast_as((b, 1, self.width))?.contiguous()?;
        let hist_tok = self.hist_token(hist)?;
        let seq = TokenSequence::from_parts(&cls, &hist_tok, &tokens_to_spatial(&img, oh, ow)?)?;
        let layout = TokenLayout::new(SPECIAL_TOKENS, oh, ow);
        let mut x = seq.into_tokens();
        for layer in &self.layers {
            x = layer.forward(&x, layout)?;
        }
        TokenSequence::new(x, oh, ow)
    }
}
