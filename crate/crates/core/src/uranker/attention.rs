//! Conv-attention: multi-head attention with a depthwise-convolutional
//! relative position term on image tokens, plus the convolutional position
//! encoding applied before it.

use candle_core::{Tensor, D};
use candle_nn::ops::softmax;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;

use super::config::AttentionKind;
use super::tokens::{spatial_to_tokens, tokens_to_spatial};

/// Where the image tokens sit in a `(B, N, C)` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    /// Leading tokens without a spatial position.
    pub special: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenLayout {
    pub fn new(special: usize, height: usize, width: usize) -> Self {
        Self {
            special,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.special + self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, n, _) = x.dims3()?;
        if n != self.len() {
            return Err(Error::Shape(format!(
                "{n} tokens, layout expects {} + {}x{}",
                self.special, self.height, self.width
            )));
        }
        Ok(())
    }

    fn split(&self, x: &Tensor, dim: usize) -> Result<(Tensor, Tensor)> {
        let special = x.narrow(dim, 0, self.special)?;
        let img = x.narrow(dim, self.special, self.height * self.width)?;
        Ok((special, img))
    }
}

#[derive(Debug, Clone)]
pub struct ConvAttention {
    qkv: Linear,
    proj: Linear,
    rel_pos: Option<Conv2d>,
    heads: usize,
    kind: AttentionKind,
}

impl ConvAttention {
    pub fn new(
        ps: &ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        kind: AttentionKind,
        positional: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible into {heads} heads")));
        }
        let rel_pos = if positional {
            Some(Conv2d::new(
                ps,
                &format!("{name}.rel_pos"),
                ConvSpec::new(dim, dim, 3).depthwise(),
            )?)
        } else {
            None
        };
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, true)?,
            rel_pos,
            heads,
            kind,
        })
    }

    /// Shape preserving: `(B, N, C)` to `(B, N, C)`.
    pub fn forward(&self, x: &Tensor, layout: TokenLayout) -> Result<Tensor> {
        layout.check(x)?;
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;

        let att = match self.kind {
            AttentionKind::Factorized => {
                let k_soft = softmax(&k, 2)?;
                let context = k_soft.transpose(2, 3)?.contiguous()?.matmul(&v)?;
                (q.matmul(&context)? * scale)?
            }
            AttentionKind::Plain => {
                let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
                softmax(&scores, D::Minus1)?.matmul(&v)?
            }
        };
        let out = match &self.rel_pos {
            Some(conv) => (att + self.relative_position(conv, &q, &v, layout)?)?,
            None => att,
        };
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }

    /// `q ⊙ dwconv(v)` on image tokens, zero on special tokens.
    fn relative_position(&self, conv: &Conv2d, q: &Tensor, v: &Tensor, layout: TokenLayout) -> Result<Tensor> {
        let (b, h, _, hd) = q.dims4()?;
        let (q_special, q_img) = layout.split(q, 2)?;
        let (_, v_img) = layout.split(v, 2)?;
        // (B, heads, HW, hd) -> (B, HW, heads*hd) -> spatial
        let v_tokens = v_img.transpose(1, 2)?.contiguous()?.reshape((b, layout.height * layout.width, h * hd))?;
        let v_map = tokens_to_spatial(&v_tokens, layout.height, layout.width)?;
        let conv_v = spatial_to_tokens(&conv.forward(&v_map)?)?
            .reshape((b, layout.height * layout.width, h, hd))?
            .transpose(1, 2)?;
        let img = (q_img * conv_v)?;
        let zeros = q_special.zeros_like()?;
        Ok(Tensor::cat(&[&zeros, &img], 2)?)
    }
}

/// Depthwise 3x3 convolution added residually to the image tokens.
#[derive(Debug, Clone)]
pub struct ConvPosEnc {
    conv: Conv2d,
}

impl ConvPosEnc {
    pub fn new(ps: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, name, ConvSpec::new(dim, dim, 3).depthwise())?,
        })
    }

    pub fn forward(&self, x: &Tensor, layout: TokenLayout) -> Result<Tensor> {
        layout.check(x)?;
        let (special, img) = layout.split(x, 1)?;
        let map = tokens_to_spatial(&img, layout.height, layout.width)?;
        let map = (self.conv.forward(&map)? + map)?;
        Ok(Tensor::cat(&[&special, &spatial_to_tokens(&map)?], 1)?)
    }
}

/// Position encoding, pre-norm conv-attention and pre-norm feed-forward,
/// each with a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub(crate) cpe: Option<ConvPosEnc>,
    pub(crate) norm1: LayerNorm,
    pub(crate) attn: ConvAttention,
    pub(crate) norm2: LayerNorm,
    pub(crate) mlp: Mlp,
}

impl AttentionLayer {
    pub fn new(
        ps: &ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        kind: AttentionKind,
        positional: bool,
    ) -> Result<Self> {
        let cpe = if positional {
            Some(ConvPosEnc::new(ps, &format!("{name}.cpe"), dim)?)
        } else {
            None
        };
        Ok(Self {
            cpe,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: ConvAttention::new(ps, &format!("{name}.attn"), dim, heads, kind, positional)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        })
    }

    /// Position encoding followed by the attention branch; returns
    /// `(encoded input, attention output)` so callers can mix the attention
    /// output before the residual add.
    pub fn attend(&self, x: &Tensor, layout: TokenLayout) -> Result<(Tensor, Tensor)> {
        let x = match &self.cpe {
            Some(cpe) => cpe.forward(x, layout)?,
            None => x.clone(),
        };
        let y = self.attn.forward(&self.norm1.forward(&x)?, layout)?;
        Ok((x, y))
    }

    pub fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.mlp.forward(&self.norm2.forward(x)?)?)?)
    }

    pub fn forward(&self, x: &Tensor, layout: TokenLayout) -> Result<Tensor> {
        let (x, y) = self.attend(x, layout)?;
        self.feed_forward(&(x + y)?)
    }
}
