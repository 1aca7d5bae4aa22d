use candle_core::Tensor;

use crate::error::{Error, Result};

/// Class token and histogram token precede the image tokens.
pub const SPECIAL_TOKENS: usize = 2;

/// `(B, N, C)` token batch laid out as `[class, histogram, image tokens...]`
/// where the image tokens cover an `height x width` grid in row-major order.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    tokens: Tensor,
    height: usize,
    width: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != SPECIAL_TOKENS + height * width {
            return Err(Error::Shape(format!(
                "{n} tokens do not match {SPECIAL_TOKENS} + {height}x{width}"
            )));
        }
        Ok(Self {
            tokens,
            height,
            width,
        })
    }

    /// Assembles a sequence from `(B, 1, C)` class and histogram tokens and a
    /// `(B, C, H, W)` feature map.
    pub fn from_parts(class: &Tensor, hist: &Tensor, spatial: &Tensor) -> Result<Self> {
        let (_, _, h, w) = spatial.dims4()?;
        let img = spatial.flatten_from(2)?.transpose(1, 2)?;
        let tokens = Tensor::cat(&[class, hist, &img], 1)?;
        Self::new(tokens, h, w)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        if tokens.dims() != self.tokens.dims() {
            return Err(Error::Shape(format!(
                "replacement tokens {:?} differ from {:?}",
                tokens.dims(),
                self.tokens.dims()
            )));
        }
        Ok(Self {
            tokens,
            height: self.height,
            width: self.width,
        })
    }

    /// `(B, 1, C)`
    pub fn class_token(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 0, 1)?)
    }

    /// `(B, 1, C)`
    pub fn hist_token(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 1, 1)?)
    }

    /// `(B, 2, C)`
    pub fn special_tokens(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 0, SPECIAL_TOKENS)?)
    }

    /// `(B, H*W, C)`
    pub fn image_tokens(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, SPECIAL_TOKENS, self.height * self.width)?)
    }

    /// Image tokens reshaped to a `(B, C, H, W)` map; special tokens excluded.
    pub fn spatial(&self) -> Result<Tensor> {
        tokens_to_spatial(&self.image_tokens()?, self.height, self.width)
    }
}

/// `(B, H*W, C)` to `(B, C, H, W)`.
pub fn tokens_to_spatial(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, n, c) = img.dims3()?;
    if n != height * width {
        return Err(Error::Shape(format!("{n} image tokens for a {height}x{width} grid")));
    }
    Ok(img.transpose(1, 2)?.contiguous()?.reshape((b, c, height, width))?)
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
pub fn spatial_to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}
