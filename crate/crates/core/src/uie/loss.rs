//! Content loss plus the frozen-ranker quality loss.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::fitted_size;
use crate::nn::resize_bilinear;
use crate::runconfig::{parse_num, KeyValue};
use crate::uranker::URanker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContentLoss {
    L1,
    L2,
}

impl fmt::Display for ContentLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContentLoss::L1 => "l1",
            ContentLoss::L2 => "l2",
        })
    }
}

impl FromStr for ContentLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(ContentLoss::L1),
            "l2" => Ok(ContentLoss::L2),
            _ => Err(Error::Config(format!("unknown content loss {s:?}; use l1 or l2"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UieLossConfig {
    /// Weight of the ranker term.
    pub lambda: f64,
    pub content: ContentLoss,
}

impl Default for UieLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            content: ContentLoss::L1,
        }
    }
}

impl UieLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

impl KeyValue for UieLossConfig {
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = parse_num(key, value)?,
            "content_loss" => self.content = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("lambda".into(), self.lambda.to_string()),
            ("content_loss".into(), self.content.to_string()),
        ]
    }
}

pub fn content_loss(enhanced: &Tensor, gt: &Tensor, kind: ContentLoss) -> Result<Tensor> {
    if enhanced.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "enhanced {:?} vs reference {:?}",
            enhanced.dims(),
            gt.dims()
        )));
    }
    let diff = (enhanced - gt)?;
    Ok(match kind {
        ContentLoss::L1 => diff.abs()?.mean_all()?,
        ContentLoss::L2 => diff.sqr()?.mean_all()?,
    })
}

/// Batch mean of `sigmoid(-score)`. The images go to the ranker at their own
/// size when it is stride compatible and are resized bilinearly otherwise.
/// Gradients reach the images; the caller keeps the ranker out of its
/// optimizer.
pub fn uranker_loss(ranker: &URanker, enhanced: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = enhanced.dims4()?;
    let cfg = ranker.config();
    let (fh, fw) = fitted_size(h, w, cfg.total_stride(), cfg.max_side)?;
    let input = if (fh, fw) == (h, w) {
        enhanced.clone()
    } else {
        resize_bilinear(enhanced, fh, fw)?
    };
    let input = input.to_dtype(ranker.dtype())?;
    let scores = ranker.forward(&input)?;
    Ok(candle_nn::ops::sigmoid(&scores.neg()?)?
        .mean_all()?
        .to_dtype(enhanced.dtype())?)
}

/// The parts of one training objective, kept apart for logging.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub content: Tensor,
    /// Present whenever a ranker was supplied, even with `lambda = 0`.
    pub ranker: Option<Tensor>,
    pub total: Tensor,
}

/// `content + lambda * ranker`. With `lambda = 0` the total is the content
/// tensor itself.
pub fn total_uie_loss(
    enhanced: &Tensor,
    gt: &Tensor,
    config: &UieLossConfig,
    ranker: Option<&URanker>,
) -> Result<LossTerms> {
    config.validate()?;
    if config.lambda > 0.0 && ranker.is_none() {
        return Err(Error::Config("lambda > 0 needs a ranker checkpoint".into()));
    }
    let content = content_loss(enhanced, gt, config.content)?;
    let ranker = ranker.map(|r| uranker_loss(r, enhanced)).transpose()?;
    let total = match &ranker {
        Some(r) if config.lambda > 0.0 => (&content + (r * config.lambda)?)?,
        _ => content.clone(),
    };
    Ok(LossTerms { content, ranker, total })
}
