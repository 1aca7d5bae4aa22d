use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::runconfig::{parse_num, KeyValue};
use crate::uranker::URanker;

use super::loss::{content_loss, total_uie_loss, ContentLoss, UieLossConfig};
use super::net::Nu2Net;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UieRecipe {
    pub epochs: usize,
    /// Initial learning rate, annealed per epoch along a half cosine.
    pub lr: f64,
    pub batch_size: usize,
    /// Square crop side; clipped to the smallest training image.
    pub crop: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for UieRecipe {
    fn default() -> Self {
        Self {
            epochs: 250,
            lr: 1e-3,
            batch_size: 16,
            crop: 256,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl UieRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch_size and crop must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        Ok(())
    }

    /// Cosine annealing to zero over `epochs` steps, stepped once per epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs.max(1) as f64;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

impl KeyValue for UieRecipe {
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "crop" => self.crop = parse_num(key, value)?,
            "flip_prob" => self.flip_prob = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("crop".into(), self.crop.to_string()),
            ("flip_prob".into(), self.flip_prob.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UieEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of each term over the epoch.
    pub content: f64,
    pub ranker: Option<f64>,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UieTrainReport {
    /// Mean absolute error over the full training pairs before training.
    pub initial_mae: f64,
    pub final_mae: f64,
    pub epochs: Vec<UieEpochRecord>,
}

/// Mean absolute error between the network output and the reference over
/// whole images.
pub fn mean_mae(net: &Nu2Net, pairs: &[ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs".into()));
    }
    let mut sum = 0.0;
    for p in pairs {
        let x = p.input.to_tensor(net.device(), net.dtype())?;
        let y = p.gt.to_tensor(net.device(), net.dtype())?;
        sum += scalar(&content_loss(&net.forward(&x)?, &y, ContentLoss::L1)?)?;
    }
    Ok(sum / pairs.len() as f64)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn augment(img: &ImageTensor, top: usize, left: usize, crop: usize, hflip: bool, vflip: bool) -> Result<ImageTensor> {
    let mut out = img.crop(top, left, crop, crop)?;
    if hflip {
        out = out.flip_horizontal();
    }
    if vflip {
        out = out.flip_vertical();
    }
    Ok(out)
}

/// Trains `net` in place on (degraded, reference) pairs. The ranker, when
/// given, only supplies a loss term; its weights are checked bit for bit
/// after training.
pub fn train_uie(
    net: &Nu2Net,
    pairs: &[ImagePair],
    recipe: &UieRecipe,
    loss_cfg: &UieLossConfig,
    ranker: Option<&URanker>,
    mut log: Option<&mut dyn Write>,
) -> Result<UieTrainReport> {
    recipe.validate()?;
    loss_cfg.validate()?;
    if loss_cfg.lambda > 0.0 && ranker.is_none() {
        return Err(Error::Config("lambda > 0 needs a ranker checkpoint".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    for p in pairs {
        if (p.input.height(), p.input.width()) != (p.gt.height(), p.gt.width()) {
            return Err(Error::Shape(format!("pair {}: input and reference sizes differ", p.name)));
        }
    }
    let crop = pairs
        .iter()
        .map(|p| p.input.height().min(p.input.width()))
        .min()
        .unwrap_or(0)
        .min(recipe.crop);
    let ranker_before = ranker.map(|r| r.params().snapshot()).transpose()?;

    let mut opt = AdamW::new(
        net.params().vars(),
        ParamsAdamW {
            lr: recipe.lr_at(0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let initial_mae = mean_mae(net, pairs)?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut records = Vec::with_capacity(recipe.epochs);

    for epoch in 0..recipe.epochs {
        let start = Instant::now();
        let lr = recipe.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let (mut content_sum, mut ranker_sum, mut total_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(recipe.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = &pairs[i];
                let top = rng.random_range(0..=p.input.height() - crop);
                let left = rng.random_range(0..=p.input.width() - crop);
                let hflip = rng.random_bool(recipe.flip_prob);
                let vflip = rng.random_bool(recipe.flip_prob);
                inputs.push(augment(&p.input, top, left, crop, hflip, vflip)?);
                targets.push(augment(&p.gt, top, left, crop, hflip, vflip)?);
            }
            let x = ImageTensor::stack(&inputs.iter().collect::<Vec<_>>(), net.device(), net.dtype())?;
            let y = ImageTensor::stack(&targets.iter().collect::<Vec<_>>(), net.device(), net.dtype())?;
            let terms = total_uie_loss(&net.forward(&x)?, &y, loss_cfg, ranker)?;
            let total = scalar(&terms.total)?;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {total}"),
                });
            }
            opt.backward_step(&terms.total)?;
            content_sum += scalar(&terms.content)?;
            if let Some(r) = &terms.ranker {
                ranker_sum += scalar(r)?;
            }
            total_sum += total;
            steps += 1;
        }
        let n = steps as f64;
        let record = UieEpochRecord {
            epoch,
            lr,
            content: content_sum / n,
            ranker: ranker.map(|_| ranker_sum / n),
            total: total_sum / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: content {:.5} ranker {:?} lr {lr:.2e}", record.content, record.ranker);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io("<train log>", e))?;
        }
        records.push(record);
    }

    if let (Some(r), Some(before)) = (ranker, ranker_before) {
        if r.params().snapshot()? != before {
            return Err(Error::InvalidInput("ranker weights changed during enhancement training".into()));
        }
    }
    Ok(UieTrainReport {
        initial_mae,
        final_mae: mean_mae(net, pairs)?,
        epochs: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uie::Nu2NetConfig;
    use crate::uranker::URankerConfig;
    use candle_core::Device;

    fn toy_pairs(n: usize, size: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let gt = crate::dataset::base_image(size, size, &mut rng);
                let input = crate::dataset::DegradationSpec::for_severity(0.8).apply(&gt);
                ImagePair {
                    name: format!("p{i}"),
                    input,
                    gt,
                }
            })
            .collect()
    }

    #[test]
    fn cosine_schedule() {
        let r = UieRecipe::default();
        assert_eq!(r.lr_at(0), r.lr);
        assert!(r.lr_at(r.epochs - 1) < 0.01 * r.lr);
        let short = UieRecipe { epochs: 50, ..r };
        assert!(short.lr_at(49) < 0.01 * short.lr);
        assert!((short.lr_at(25) - 0.5 * short.lr).abs() < 1e-15);
    }

    #[test]
    fn ranker_is_frozen_and_terms_are_logged() {
        let dev = Device::Cpu;
        let net = Nu2Net::new(Nu2NetConfig::toy(), 0, DType::F32, &dev).unwrap();
        let ranker = URanker::new(URankerConfig::tiny(), 1, DType::F32, &dev).unwrap();
        let before = ranker.params().snapshot().unwrap();
        let recipe = UieRecipe { epochs: 2, batch_size: 2, crop: 16, ..Default::default() };
        let cfg = UieLossConfig { lambda: 0.025, ..Default::default() };
        let mut buf = Vec::new();
        let report = train_uie(&net, &toy_pairs(3, 16), &recipe, &cfg, Some(&ranker), Some(&mut buf)).unwrap();
        assert_eq!(ranker.params().snapshot().unwrap(), before);
        let lines: Vec<UieEpochRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        for (r, l) in report.epochs.iter().zip(&lines) {
            assert!((r.content - l.content).abs() < 1e-12 && r.lr == l.lr);
            let rk = r.ranker.unwrap();
            assert!((r.total - (r.content + 0.025 * rk)).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_without_ranker_is_rejected() {
        let net = Nu2Net::new(Nu2NetConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
        let cfg = UieLossConfig { lambda: 0.1, ..Default::default() };
        let err = train_uie(&net, &toy_pairs(1, 8), &UieRecipe::default(), &cfg, None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn toy_run_halves_training_mae() {
        let net = Nu2Net::new(Nu2NetConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
        let pairs = toy_pairs(16, 16);
        let recipe = UieRecipe { epochs: 50, batch_size: 4, crop: 16, ..Default::default() };
        let report = train_uie(&net, &pairs, &recipe, &UieLossConfig::default(), None, None).unwrap();
        assert!(
            report.final_mae <= 0.5 * report.initial_mae,
            "{} -> {}",
            report.initial_mae,
            report.final_mae
        );
    }
}
