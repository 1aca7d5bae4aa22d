use std::io::Write;
use std::time::Instant;

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageGroup;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::runconfig::{parse_num, KeyValue};
use crate::uranker::URanker;

use super::eval::{evaluate_ranker, fitted_batch, forward_images};
use super::loss::pairwise_hinge;
use super::pairs::{sample_pairs, PairStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub flip_prob: f64,
    pub margin: f64,
    pub strategy: PairStrategy,
    /// Trailing fraction of the training groups kept out for monitoring.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            flip_prob: 0.5,
            margin: 0.5,
            strategy: PairStrategy::All,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.margin <= 0.0 || !self.margin.is_finite() {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("holdout_fraction", self.holdout_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        Ok(())
    }

    fn holdout_len(&self, n: usize) -> usize {
        let h = (n as f64 * self.holdout_fraction).floor() as usize;
        if h >= n {
            0
        } else {
            h
        }
    }
}

impl KeyValue for TrainRecipe {
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "flip_prob" => self.flip_prob = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "holdout_fraction" => self.holdout_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("flip_prob".into(), self.flip_prob.to_string()),
            ("margin".into(), self.margin.to_string()),
            ("strategy".into(), self.strategy.to_string()),
            ("holdout_fraction".into(), self.holdout_fraction.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean hinge over the epoch's steps.
    pub loss: f64,
    pub pairs: usize,
    pub holdout_srcc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean hinge over all training pairs before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_groups: usize,
    pub holdout_groups: usize,
    pub epochs: Vec<EpochRecord>,
}

/// Mean hinge over every pair of every group, without augmentation.
pub fn mean_pair_loss(model: &URanker, groups: &[ImageGroup], margin: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for g in groups {
        let fitted = fitted_batch(model, &g.images)?;
        let scores = forward_images(model, &fitted)?;
        let pairs = sample_pairs(&g.id, g.images.len(), PairStrategy::All, &mut rng)?;
        total += pairwise_hinge(&scores, &pairs, margin)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
    }
    Ok(total / groups.len() as f64)
}

/// Twin-network training: each step scores all images of one group with the
/// shared model and averages the hinge over the sampled pairs. Groups are
/// shuffled every epoch. Updates the model's parameters in place.
pub fn train_uranker(
    model: &URanker,
    groups: &[ImageGroup],
    recipe: &TrainRecipe,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    recipe.validate()?;
    if groups.is_empty() {
        return Err(Error::InvalidInput("no training groups".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.images.len() < 2) {
        return Err(Error::InvalidInput(format!("group {} has fewer than 2 images", g.id)));
    }
    let n_hold = recipe.holdout_len(groups.len());
    let (train, holdout) = groups.split_at(groups.len() - n_hold);
    // Resizing is deterministic, so do it once.
    let fitted: Vec<Vec<ImageTensor>> = train
        .iter()
        .map(|g| fitted_batch(model, &g.images))
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: recipe.lr,
            beta1: recipe.beta1,
            beta2: recipe.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let initial_loss = mean_pair_loss(model, train, recipe.margin)?;
    let mut records = Vec::with_capacity(recipe.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..recipe.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut pairs_seen) = (0.0, 0);
        for &gi in &order {
            let group = &train[gi];
            let images: Vec<ImageTensor> = fitted[gi]
                .iter()
                .map(|img| {
                    if rng.random_bool(recipe.flip_prob) {
                        img.flip_horizontal()
                    } else {
                        img.clone()
                    }
                })
                .collect();
            let pairs = sample_pairs(&group.id, images.len(), recipe.strategy, &mut rng)?;
            let scores = forward_images(model, &images)?;
            let loss = pairwise_hinge(&scores, &pairs, recipe.margin)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            // The hinge's max(0, .) would swallow a NaN score, so check both.
            let finite_scores = scores.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().all(|s| s.is_finite());
            if !value.is_finite() || !finite_scores {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {value} on group {}", group.id),
                });
            }
            opt.backward_step(&loss)?;
            sum += value;
            pairs_seen += pairs.len();
        }
        let holdout_srcc = if holdout.is_empty() {
            None
        } else {
            Some(evaluate_ranker(model, holdout)?.srcc)
        };
        let record = EpochRecord {
            epoch,
            loss: sum / train.len() as f64,
            pairs: pairs_seen,
            holdout_srcc,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} holdout srcc {:?}", record.loss, record.holdout_srcc);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io("<train log>", e))?;
        }
        records.push(record);
    }
    let final_loss = mean_pair_loss(model, train, recipe.margin)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: recipe.epochs,
            detail: format!("final loss {final_loss}"),
        });
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        train_groups: train.len(),
        holdout_groups: holdout.len(),
        epochs: records,
    })
}
