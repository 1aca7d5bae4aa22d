//! Pairwise margin-ranking training and group-level evaluation.

mod eval;
mod loss;
mod pairs;
mod train;

pub use eval::{evaluate_ranker, predict_group};
pub use loss::{margin_ranking_grad, margin_ranking_loss, pairwise_hinge, PairOrder};
pub use pairs::{sample_pairs, PairStrategy, RankPair};
pub use train::{mean_pair_loss, train_uranker, EpochRecord, TrainRecipe, TrainReport};
