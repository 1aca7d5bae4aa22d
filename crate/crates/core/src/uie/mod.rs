//! Image enhancement: the U-shaped network, its output tails, the losses and
//! the training and evaluation loops.

mod eval;
mod loss;
mod net;
mod synth;
mod tail;
mod train;

pub use eval::{evaluate_uie, PairScore, UieReport};
pub use loss::{content_loss, total_uie_loss, uranker_loss, ContentLoss, LossTerms, UieLossConfig};
pub use net::{Nu2Net, Nu2NetConfig};
pub use synth::{overflow_pairs, stretch_channels};
pub use tail::{normalization_tail, normalize_channel, normalize_image, TailKind, TAIL_DELTA};
pub use train::{mean_mae, train_uie, UieEpochRecord, UieRecipe, UieTrainReport};
