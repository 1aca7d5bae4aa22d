//! The ranking network.

pub mod attention;
pub mod config;
pub mod histogram;
mod model;
pub mod parallel;
pub mod serial;
pub mod tokens;

pub use attention::{AttentionLayer, ConvAttention, ConvPosEnc, TokenLayout};
pub use config::{AttentionKind, ConnectionMode, URankerConfig};
pub use histogram::{compute_channel_histogram, HistogramEmbedding, HistogramVector};
pub use model::URanker;
pub use parallel::{dynamic_connect, DcpbGroup, MultiScaleFeatures};
pub use serial::SerialBlock;
pub use tokens::{TokenSequence, SPECIAL_TOKENS};
