//! Rank correlation and fidelity metrics shared by both evaluation harnesses.

pub mod fidelity;
pub mod rank;

pub use fidelity::{mse, psnr, ssim, PSNR_CAP_DB};
pub use rank::{krcc, mean_group_correlation, srcc, CorrelationReport, RankVector};
