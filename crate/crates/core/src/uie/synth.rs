//! Pairs whose inputs overflow `[0, 1]`, for comparing output tails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{base_image, ImagePair};
use crate::image::ImageTensor;

/// Stretches each channel to span exactly `[0, 1]`.
pub fn stretch_channels(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for c in 0..3 {
        let ch = out.channel_mut(c);
        let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-6);
        ch.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
    out
}

/// References are stretched base images; each input channel is
/// `gain * gt^gamma + offset` with `gamma` in `[0.6, 1.6)`, `gain` in
/// `[1.2, 2)` and `offset` in `[1 - gain, 0]`. Every input channel leaves
/// `[0, 1]` on at least one side, and the gamma keeps a per-channel
/// stretch from undoing the degradation on its own. Values stay
/// unquantized.
pub fn overflow_pairs(n: usize, size: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gt = stretch_channels(&base_image(size, size, &mut rng));
            let mut input = gt.clone();
            for c in 0..3 {
                let gamma: f32 = rng.random_range(0.6..1.6);
                let gain: f32 = rng.random_range(1.2..2.0);
                let offset: f32 = rng.random_range((1.0 - gain)..=0.0);
                input
                    .channel_mut(c)
                    .iter_mut()
                    .for_each(|v| *v = gain * v.powf(gamma) + offset);
            }
            ImagePair {
                name: format!("overflow{i:03}"),
                input,
                gt,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_input_channel_overflows() {
        for p in overflow_pairs(20, 16, 3) {
            for c in 0..3 {
                let ch = p.input.channel(c);
                let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                assert!(lo < 0.0 || hi > 1.0);
                let g = p.gt.channel(c);
                assert_eq!(g.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
                assert!((g.iter().copied().fold(0.0f32, f32::max) - 1.0).abs() < 1e-6);
            }
        }
    }
}
