//! Synthetic ranked groups: a clean base image plus copies degraded at
//! increasing severity, ranked clean first.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, RankedGroup, MANIFEST_SCHEMA};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Underwater-style degradation at one severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Per-channel optical depth; the channel is multiplied by `exp(-a)`.
    pub attenuation: [f32; 3],
    /// Contrast scale toward the image mean, 1 keeps contrast.
    pub contrast: f32,
    /// Blend weight of the veiling light.
    pub haze: f32,
    pub veil: [f32; 3],
    pub severity: f32,
}

impl DegradationSpec {
    const ATTENUATION: [f32; 3] = [1.2, 0.35, 0.15];
    const CONTRAST_LOSS: f32 = 0.7;
    const HAZE: f32 = 0.45;
    const VEIL: [f32; 3] = [0.38, 0.46, 0.5];

    /// The default family: every parameter grows with `severity` in `[0, 1]`.
    pub fn for_severity(severity: f32) -> Self {
        let s = severity.clamp(0.0, 1.0);
        Self {
            attenuation: Self::ATTENUATION.map(|a| a * s),
            contrast: 1.0 - Self::CONTRAST_LOSS * s,
            haze: Self::HAZE * s,
            veil: Self::VEIL,
            severity: s,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.attenuation.iter().all(|&a| a == 0.0) && self.contrast == 1.0 && self.haze == 0.0
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        if self.is_identity() {
            return img.clone();
        }
        let mut out = img.clone();
        for c in 0..3 {
            let t = (-self.attenuation[c]).exp();
            out.channel_mut(c).iter_mut().for_each(|v| *v *= t);
        }
        let mean = out.mean();
        let (k, h) = (self.contrast, self.haze);
        for c in 0..3 {
            let veil = self.veil[c];
            out.channel_mut(c).iter_mut().for_each(|v| {
                let contrasted = mean + k * (*v - mean);
                *v = ((1.0 - h) * contrasted + h * veil).clamp(0.0, 1.0);
            });
        }
        out
    }
}

/// Smooth random colour fields plus fine texture, values in `[0.05, 0.95]`.
pub fn base_image(height: usize, width: usize, rng: &mut impl Rng) -> ImageTensor {
    let mut waves = Vec::new();
    for _ in 0..3 {
        let comps: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.08..0.25),
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-2.5..2.5),
                    rng.random_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        waves.push((rng.random_range(0.3..0.7), comps));
    }
    let tex_f = rng.random_range(0.6..1.4);
    let tau = std::f32::consts::TAU;
    ImageTensor::from_fn(height, width, |c, y, x| {
        let (u, v) = (x as f32 / width as f32, y as f32 / height as f32);
        let (offset, comps) = &waves[c];
        let smooth: f32 = comps
            .iter()
            .map(|(a, fx, fy, p)| a * (tau * (fx * u + fy * v) + p).sin())
            .sum();
        let texture = 0.04 * ((x as f32 * tex_f).sin() * (y as f32 * tex_f * 1.3).cos());
        (offset + smooth + texture).clamp(0.05, 0.95)
    })
}

/// Mean HSV saturation.
pub fn hsv_saturation(img: &ImageTensor) -> f64 {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let n = img.num_pixels();
    let mut sum = 0.0;
    for i in 0..n {
        let max = r[i].max(g[i]).max(b[i]) as f64;
        let min = r[i].min(g[i]).min(b[i]) as f64;
        if max > 0.0 {
            sum += (max - min) / max;
        }
    }
    sum / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub size: usize,
    /// Also write one enhancement pair per group (worst variant, clean base).
    pub pairs: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            size: 256,
            pairs: true,
        }
    }
}

/// Per-group images best first: variant `i` has severity `i / k`.
fn group_images(k: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = base_image(size, size, &mut rng);
    (0..k)
        .map(|i| DegradationSpec::for_severity(i as f32 / k as f32).apply(&base))
        .collect()
}

fn group_seed(seed: u64, g: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(g as u64 + 1)
}

/// Writes `n_groups` groups of `k` images and returns the manifest.
/// Filenames are shuffled so they carry no ranking information.
pub fn synth_generate(
    n_groups: usize,
    k: usize,
    seed: u64,
    out_root: &Path,
    options: &SynthOptions,
) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k must be at least 2, got {k}")));
    }
    if options.size == 0 {
        return Err(Error::InvalidInput("size must be positive".into()));
    }
    let groups: Vec<(RankedGroup, Option<String>)> = (0..n_groups)
        .into_par_iter()
        .map(|g| {
            let gseed = group_seed(seed, g);
            let images = group_images(k, options.size, gseed);
            let mut names: Vec<String> = (0..k).map(|i| format!("img{i:02}.png")).collect();
            names.shuffle(&mut ChaCha8Rng::seed_from_u64(gseed ^ 0x5151));
            let group = RankedGroup {
                id: format!("g{g:04}"),
                images: names,
            };
            let dir = group.dir(out_root).join("images");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, img) in images.iter().enumerate() {
                img.save_png(&group.image_path(out_root, i))?;
            }
            let ranking = group.dir(out_root).join("ranking.json");
            std::fs::write(&ranking, serde_json::to_string_pretty(&group.images)?)
                .map_err(|e| Error::io(&ranking, e))?;
            let pair = if options.pairs {
                let name = group.id.clone();
                for (sub, img) in [("input", &images[k - 1]), ("gt", &images[0])] {
                    let d = out_root.join("pairs").join(sub);
                    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    img.save_png(&d.join(format!("{name}.png")))?;
                }
                Some(name)
            } else {
                None
            };
            Ok((group, pair))
        })
        .collect::<Result<Vec<_>>>()?;
    let (groups, pairs): (Vec<_>, Vec<_>) = groups.into_iter().unzip();
    let manifest = DatasetManifest {
        root: out_root.to_path_buf(),
        schema_version: MANIFEST_SCHEMA.into(),
        groups,
        pairs: pairs.into_iter().flatten().collect(),
    };
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    manifest.write()?;
    Ok(manifest)
}

/// In-memory variant of [`synth_generate`], images quantized as if they had
/// been written to PNG.
pub fn synth_groups(n_groups: usize, k: usize, seed: u64, size: usize) -> Result<Vec<super::ImageGroup>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k must be at least 2, got {k}")));
    }
    Ok((0..n_groups)
        .into_par_iter()
        .map(|g| super::ImageGroup {
            id: format!("g{g:04}"),
            images: group_images(k, size, group_seed(seed, g))
                .iter()
                .map(ImageTensor::quantized)
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, load_images};

    #[test]
    fn severity_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = base_image(16, 16, &mut rng);
        assert_eq!(DegradationSpec::for_severity(0.0).apply(&base), base);
    }

    #[test]
    fn parameters_are_monotone_in_severity() {
        let specs: Vec<DegradationSpec> = (0..=10).map(|i| DegradationSpec::for_severity(i as f32 / 10.0)).collect();
        for w in specs.windows(2) {
            assert!(w[1].contrast < w[0].contrast);
            assert!(w[1].haze > w[0].haze);
            for c in 0..3 {
                assert!(w[1].attenuation[c] > w[0].attenuation[c]);
            }
            assert!(w[1].attenuation[0] > w[1].attenuation[1] && w[1].attenuation[1] > w[1].attenuation[2]);
        }
    }

    #[test]
    fn saturation_decreases_with_severity() {
        for seed in 0..50 {
            let imgs = group_images(10, 32, seed);
            let sat: Vec<f64> = imgs.iter().map(hsv_saturation).collect();
            for w in sat.windows(2) {
                assert!(w[1] < w[0], "seed {seed}: {sat:?}");
            }
        }
    }

    #[test]
    fn k_must_be_at_least_two() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(1, 1, 0, dir.path(), &SynthOptions::default()).is_err());
    }

    #[test]
    fn generate_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions { size: 16, pairs: true };
        let made = synth_generate(3, 4, 7, dir.path(), &opts).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(made.groups, loaded.groups);
        assert_eq!(loaded.pairs.len(), 3);
        // Ranking order follows severity: the first listed image is the clean base.
        let on_disk = load_images(dir.path(), &loaded.groups).unwrap();
        let mem = synth_groups(3, 4, 7, 16).unwrap();
        for (a, b) in on_disk.iter().zip(&mem) {
            assert_eq!(a.images, b.images);
        }
        let again = tempfile::tempdir().unwrap();
        let made2 = synth_generate(3, 4, 7, again.path(), &opts).unwrap();
        assert_eq!(made.groups, made2.groups);
    }
}
