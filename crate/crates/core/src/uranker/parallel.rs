//! Parallel blocks with cross-scale feature exchange.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Linear};
use crate::params::{Init, ParamStore};

use super::attention::{AttentionLayer, TokenLayout};
use super::config::{ConnectionMode, URankerConfig};
use super::tokens::{spatial_to_tokens, tokens_to_spatial, TokenSequence, SPECIAL_TOKENS};

/// `F_cross = F_own + Σ α_i F_i`, elementwise. Every `F_i` must already be
/// resampled and projected to the shape of `F_own`; each `α_i` is a scalar
/// tensor (any shape with one element).
pub fn dynamic_connect(own: &Tensor, others: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
    let mut out = own.clone();
    for (alpha, feat) in others {
        if feat.dims() != own.dims() {
            return Err(Error::Shape(format!(
                "cross-scale feature {:?} does not match {:?}",
                feat.dims(),
                own.dims()
            )));
        }
        if alpha.elem_count() != 1 {
            return Err(Error::Shape(format!("amplitude must be scalar, got {:?}", alpha.dims())));
        }
        let alpha = alpha.flatten_all()?.reshape(())?;
        out = (out + feat.broadcast_mul(&alpha)?)?;
    }
    Ok(out)
}

/// Per-scale token sequences for the scales handled by the parallel blocks,
/// finest first.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    scales: Vec<TokenSequence>,
}

impl MultiScaleFeatures {
    pub fn new(scales: Vec<TokenSequence>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Shape("no scales".into()));
        }
        for pair in scales.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.height() != 2 * b.height() || a.width() != 2 * b.width() {
                return Err(Error::Shape(format!(
                    "adjacent scales {}x{} and {}x{} are not a 2x step",
                    a.height(),
                    a.width(),
                    b.height(),
                    b.width()
                )));
            }
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[TokenSequence] {
        &self.scales
    }

    pub fn into_scales(self) -> Vec<TokenSequence> {
        self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// `(B, 1, C_s)` class token of every scale.
    pub fn class_tokens(&self) -> Result<Vec<Tensor>> {
        self.scales.iter().map(|s| s.class_token()).collect()
    }
}

/// One group of parallel blocks: per-scale conv-attention, cross-scale mixing
/// of the attention outputs, then per-scale feed-forward.
#[derive(Debug, Clone)]
pub struct DcpbGroup {
    layers: Vec<AttentionLayer>,
    mode: ConnectionMode,
    widths: Vec<usize>,
    /// Keyed by `(target, source)`.
    alphas: BTreeMap<(usize, usize), Tensor>,
    /// Channel projections keyed by `(target, source)`; absent when widths agree.
    projections: BTreeMap<(usize, usize), Linear>,
}

impl DcpbGroup {
    pub fn new(ps: &ParamStore, cfg: &URankerConfig, group: usize) -> Result<Self> {
        let first = cfg.first_parallel_scale();
        let widths: Vec<usize> = cfg.widths[first..].to_vec();
        let heads: Vec<usize> = cfg.heads[first..].to_vec();
        let n = widths.len();
        let name = format!("dcpb{group}");
        let layers = (0..n)
            .map(|p| {
                AttentionLayer::new(
                    ps,
                    &format!("{name}.scale{p}"),
                    widths[p],
                    heads[p],
                    cfg.mlp_ratio,
                    cfg.attention,
                    cfg.positional,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut alphas = BTreeMap::new();
        let mut projections = BTreeMap::new();
        for target in 0..n {
            for source in cfg.connection_mode.sources(target, n) {
                if cfg.connection_mode == ConnectionMode::Dynamic {
                    let alpha = ps.get(&format!("{name}.alpha_{target}_{source}"), 1, Init::Zeros)?;
                    alphas.insert((target, source), alpha);
                }
                if widths[source] != widths[target] {
                    let proj = Linear::new(
                        ps,
                        &format!("{name}.proj_{source}_to_{target}"),
                        widths[source],
                        widths[target],
                        false,
                    )?;
                    projections.insert((target, source), proj);
                }
            }
        }
        Ok(Self {
            layers,
            mode: cfg.connection_mode,
            widths,
            alphas,
            projections,
        })
    }

    pub fn mode(&self) -> ConnectionMode {
        self.mode
    }

    /// Source scale `source`'s image features brought to `target`'s width and grid.
    fn aligned(&self, maps: &[Tensor], target: usize, source: usize) -> Result<Tensor> {
        let src = &maps[source];
        let (_, _, th, tw) = maps[target].dims4()?;
        let projected = match self.projections.get(&(target, source)) {
            Some(proj) => {
                let (_, _, h, w) = src.dims4()?;
                tokens_to_spatial(&proj.forward(&spatial_to_tokens(src)?)?, h, w)?
            }
            None => src.clone(),
        };
        resize_bilinear(&projected, th, tw)
    }

    /// Amplitude `α` for `source -> target` (dynamic mode only).
    pub fn alpha(&self, target: usize, source: usize) -> Option<&Tensor> {
        self.alphas.get(&(target, source))
    }

    /// Per-scale attention, returning the encoded tokens (the residual
    /// stream) and the attention outputs.
    fn attend_all(&self, ms: &MultiScaleFeatures) -> Result<(Vec<Tensor>, Vec<TokenSequence>)> {
        let scales = ms.scales();
        if scales.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} scales given, block built for {}",
                scales.len(),
                self.layers.len()
            )));
        }
        let mut encoded = Vec::with_capacity(scales.len());
        let mut attended = Vec::with_capacity(scales.len());
        for (p, (seq, layer)) in scales.iter().zip(&self.layers).enumerate() {
            if seq.channels()? != self.widths[p] {
                return Err(Error::Shape(format!(
                    "scale {p} has width {}, expected {}",
                    seq.channels()?,
                    self.widths[p]
                )));
            }
            let layout = TokenLayout::new(SPECIAL_TOKENS, seq.height(), seq.width());
            let (x, y) = layer.attend(seq.tokens(), layout)?;
            encoded.push(x);
            attended.push(TokenSequence::new(y, seq.height(), seq.width())?);
        }
        Ok((encoded, attended))
    }

    /// Inputs of the cross-scale sum for every target scale: the target's own
    /// attention map and each source's map aligned to it, `(B, C_t, H_t, W_t)`.
    pub fn mixing_terms(&self, ms: &MultiScaleFeatures) -> Result<Vec<(Tensor, Vec<(usize, Tensor)>)>> {
        let (_, attended) = self.attend_all(ms)?;
        self.terms(&attended)
    }

    fn terms(&self, attended: &[TokenSequence]) -> Result<Vec<(Tensor, Vec<(usize, Tensor)>)>> {
        let maps: Vec<Tensor> = attended.iter().map(|s| s.spatial()).collect::<Result<_>>()?;
        let n = maps.len();
        (0..n)
            .map(|t| {
                let aligned = self
                    .mode
                    .sources(t, n)
                    .into_iter()
                    .map(|s| Ok((s, self.aligned(&maps, t, s)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((maps[t].clone(), aligned))
            })
            .collect()
    }

    /// Cross-scale image maps, one per scale, before the residual and
    /// feed-forward.
    pub fn cross_scale(&self, ms: &MultiScaleFeatures) -> Result<Vec<Tensor>> {
        let (_, attended) = self.attend_all(ms)?;
        self.mix(&attended)
    }

    fn mix(&self, attended: &[TokenSequence]) -> Result<Vec<Tensor>> {
        let terms = self.terms(attended)?;
        terms
            .iter()
            .enumerate()
            .map(|(t, (own, aligned))| {
                if aligned.is_empty() {
                    return Ok(own.clone());
                }
                let unit = Tensor::ones(1, own.dtype(), own.device())?;
                let pairs: Vec<(&Tensor, &Tensor)> = aligned
                    .iter()
                    .map(|(s, f)| match self.mode {
                        ConnectionMode::Dynamic => (&self.alphas[&(t, *s)], f),
                        _ => (&unit, f),
                    })
                    .collect();
                dynamic_connect(own, &pairs)
            })
            .collect()
    }

    pub fn forward(&self, ms: &MultiScaleFeatures) -> Result<MultiScaleFeatures> {
        let (encoded, attended) = self.attend_all(ms)?;
        let mixed = self.mix(&attended)?;
        let mut out = Vec::with_capacity(mixed.len());
        for (t, cross) in mixed.iter().enumerate() {
            let y = Tensor::cat(&[&attended[t].special_tokens()?, &spatial_to_tokens(cross)?], 1)?;
            let x = self.layers[t].feed_forward(&(&encoded[t] + y)?)?;
            out.push(TokenSequence::new(x, attended[t].height(), attended[t].width())?);
        }
        MultiScaleFeatures::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn features(cfg: &URankerConfig, batch: usize, side: usize, seed: u64) -> MultiScaleFeatures {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let first = cfg.first_parallel_scale();
        let scales = cfg.widths[first..]
            .iter()
            .enumerate()
            .map(|(p, &w)| {
                let s = side >> p;
                let n = SPECIAL_TOKENS + s * s;
                let values: Vec<f64> = (0..batch * n * w).map(|_| -> f64 { normal.sample(&mut rng) }).collect();
                let t = Tensor::from_vec(values, (batch, n, w), &Device::Cpu).unwrap();
                TokenSequence::new(t, s, s).unwrap()
            })
            .collect();
        MultiScaleFeatures::new(scales).unwrap()
    }

    fn group(cfg: &URankerConfig, seed: u64) -> (ParamStore, DcpbGroup) {
        let ps = ParamStore::new(seed, DType::F64, Device::Cpu);
        let g = DcpbGroup::new(&ps, cfg, 0).unwrap();
        (ps, g)
    }

    fn with_mode(mode: ConnectionMode) -> URankerConfig {
        URankerConfig {
            connection_mode: mode,
            ..URankerConfig::toy()
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dynamic_connect_checks_shapes() {
        let own = Tensor::zeros((1, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let bad = Tensor::zeros((1, 2, 1, 2), DType::F32, &Device::Cpu).unwrap();
        let a = Tensor::ones(1, DType::F32, &Device::Cpu).unwrap();
        assert!(dynamic_connect(&own, &[(&a, &bad)]).is_err());
        let two = Tensor::ones(2, DType::F32, &Device::Cpu).unwrap();
        assert!(dynamic_connect(&own, &[(&two, &own)]).is_err());
    }

    #[test]
    fn scales_must_halve() {
        let t = |s: usize| {
            TokenSequence::new(
                Tensor::zeros((1, SPECIAL_TOKENS + s * s, 4), DType::F32, &Device::Cpu).unwrap(),
                s,
                s,
            )
            .unwrap()
        };
        assert!(MultiScaleFeatures::new(vec![t(4), t(2)]).is_ok());
        assert!(MultiScaleFeatures::new(vec![t(4), t(3)]).is_err());
    }

    #[test]
    fn zero_alpha_matches_direct_mode() {
        let ms = features(&URankerConfig::toy(), 2, 8, 0);
        let (_, dynamic) = group(&with_mode(ConnectionMode::Dynamic), 3);
        let (_, direct) = group(&with_mode(ConnectionMode::Direct), 3);
        let a = dynamic.forward(&ms).unwrap();
        let b = direct.forward(&ms).unwrap();
        for (x, y) in a.scales().iter().zip(b.scales()) {
            let x: Vec<u64> = x.tokens().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = y.tokens().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn random_alpha_mixing_matches_scalar_sum() {
        let cfg = with_mode(ConnectionMode::Dynamic);
        let (ps, g) = group(&cfg, 5);
        let n = cfg.parallel_scales;
        let mut k = 0.0;
        for t in 0..n {
            for s in cfg.connection_mode.sources(t, n) {
                k += 1.0;
                let v = Tensor::new(&[0.3 * k - 0.8], &Device::Cpu).unwrap();
                ps.set(&format!("dcpb0.alpha_{t}_{s}"), &v).unwrap();
            }
        }
        let ms = features(&cfg, 1, 8, 1);
        let terms = g.mixing_terms(&ms).unwrap();
        let mixed = g.cross_scale(&ms).unwrap();
        for (t, ((own, aligned), got)) in terms.iter().zip(&mixed).enumerate() {
            let mut expect = own.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (s, f) in aligned {
                let alpha = g.alpha(t, *s).unwrap().to_vec1::<f64>().unwrap()[0];
                for (e, v) in expect.iter_mut().zip(f.flatten_all().unwrap().to_vec1::<f64>().unwrap()) {
                    *e += alpha * v;
                }
            }
            let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let diff = expect.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "scale {t}: {diff}");
        }
    }

    fn perturb_scale(ms: &MultiScaleFeatures, p: usize) -> MultiScaleFeatures {
        let mut scales = ms.scales().to_vec();
        let seq = &scales[p];
        let bumped = (seq.tokens() + 0.5).unwrap();
        scales[p] = seq.with_tokens(bumped).unwrap();
        MultiScaleFeatures::new(scales).unwrap()
    }

    #[test]
    fn direct_mode_keeps_scales_independent() {
        let (_, g) = group(&with_mode(ConnectionMode::Direct), 2);
        let ms = features(&URankerConfig::toy(), 1, 8, 0);
        let base = g.forward(&ms).unwrap();
        let moved = g.forward(&perturb_scale(&ms, 1)).unwrap();
        assert_eq!(max_abs_diff(base.scales()[0].tokens(), moved.scales()[0].tokens()), 0.0);
        assert_eq!(max_abs_diff(base.scales()[2].tokens(), moved.scales()[2].tokens()), 0.0);
        assert!(max_abs_diff(base.scales()[1].tokens(), moved.scales()[1].tokens()) > 0.0);
    }

    #[test]
    fn dense_and_neighbour_modes_connect_scales() {
        let ms = features(&URankerConfig::toy(), 1, 8, 0);
        let (_, dense) = group(&with_mode(ConnectionMode::Dense), 2);
        let base = dense.forward(&ms).unwrap();
        let moved = dense.forward(&perturb_scale(&ms, 2)).unwrap();
        assert!(max_abs_diff(base.scales()[0].tokens(), moved.scales()[0].tokens()) > 1e-6);

        let (_, neighbour) = group(&with_mode(ConnectionMode::Neighbour), 2);
        let base = neighbour.forward(&ms).unwrap();
        let moved = neighbour.forward(&perturb_scale(&ms, 2)).unwrap();
        assert_eq!(max_abs_diff(base.scales()[0].tokens(), moved.scales()[0].tokens()), 0.0);
        assert!(max_abs_diff(base.scales()[1].tokens(), moved.scales()[1].tokens()) > 1e-6);
    }

    #[test]
    fn dense_cross_gradient_matches_finite_differences() {
        use candle_core::Var;
        let (_, g) = group(&with_mode(ConnectionMode::Dense), 4);
        let ms = features(&URankerConfig::toy(), 1, 4, 0);
        let src = Var::from_tensor(ms.scales()[2].tokens()).unwrap();
        let build = |t: &Tensor| {
            let mut scales = ms.scales().to_vec();
            scales[2] = scales[2].with_tokens(t.clone()).unwrap();
            MultiScaleFeatures::new(scales).unwrap()
        };
        // Objective on the finest scale only, so the gradient exists solely through mixing.
        let objective = |t: &Tensor| -> Tensor {
            let out = g.forward(&build(t)).unwrap();
            out.scales()[0].tokens().sqr().unwrap().sum_all().unwrap()
        };
        let grads = objective(src.as_tensor()).backward().unwrap();
        let analytic = grads.get(src.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = src.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = src.as_tensor().dims().to_vec();
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..base.len()).step_by(7) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap();
                objective(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den += fd.powi(2).max(analytic[i].powi(2));
        }
        assert!(den > 0.0);
        assert!((num / den).sqrt() < 1e-4, "rel err {}", (num / den).sqrt());
    }
}
