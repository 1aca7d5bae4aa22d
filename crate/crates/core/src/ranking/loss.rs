use candle_core::{Tensor, D};

use crate::error::{Error, Result};

use super::pairs::RankPair;

/// Which image of the pair `(n, m)` has the higher ground-truth quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOrder {
    NBetter,
    MBetter,
}

impl PairOrder {
    pub fn flipped(self) -> Self {
        match self {
            PairOrder::NBetter => PairOrder::MBetter,
            PairOrder::MBetter => PairOrder::NBetter,
        }
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("margin must be positive, got {margin}")))
    }
}

/// Hinge on the score gap: `max(0, s_worse - s_better + margin)`.
pub fn margin_ranking_loss(s_n: f64, s_m: f64, order: PairOrder, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    let gap = match order {
        PairOrder::NBetter => s_m - s_n,
        PairOrder::MBetter => s_n - s_m,
    };
    Ok((gap + margin).max(0.0))
}

/// `(d/ds_n, d/ds_m)`; zero on the flat branch and at the hinge point.
pub fn margin_ranking_grad(s_n: f64, s_m: f64, order: PairOrder, margin: f64) -> Result<(f64, f64)> {
    if margin_ranking_loss(s_n, s_m, order, margin)? == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok(match order {
        PairOrder::NBetter => (-1.0, 1.0),
        PairOrder::MBetter => (1.0, -1.0),
    })
}

/// Mean hinge over `pairs`, with `scores` a `(K,)` tensor indexed by the
/// pairs' image positions.
pub fn pairwise_hinge(scores: &Tensor, pairs: &[RankPair], margin: f64) -> Result<Tensor> {
    check_margin(margin)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs".into()));
    }
    let k = scores.dim(D::Minus1)?;
    if let Some(p) = pairs.iter().find(|p| p.better_index.max(p.worse_index) >= k) {
        return Err(Error::Shape(format!("pair {p:?} out of range for {k} scores")));
    }
    let dev = scores.device();
    let better: Vec<u32> = pairs.iter().map(|p| p.better_index as u32).collect();
    let worse: Vec<u32> = pairs.iter().map(|p| p.worse_index as u32).collect();
    let sb = scores.index_select(&Tensor::new(better, dev)?, 0)?;
    let sw = scores.index_select(&Tensor::new(worse, dev)?, 0)?;
    Ok(((sw - sb)? + margin)?.relu()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        assert_eq!(margin_ranking_loss(1.0, 0.0, PairOrder::NBetter, 0.5).unwrap(), 0.0);
        assert_eq!(margin_ranking_loss(0.3, 0.3, PairOrder::NBetter, 0.5).unwrap(), 0.5);
        assert!((margin_ranking_loss(0.2, 0.4, PairOrder::NBetter, 0.5).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn margin_must_be_positive() {
        assert!(margin_ranking_loss(0.0, 0.0, PairOrder::NBetter, 0.0).is_err());
        assert!(margin_ranking_loss(0.0, 0.0, PairOrder::NBetter, -1.0).is_err());
    }

    #[test]
    fn tensor_loss_matches_scalar_and_gradient() {
        let scores = Var::new(&[1.2f64, 0.4, 0.1], &Device::Cpu).unwrap();
        let pairs = vec![RankPair::new("g", 0, 1).unwrap(), RankPair::new("g", 0, 2).unwrap(), RankPair::new("g", 1, 2).unwrap()];
        let loss = pairwise_hinge(scores.as_tensor(), &pairs, 0.5).unwrap();
        let s = [1.2, 0.4, 0.1];
        let mut expect = 0.0;
        let mut grad = [0.0; 3];
        for p in &pairs {
            let (b, w) = (p.better_index, p.worse_index);
            expect += margin_ranking_loss(s[b], s[w], PairOrder::NBetter, 0.5).unwrap() / 3.0;
            let (gb, gw) = margin_ranking_grad(s[b], s[w], PairOrder::NBetter, 0.5).unwrap();
            grad[b] += gb / 3.0;
            grad[w] += gw / 3.0;
        }
        assert!((loss.to_scalar::<f64>().unwrap() - expect).abs() < 1e-15);
        let g = loss.backward().unwrap();
        let g = g.get(scores.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..3 {
            assert!((g[i] - grad[i]).abs() < 1e-12, "{g:?} vs {grad:?}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_under_relabelling(sn in -5.0f64..5.0, sm in -5.0f64..5.0, eps in 0.01f64..2.0) {
            let a = margin_ranking_loss(sn, sm, PairOrder::NBetter, eps).unwrap();
            let b = margin_ranking_loss(sm, sn, PairOrder::MBetter, eps).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn non_increasing_in_gap(sn in -5.0f64..5.0, sm in -5.0f64..5.0, d in 0.0f64..3.0) {
            let a = margin_ranking_loss(sn, sm, PairOrder::NBetter, 0.5).unwrap();
            let b = margin_ranking_loss(sn + d, sm, PairOrder::NBetter, 0.5).unwrap();
            prop_assert!(b <= a);
        }

        #[test]
        fn gradient_matches_finite_differences(sn in -3.0f64..3.0, sm in -3.0f64..3.0, better_n in any::<bool>()) {
            let order = if better_n { PairOrder::NBetter } else { PairOrder::MBetter };
            let eps = 0.5;
            let h = 1e-6;
            let gap = (sn - sm).abs();
            prop_assume!((gap - eps).abs() > 1e-3 && (sn - sm + eps).abs() > 1e-3 && (sm - sn + eps).abs() > 1e-3);
            let (gn, gm) = margin_ranking_grad(sn, sm, order, eps).unwrap();
            let f = |a: f64, b: f64| margin_ranking_loss(a, b, order, eps).unwrap();
            let fdn = (f(sn + h, sm) - f(sn - h, sm)) / (2.0 * h);
            let fdm = (f(sn, sm + h) - f(sn, sm - h)) / (2.0 * h);
            let num = ((fdn - gn).powi(2) + (fdm - gm).powi(2)).sqrt();
            let den = (gn * gn + gm * gm).sqrt().max((fdn * fdn + fdm * fdm).sqrt());
            if den > 0.0 {
                prop_assert!(num / den < 1e-4);
            } else {
                prop_assert!(num < 1e-12);
            }
        }
    }
}
