//! Rank-correlation between predicted quality scores and ground-truth ranks.
//!
//! Scores follow "higher is better"; ranks follow "1 is best". A perfect
//! predictor therefore has correlation `+1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth ranks, a permutation of `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let k = ranks.len();
        let mut seen = vec![false; k];
        for &r in &ranks {
            if r == 0 || r > k || seen[r - 1] {
                return Err(Error::InvalidInput(format!(
                    "ranks {ranks:?} are not a permutation of 1..={k}"
                )));
            }
            seen[r - 1] = true;
        }
        Ok(Self(ranks))
    }

    /// Ranks `1..=k` in order, i.e. items already listed best first.
    pub fn identity(k: usize) -> Self {
        Self((1..=k).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for RankVector {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        RankVector::new(v)
    }
}

impl From<RankVector> for Vec<usize> {
    fn from(r: RankVector) -> Self {
        r.0
    }
}

fn check(pred: &[f64], gt: &RankVector) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} ranks",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "rank correlation needs at least 2 items, got {}",
            pred.len()
        )));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(())
}

/// Rank 1 for the highest score; tied scores share their average rank.
pub fn descending_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank-order correlation.
pub fn srcc(pred: &[f64], gt: &RankVector) -> Result<f64> {
    check(pred, gt)?;
    let pred_ranks = descending_ranks(pred);
    let gt_ranks: Vec<f64> = gt.as_slice().iter().map(|&r| r as f64).collect();
    Ok(pearson(&pred_ranks, &gt_ranks))
}

/// Kendall rank-order correlation, tau-b (ties in the prediction shrink the
/// denominator; all-equal predictions give 0).
pub fn krcc(pred: &[f64], gt: &RankVector) -> Result<f64> {
    check(pred, gt)?;
    let g = gt.as_slice();
    let k = pred.len();
    let (mut concordant, mut discordant, mut pred_ties) = (0i64, 0i64, 0i64);
    for i in 0..k {
        for j in i + 1..k {
            // Better ground truth has the smaller rank, better prediction the larger score.
            let truth = (g[j] as i64 - g[i] as i64).signum();
            let guess = if pred[i] > pred[j] {
                1
            } else if pred[i] < pred[j] {
                -1
            } else {
                0
            };
            match guess * truth {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => pred_ties += 1,
            }
        }
    }
    let total = (k * (k - 1) / 2) as f64;
    let denom = ((total - pred_ties as f64) * total).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / denom)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub srcc: f64,
    pub krcc: f64,
    pub groups: usize,
    pub per_group: Vec<GroupCorrelation>,
    /// Groups skipped because they had fewer than two items.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCorrelation {
    pub group: String,
    pub srcc: f64,
    pub krcc: f64,
}

/// Per-group coefficients averaged over groups. Groups with fewer than two
/// items are skipped with a warning.
pub fn mean_group_correlation<'a, I>(groups: I) -> Result<CorrelationReport>
where
    I: IntoIterator<Item = (&'a str, &'a [f64], &'a RankVector)>,
{
    let mut report = CorrelationReport::default();
    for (id, pred, gt) in groups {
        if gt.len() < 2 {
            log::warn!("skipping group {id}: fewer than two items");
            report.skipped.push(id.to_string());
            continue;
        }
        let s = srcc(pred, gt)?;
        let k = krcc(pred, gt)?;
        report.per_group.push(GroupCorrelation {
            group: id.to_string(),
            srcc: s,
            krcc: k,
        });
    }
    report.groups = report.per_group.len();
    if report.groups == 0 {
        return Err(Error::InvalidInput("no group with at least two items".into()));
    }
    let n = report.groups as f64;
    report.srcc = report.per_group.iter().map(|g| g.srcc).sum::<f64>() / n;
    report.krcc = report.per_group.iter().map(|g| g.krcc).sum::<f64>() / n;
    Ok(report)
}
