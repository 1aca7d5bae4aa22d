use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two positions within a best-first group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankPair {
    pub group_id: String,
    pub better_index: usize,
    pub worse_index: usize,
}

impl RankPair {
    pub fn new(group_id: impl Into<String>, better_index: usize, worse_index: usize) -> Result<Self> {
        if better_index == worse_index {
            return Err(Error::InvalidInput(format!(
                "pair ({better_index}, {worse_index}) compares an image with itself"
            )));
        }
        Ok(Self {
            group_id: group_id.into(),
            better_index,
            worse_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairStrategy {
    /// Every unordered pair.
    All,
    /// `j` distinct pairs drawn uniformly per group and epoch.
    Random(usize),
}

impl fmt::Display for PairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairStrategy::All => f.write_str("all"),
            PairStrategy::Random(j) => write!(f, "random-{j}"),
        }
    }
}

impl FromStr for PairStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(PairStrategy::All);
        }
        s.strip_prefix("random-")
            .and_then(|j| j.parse().ok())
            .filter(|&j| j > 0)
            .map(PairStrategy::Random)
            .ok_or_else(|| Error::Config(format!("unknown pair strategy {s:?}; use all or random-J")))
    }
}

/// Pairs of a group with `k` images listed best first; the lower index is
/// always the better image.
pub fn sample_pairs(group_id: &str, k: usize, strategy: PairStrategy, rng: &mut impl Rng) -> Result<Vec<RankPair>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("group {group_id} has {k} images")));
    }
    let total = k * (k - 1) / 2;
    let all = || {
        (0..k).flat_map(move |i| (i + 1..k).map(move |j| (i, j)))
    };
    let chosen: Vec<(usize, usize)> = match strategy {
        PairStrategy::All => all().collect(),
        PairStrategy::Random(j) => {
            if j > total {
                return Err(Error::Config(format!(
                    "random-{j} exceeds the {total} pairs of a {k}-image group"
                )));
            }
            let every: Vec<(usize, usize)> = all().collect();
            let mut picked = rand::seq::index::sample(rng, total, j).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| every[i]).collect()
        }
    };
    Ok(chosen
        .into_iter()
        .map(|(b, w)| RankPair {
            group_id: group_id.to_string(),
            better_index: b,
            worse_index: w,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_pairs("g", 10, PairStrategy::All, &mut rng).unwrap();
        assert_eq!(p.len(), 45);
        assert!(p.iter().all(|p| p.better_index < p.worse_index));
        let two = sample_pairs("g", 2, PairStrategy::All, &mut rng).unwrap();
        assert_eq!(two, vec![RankPair::new("g", 0, 1).unwrap()]);
    }

    #[test]
    fn random_pairs_are_distinct_and_seeded() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_pairs("g", 4, PairStrategy::Random(3), &mut rng).unwrap()
        };
        let a = draw(5);
        assert_eq!(a.len(), 3);
        let mut uniq = a.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
        assert!(a.iter().all(|p| p.better_index < p.worse_index && p.worse_index < 4));
        assert_eq!(a, draw(5));
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_pairs("g", 4, PairStrategy::Random(7), &mut rng).is_err());
        assert!(sample_pairs("g", 1, PairStrategy::All, &mut rng).is_err());
        assert!(RankPair::new("g", 1, 1).is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("all".parse::<PairStrategy>().unwrap(), PairStrategy::All);
        assert_eq!("random-3".parse::<PairStrategy>().unwrap(), PairStrategy::Random(3));
        assert_eq!(PairStrategy::Random(3).to_string(), "random-3");
        assert!("random-0".parse::<PairStrategy>().is_err());
        assert!("some".parse::<PairStrategy>().is_err());
    }
}
