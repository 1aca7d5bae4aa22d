use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How parallel blocks exchange features across scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionMode {
    /// Learnable amplitude per (target, source) scale pair, initialized at zero.
    Dynamic,
    /// No cross-scale exchange.
    Direct,
    /// Unit-weight exchange with adjacent scales only.
    Neighbour,
    /// Unit-weight exchange with every other scale.
    Dense,
}

impl ConnectionMode {
    pub const ALL: [ConnectionMode; 4] = [
        ConnectionMode::Dynamic,
        ConnectionMode::Direct,
        ConnectionMode::Neighbour,
        ConnectionMode::Dense,
    ];

    /// Source scales that feed `target` out of `n` parallel scales.
    pub fn sources(self, target: usize, n: usize) -> Vec<usize> {
        match self {
            ConnectionMode::Direct => Vec::new(),
            ConnectionMode::Neighbour => (0..n)
                .filter(|&s| s != target && s.abs_diff(target) == 1)
                .collect(),
            ConnectionMode::Dense | ConnectionMode::Dynamic => {
                (0..n).filter(|&s| s != target).collect()
            }
        }
    }
}

impl fmt::Display for ConnectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConnectionMode::Dynamic => "dynamic",
            ConnectionMode::Direct => "direct",
            ConnectionMode::Neighbour => "neighbour",
            ConnectionMode::Dense => "dense",
        };
        f.write_str(s)
    }
}

impl FromStr for ConnectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dynamic" => Ok(ConnectionMode::Dynamic),
            "direct" => Ok(ConnectionMode::Direct),
            "neighbour" | "neighbor" => Ok(ConnectionMode::Neighbour),
            "dense" => Ok(ConnectionMode::Dense),
            other => Err(Error::Config(format!("unknown connection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Softmax over keys along the token axis, then `q (k^T v)`; linear in
    /// the token count.
    Factorized,
    /// Standard softmax self-attention.
    Plain,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Factorized => "factorized",
            AttentionKind::Plain => "plain",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "factorized" => Ok(AttentionKind::Factorized),
            "plain" => Ok(AttentionKind::Plain),
            other => Err(Error::Config(format!("unknown attention kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct URankerConfig {
    /// Channel width of each serial scale, finest first.
    pub widths: Vec<usize>,
    /// Attention heads per serial scale.
    pub heads: Vec<usize>,
    /// Stride of the first patch embedding; later embeddings use stride 2.
    pub patch_size: usize,
    /// Attention layers per serial block.
    pub serial_depth: usize,
    /// Number of coarsest scales handed to the parallel blocks.
    pub parallel_scales: usize,
    pub dcpb_groups: usize,
    pub connection_mode: ConnectionMode,
    pub hist_bins: usize,
    /// When false the histogram token slot carries zeros.
    pub histogram_prior: bool,
    pub attention: AttentionKind,
    /// Convolutional position encoding and relative position term.
    pub positional: bool,
    pub mlp_ratio: usize,
    /// Long-side cap applied when fitting inputs to the stride.
    pub max_side: usize,
}

impl Default for URankerConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 320],
            heads: vec![8, 8, 8, 8],
            patch_size: 4,
            serial_depth: 2,
            parallel_scales: 3,
            dcpb_groups: 2,
            connection_mode: ConnectionMode::Dynamic,
            hist_bins: 64,
            histogram_prior: true,
            attention: AttentionKind::Factorized,
            positional: true,
            mlp_ratio: 4,
            max_side: 512,
        }
    }
}

impl URankerConfig {
    /// Three-scale model small enough to train on a laptop CPU in minutes.
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 24, 32],
            heads: vec![2, 2, 2],
            patch_size: 2,
            serial_depth: 1,
            parallel_scales: 3,
            dcpb_groups: 2,
            connection_mode: ConnectionMode::Dynamic,
            hist_bins: 16,
            histogram_prior: true,
            attention: AttentionKind::Factorized,
            positional: true,
            mlp_ratio: 2,
            max_side: 64,
        }
    }

    /// Two-scale model for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            widths: vec![8, 12],
            heads: vec![2, 2],
            patch_size: 2,
            serial_depth: 1,
            parallel_scales: 2,
            dcpb_groups: 1,
            connection_mode: ConnectionMode::Dynamic,
            hist_bins: 8,
            histogram_prior: true,
            attention: AttentionKind::Factorized,
            positional: true,
            mlp_ratio: 2,
            max_side: 16,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.widths.len()
    }

    /// Stride of serial scale `s` relative to its input.
    pub fn embed_stride(&self, s: usize) -> usize {
        if s == 0 {
            self.patch_size
        } else {
            2
        }
    }

    /// Downsampling factor from the image to the coarsest scale.
    pub fn total_stride(&self) -> usize {
        self.patch_size << (self.num_scales().saturating_sub(1))
    }

    /// Index of the first serial scale that takes part in the parallel blocks.
    pub fn first_parallel_scale(&self) -> usize {
        self.num_scales() - self.parallel_scales
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.heads.len() != n {
            return Err(Error::Config(format!(
                "{} head counts for {n} scales",
                self.heads.len()
            )));
        }
        for (s, (&w, &h)) in self.widths.iter().zip(&self.heads).enumerate() {
            if h == 0 || w == 0 || w % h != 0 {
                return Err(Error::Config(format!(
                    "scale {s}: width {w} not divisible into {h} heads"
                )));
            }
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if self.serial_depth == 0 {
            return Err(Error::Config("serial_depth must be >= 1".into()));
        }
        if self.parallel_scales == 0 || self.parallel_scales > n {
            return Err(Error::Config(format!(
                "parallel_scales must be in 1..={n}, got {}",
                self.parallel_scales
            )));
        }
        if self.hist_bins < 2 {
            return Err(Error::Config("hist_bins must be >= 2".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        if self.max_side < self.total_stride() {
            return Err(Error::Config(format!(
                "max_side {} below total stride {}",
                self.max_side,
                self.total_stride()
            )));
        }
        Ok(())
    }

    /// Flat `key = value` form used by run configuration files.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("widths".into(), join(&self.widths)),
            ("heads".into(), join(&self.heads)),
            ("patch_size".into(), self.patch_size.to_string()),
            ("serial_depth".into(), self.serial_depth.to_string()),
            ("parallel_scales".into(), self.parallel_scales.to_string()),
            ("dcpb_groups".into(), self.dcpb_groups.to_string()),
            ("connection_mode".into(), self.connection_mode.to_string()),
            ("hist_bins".into(), self.hist_bins.to_string()),
            ("histogram_prior".into(), self.histogram_prior.to_string()),
            ("attention".into(), self.attention.to_string()),
            ("positional".into(), self.positional.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("max_side".into(), self.max_side.to_string()),
        ]
    }

    /// Applies one flat key. Returns `Ok(false)` for keys this config does
    /// not own.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::runconfig::{parse_bool, parse_list, parse_num};
        match key {
            "widths" => self.widths = parse_list(key, value)?,
            "heads" => self.heads = parse_list(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "serial_depth" => self.serial_depth = parse_num(key, value)?,
            "parallel_scales" => self.parallel_scales = parse_num(key, value)?,
            "dcpb_groups" => self.dcpb_groups = parse_num(key, value)?,
            "connection_mode" => self.connection_mode = value.parse()?,
            "hist_bins" => self.hist_bins = parse_num(key, value)?,
            "histogram_prior" => self.histogram_prior = parse_bool(key, value)?,
            "attention" => self.attention = value.parse()?,
            "positional" => self.positional = parse_bool(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, value)?,
            "max_side" => self.max_side = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        URankerConfig::default().validate().unwrap();
        URankerConfig::toy().validate().unwrap();
        URankerConfig::tiny().validate().unwrap();
        assert_eq!(URankerConfig::default().total_stride(), 32);
    }

    #[test]
    fn neighbour_sources_are_adjacent() {
        assert_eq!(ConnectionMode::Neighbour.sources(0, 3), vec![1]);
        assert_eq!(ConnectionMode::Neighbour.sources(1, 3), vec![0, 2]);
        assert_eq!(ConnectionMode::Dense.sources(1, 3), vec![0, 2]);
        assert!(ConnectionMode::Direct.sources(1, 3).is_empty());
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = URankerConfig::default();
        for (k, v) in URankerConfig::toy().to_kv() {
            assert!(cfg.apply_kv(&k, &v).unwrap());
        }
        assert_eq!(cfg, URankerConfig::toy());
        assert!(!cfg.apply_kv("epochs", "3").unwrap());
        assert!("sideways".parse::<ConnectionMode>().is_err());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = URankerConfig::toy();
        cfg.hist_bins = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = URankerConfig::toy();
        cfg.heads = vec![3, 2, 2];
        assert!(cfg.validate().is_err());
    }
}
