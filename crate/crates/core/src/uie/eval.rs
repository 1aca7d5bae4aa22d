use serde::{Deserialize, Serialize};

use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};

use super::net::Nu2Net;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UieReport {
    /// Mean PSNR in dB at peak 1.0; identical images count as the cap.
    pub psnr: f64,
    pub ssim: f64,
    pub per_pair: Vec<PairScore>,
}

/// Enhances every input and scores it against its reference. Outputs are
/// clamped to `[0, 1]` first, as they would be when written to disk.
pub fn evaluate_uie(net: &Nu2Net, pairs: &[ImagePair]) -> Result<UieReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no test pairs".into()));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut out = net.enhance(&p.input)?;
        if (out.height(), out.width()) != (p.gt.height(), p.gt.width()) {
            return Err(Error::Shape(format!("pair {}: output and reference sizes differ", p.name)));
        }
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        per_pair.push(PairScore {
            name: p.name.clone(),
            psnr: psnr(&out, &p.gt, 1.0)?,
            ssim: ssim(&out, &p.gt)?,
        });
    }
    let n = per_pair.len() as f64;
    Ok(UieReport {
        psnr: per_pair.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: per_pair.iter().map(|s| s.ssim).sum::<f64>() / n,
        per_pair,
    })
}
