use candle_core::{DType, Tensor};

use crate::dataset::ImageGroup;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{mean_group_correlation, CorrelationReport, RankVector};
use crate::uranker::URanker;

/// Each image resized to the model stride.
pub(crate) fn fitted_batch(model: &URanker, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    let cfg = model.config();
    images
        .iter()
        .map(|img| img.fit_to_stride(cfg.total_stride(), cfg.max_side))
        .collect()
}

/// Scores a list of already fitted images, batching same-sized runs.
pub(crate) fn forward_images(model: &URanker, images: &[ImageTensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images".into()));
    }
    let same = images
        .iter()
        .all(|i| i.height() == images[0].height() && i.width() == images[0].width());
    if same {
        let refs: Vec<&ImageTensor> = images.iter().collect();
        let batch = ImageTensor::stack(&refs, model.device(), model.dtype())?;
        return model.forward(&batch);
    }
    let parts = images
        .iter()
        .map(|i| model.forward(&i.to_tensor(model.device(), model.dtype())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Predicted scores for each image of a group, in group order.
pub fn predict_group(model: &URanker, images: &[ImageTensor]) -> Result<Vec<f64>> {
    let fitted = fitted_batch(model, images)?;
    let scores = forward_images(model, &fitted)?;
    Ok(scores.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Mean per-group SRCC and KRCC; ground truth is each group's listed order.
pub fn evaluate_ranker(model: &URanker, groups: &[ImageGroup]) -> Result<CorrelationReport> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("no test groups".into()));
    }
    let preds = groups
        .iter()
        .map(|g| {
            if g.images.len() < 2 {
                Ok(vec![0.0; g.images.len()])
            } else {
                predict_group(model, &g.images)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<RankVector> = groups.iter().map(|g| RankVector::identity(g.images.len())).collect();
    mean_group_correlation(
        groups
            .iter()
            .zip(&preds)
            .zip(&truths)
            .map(|((g, p), t)| (g.id.as_str(), p.as_slice(), t)),
    )
}
