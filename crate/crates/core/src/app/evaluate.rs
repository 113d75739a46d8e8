use candle_core::Tensor;

use super::config::EvalConfig;
use super::data::{batch_tensor, Dataset, ImageData};
use crate::error::Result;
use crate::metrics::{evaluate, measure_latency, EvaluationSummary, LatencyComparison};
use crate::model::{decode_predictions, Detection, Model};

/// Final-layer detections for each image, `batch_size` images per forward.
pub fn predict(
    model: &Model,
    images: &[ImageData],
    batch_size: usize,
    score_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk, model.device())?;
        let host = model.forward(&x)?.last().to_host()?;
        out.extend(
            host.iter()
                .map(|q| decode_predictions(q, model.vocabulary(), score_threshold)),
        );
    }
    Ok(out)
}

/// Full-vs-ablated batch-1 latency over the dataset's images.
pub fn latency_comparison(model: &Model, set: &Dataset) -> Result<LatencyComparison> {
    let images: Vec<Tensor> = set
        .images
        .iter()
        .map(|i| batch_tensor(std::iter::once(i), model.device()))
        .collect::<Result<_>>()?;
    let ablated = measure_latency(model, &images, 10, 100, true)?;
    let full = measure_latency(model, &images, 10, 100, false)?;
    Ok(LatencyComparison::new(full, ablated))
}

pub fn evaluate_model(model: &Model, set: &Dataset, cfg: &EvalConfig) -> Result<EvaluationSummary> {
    let dets = predict(model, &set.images, cfg.batch_size, cfg.score_threshold)?;
    let mut summary = evaluate(&dets, &set.targets, model.vocabulary(), cfg.score_threshold)?;
    if cfg.latency && !set.is_empty() {
        summary.latency = Some(latency_comparison(model, set)?);
    }
    Ok(summary)
}
