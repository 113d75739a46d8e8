use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_predictions, ForwardOptions, Model};

pub const MIN_WARMUP: usize = 10;
pub const MIN_TIMED_IMAGES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub images: usize,
    pub ms_per_image: f64,
    pub fps: f64,
    pub morphology_heads: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyComparison {
    pub full: LatencyStats,
    pub ablated: LatencyStats,
    /// `full.ms_per_image / ablated.ms_per_image`.
    pub overhead_ratio: f64,
}

impl LatencyComparison {
    pub fn new(full: LatencyStats, ablated: LatencyStats) -> Self {
        let overhead_ratio = full.ms_per_image / ablated.ms_per_image;
        Self {
            full,
            ablated,
            overhead_ratio,
        }
    }
}

/// Batch-1 wall-clock latency of forward pass plus final-layer decoding.
///
/// `images` are `[1, H, W, 3]` tensors cycled until `timed` images (at least
/// [`MIN_TIMED_IMAGES`]) have been measured, after `warmup` (at least
/// [`MIN_WARMUP`]) untimed passes.
pub fn measure_latency(
    model: &Model,
    images: &[Tensor],
    warmup: usize,
    timed: usize,
    ablate_morphology: bool,
) -> Result<LatencyStats> {
    if images.is_empty() {
        return Err(Error::Contract("latency measurement needs at least one image".into()));
    }
    let opts = ForwardOptions {
        ablate_morphology,
        denoising: None,
    };
    let run = |x: &Tensor| -> Result<usize> {
        let out = model.forward_with(x, opts)?;
        let host = out.last().to_host()?;
        Ok(decode_predictions(&host[0], model.vocabulary(), 0.5).len())
    };
    let warmup = warmup.max(MIN_WARMUP);
    let timed = timed.max(MIN_TIMED_IMAGES);
    let mut sink = 0usize;
    for i in 0..warmup {
        sink += run(&images[i % images.len()])?;
    }
    let start = Instant::now();
    for i in 0..timed {
        sink += run(&images[i % images.len()])?;
    }
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    let ms = secs * 1000.0 / timed as f64;
    Ok(LatencyStats {
        images: timed,
        ms_per_image: ms,
        fps: 1000.0 / ms,
        morphology_heads: !ablate_morphology,
    })
}
