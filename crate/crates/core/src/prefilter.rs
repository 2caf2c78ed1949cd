//! Cheap per-frame quality checks run before inference.
//!
//! Two metrics are computed for every frame: the variance of the 4-neighbour
//! Laplacian over the luma image (low variance means little high-frequency
//! content, i.e. blur) and the red share of the mean colour (in-body mucosa is
//! red-dominated, out-of-body and occluded views are not).

use serde::{Deserialize, Serialize};

use crate::domain::{DiscardReason, Frame, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefilterFailure {
    Blur,
    ColourRatio,
}

impl From<PrefilterFailure> for DiscardReason {
    fn from(f: PrefilterFailure) -> Self {
        match f {
            PrefilterFailure::Blur => DiscardReason::Blur,
            PrefilterFailure::ColourRatio => DiscardReason::ColourRatio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefilterVerdict {
    pub blur_variance: f64,
    pub red_ratio: f64,
    pub fail_reason: Option<PrefilterFailure>,
}

impl PrefilterVerdict {
    pub fn passed(&self) -> bool {
        self.fail_reason.is_none()
    }
}

fn luma_image(frame: &Frame) -> Vec<f64> {
    frame
        .pixels()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Population variance of the 3x3 Laplacian response over interior pixels.
///
/// Frames narrower or shorter than 3 pixels have no interior and score 0.
pub fn laplacian_variance(frame: &Frame) -> f64 {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let luma = luma_image(frame);
    let n = ((w - 2) * (h - 2)) as f64;

    // Two passes: mean first, then squared deviations, for accuracy on large
    // frames with large responses.
    let response = |x: usize, y: usize| {
        let c = y * w + x;
        luma[c - w] + luma[c + w] + luma[c - 1] + luma[c + 1] - 4.0 * luma[c]
    };
    let mut sum = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            sum += response(x, y);
        }
    }
    let mean = sum / n;
    let mut sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let d = response(x, y) - mean;
            sq += d * d;
        }
    }
    sq / n
}

/// mean(R) / (mean(R) + mean(G) + mean(B)); 1/3 for an all-black frame.
pub fn red_ratio(frame: &Frame) -> f64 {
    let mut sums = [0u64; 3];
    for p in frame.pixels().chunks_exact(3) {
        sums[0] += p[0] as u64;
        sums[1] += p[1] as u64;
        sums[2] += p[2] as u64;
    }
    let total = sums[0] + sums[1] + sums[2];
    if total == 0 {
        return 1.0 / 3.0;
    }
    // Channel means share the pixel count, so the ratio of sums is exact.
    sums[0] as f64 / total as f64
}

/// Blur check first, then colour ratio. Both metrics are always reported.
pub fn prefilter(frame: &Frame, config: &PipelineConfig) -> PrefilterVerdict {
    let blur_variance = laplacian_variance(frame);
    let red_ratio = red_ratio(frame);
    let fail_reason = if blur_variance < config.blur_var_min {
        Some(PrefilterFailure::Blur)
    } else if red_ratio < config.red_ratio_min || red_ratio > config.red_ratio_max {
        Some(PrefilterFailure::ColourRatio)
    } else {
        None
    };
    PrefilterVerdict {
        blur_variance,
        red_ratio,
        fail_reason,
    }
}
