use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InferenceError, LogitProvider, ProviderDescriptor};
use crate::domain::{Frame, LogitVector, NUM_CLASSES};

/// Weights are drawn uniformly from `[-WEIGHT_RANGE, WEIGHT_RANGE)`.
pub const WEIGHT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubModelSpec {
    pub seed: u64,
    /// Frames are box-averaged down to `input_side x input_side` cells.
    pub input_side: u32,
}

impl StubModelSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            input_side: 32,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.input_side as usize * self.input_side as usize * 3
    }

    /// Class-major `4 x feature_len` weight matrix.
    pub fn weights(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..NUM_CLASSES * self.feature_len())
            .map(|_| rng.random_range(-WEIGHT_RANGE..WEIGHT_RANGE))
            .collect()
    }
}

/// Half-open source range covered by output cell `cell` when `len` source
/// pixels are reduced to `cells` cells. Never empty.
pub(crate) fn cell_range(cell: u32, len: u32, cells: u32) -> (u32, u32) {
    let start = (cell as u64 * len as u64 / cells as u64) as u32;
    let end = ((cell as u64 + 1) * len as u64 / cells as u64) as u32;
    (start, end.max(start + 1))
}

/// Deterministic linear classifier over a box-downsampled frame.
#[derive(Debug, Clone)]
pub struct StubModel {
    spec: StubModelSpec,
    weights: Vec<f64>,
    x_ranges: Vec<(u32, u32)>,
    y_ranges: Vec<(u32, u32)>,
    cached_size: (u32, u32),
}

impl StubModel {
    pub fn new(spec: StubModelSpec) -> Self {
        Self {
            weights: spec.weights(),
            spec,
            x_ranges: Vec::new(),
            y_ranges: Vec::new(),
            cached_size: (0, 0),
        }
    }

    pub fn spec(&self) -> StubModelSpec {
        self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn ranges_for(&mut self, width: u32, height: u32) {
        if self.cached_size != (width, height) {
            let side = self.spec.input_side;
            self.x_ranges = (0..side).map(|c| cell_range(c, width, side)).collect();
            self.y_ranges = (0..side).map(|c| cell_range(c, height, side)).collect();
            self.cached_size = (width, height);
        }
    }

    /// Downsampled frame, each channel normalized to [0, 1], flattened as
    /// `(cell_y * side + cell_x) * 3 + channel`.
    pub fn features(&mut self, frame: &Frame) -> Vec<f64> {
        self.ranges_for(frame.width(), frame.height());
        let side = self.spec.input_side as usize;
        let row_stride = frame.width() as usize * 3;
        let px = frame.pixels();
        let mut out = vec![0.0; self.spec.feature_len()];
        for (cy, &(y0, y1)) in self.y_ranges.iter().enumerate() {
            for (cx, &(x0, x1)) in self.x_ranges.iter().enumerate() {
                let mut sums = [0u64; 3];
                for y in y0..y1 {
                    let row = &px[y as usize * row_stride..][x0 as usize * 3..x1 as usize * 3];
                    for p in row.chunks_exact(3) {
                        sums[0] += p[0] as u64;
                        sums[1] += p[1] as u64;
                        sums[2] += p[2] as u64;
                    }
                }
                let count = ((y1 - y0) as u64 * (x1 - x0) as u64 * 255) as f64;
                let o = (cy * side + cx) * 3;
                for ch in 0..3 {
                    out[o + ch] = sums[ch] as f64 / count;
                }
            }
        }
        out
    }

    pub fn logits_from_features(&self, features: &[f64]) -> LogitVector {
        let n = self.spec.feature_len();
        let mut logits = [0.0; NUM_CLASSES];
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &self.weights[c * n..(c + 1) * n];
            *l = row.iter().zip(features).map(|(w, x)| w * x).sum();
        }
        LogitVector::new(logits).expect("finite weights and features give finite logits")
    }

    pub fn infer_frame(&mut self, frame: &Frame) -> LogitVector {
        let features = self.features(frame);
        self.logits_from_features(&features)
    }
}

impl LogitProvider for StubModel {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: format!("stub:{}", self.spec.seed),
            input_size: Some((self.spec.input_side, self.spec.input_side)),
        }
    }

    fn infer(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError> {
        Ok(self.infer_frame(frame))
    }
}
