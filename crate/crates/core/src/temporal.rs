//! Rolling-mean smoothing over scored frames and the max-section video score.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MesScore, ProbVector, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedPoint {
    /// Newest frame in the window.
    pub frame_index: u64,
    pub window_fill: u32,
    pub mean_probs: ProbVector,
    pub smoothed_mes: MesScore,
}

/// Sliding window over the most recent scored frames. Discarded frames never
/// enter and never reset it.
#[derive(Debug, Clone)]
pub struct Smoother {
    window: usize,
    recent: VecDeque<ProbVector>,
}

impl Smoother {
    pub fn new(window: u32) -> Self {
        assert!(window >= 1, "window must be >= 1");
        Self {
            window: window as usize,
            recent: VecDeque::with_capacity(window as usize),
        }
    }

    pub fn push_scored(&mut self, probs: ProbVector, frame_index: u64) -> SmoothedPoint {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(probs);
        // Summing the window afresh keeps the mean exact w.r.t. a naive
        // recomputation; W is small.
        let n = self.recent.len() as f64;
        let mut mean = [0.0; NUM_CLASSES];
        for p in &self.recent {
            for (m, v) in mean.iter_mut().zip(p.values()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mean_probs = ProbVector::new(mean).expect("mean of distributions is a distribution");
        SmoothedPoint {
            frame_index,
            window_fill: self.recent.len() as u32,
            smoothed_mes: mean_probs.argmax(),
            mean_probs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub overall_mes: MesScore,
    pub peak_frame_index: u64,
    pub peak_probs: ProbVector,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("no scored frames: video is unscorable")]
    NoScoredFrames,
}

/// Highest smoothed class; the peak is the earliest point attaining it.
pub fn finalize_video_score(points: &[SmoothedPoint]) -> Result<VideoScore, ScoreError> {
    let mut best: Option<&SmoothedPoint> = None;
    for p in points {
        if best.is_none_or(|b| p.smoothed_mes > b.smoothed_mes) {
            best = Some(p);
        }
    }
    let best = best.ok_or(ScoreError::NoScoredFrames)?;
    Ok(VideoScore {
        overall_mes: best.smoothed_mes,
        peak_frame_index: best.frame_index,
        peak_probs: best.mean_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mes(v: u8) -> MesScore {
        MesScore::new(v).unwrap()
    }

    fn hot(c: u8) -> ProbVector {
        ProbVector::one_hot(mes(c))
    }

    fn point(i: u64, m: u8) -> SmoothedPoint {
        SmoothedPoint {
            frame_index: i,
            window_fill: 1,
            mean_probs: hot(m),
            smoothed_mes: mes(m),
        }
    }

    #[test]
    fn constant_window() {
        let mut s = Smoother::new(3);
        let mut last = None;
        for i in 0..3 {
            last = Some(s.push_scored(hot(0), i));
        }
        let p = last.unwrap();
        assert_eq!(p.mean_probs, hot(0));
        assert_eq!((p.smoothed_mes, p.window_fill), (mes(0), 3));
    }

    #[test]
    fn mixed_window_matches_naive_mean() {
        let mut s = Smoother::new(3);
        s.push_scored(hot(0), 0);
        s.push_scored(hot(1), 1);
        let p = s.push_scored(hot(0), 2);
        let want = [2.0 / 3.0, 1.0 / 3.0, 0.0, 0.0];
        for (g, w) in p.mean_probs.values().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert_eq!(p.smoothed_mes, mes(0));
    }

    #[test]
    fn window_one_is_identity() {
        let mut s = Smoother::new(1);
        let probs = [
            ProbVector::new([0.1, 0.2, 0.3, 0.4]).unwrap(),
            ProbVector::new([0.7, 0.1, 0.1, 0.1]).unwrap(),
        ];
        for (i, p) in probs.iter().enumerate() {
            let out = s.push_scored(*p, i as u64);
            assert_eq!(out.mean_probs, *p);
            assert_eq!(out.window_fill, 1);
        }
    }

    #[test]
    fn window_fill_saturates() {
        let mut s = Smoother::new(4);
        let fills: Vec<u32> = (0..7)
            .map(|i| s.push_scored(hot(2), i).window_fill)
            .collect();
        assert_eq!(fills, vec![1, 2, 3, 4, 4, 4, 4]);
    }

    #[test]
    fn video_score_examples() {
        let pts: Vec<_> = [0, 1, 2, 1]
            .iter()
            .enumerate()
            .map(|(i, &m)| point(i as u64, m))
            .collect();
        let v = finalize_video_score(&pts).unwrap();
        assert_eq!((v.overall_mes, v.peak_frame_index), (mes(2), 2));

        let pts: Vec<_> = (0..4).map(|i| point(10 + i, 0)).collect();
        assert_eq!(finalize_video_score(&pts).unwrap().peak_frame_index, 10);

        let pts = [point(0, 1), point(1, 3), point(2, 3)];
        assert_eq!(finalize_video_score(&pts).unwrap().peak_frame_index, 1);

        assert_eq!(finalize_video_score(&[]), Err(ScoreError::NoScoredFrames));
    }

    proptest! {
        #[test]
        fn single_outlier_cannot_flip(w in 3u32..16, a in 0u8..4, b in 0u8..4, pos in 0usize..16) {
            prop_assume!(a != b);
            let pos = pos % w as usize;
            let mut s = Smoother::new(w);
            let mut last = None;
            for i in 0..w as usize {
                let c = if i == pos { b } else { a };
                last = Some(s.push_scored(hot(c), i as u64));
            }
            prop_assert_eq!(last.unwrap().smoothed_mes, mes(a));
        }

        #[test]
        fn overall_bounds_every_point(ms in prop::collection::vec(0u8..4, 1..50)) {
            let pts: Vec<_> = ms.iter().enumerate().map(|(i, &m)| point(i as u64, m)).collect();
            let v = finalize_video_score(&pts).unwrap();
            prop_assert!(pts.iter().all(|p| p.smoothed_mes <= v.overall_mes));
            prop_assert!(pts.iter().any(|p| p.smoothed_mes == v.overall_mes));
        }
    }
}
