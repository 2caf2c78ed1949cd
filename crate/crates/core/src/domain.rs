//! Shared vocabulary types passed between pipeline stages.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of MES classes (0 = remission .. 3 = severe).
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("frame must be at least 1x1, got {width}x{height}")]
    EmptyFrame { width: u32, height: u32 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    PixelLength { expected: usize, actual: usize },
    #[error("MES score {0} out of range 0..=3")]
    InvalidMes(u8),
    #[error("logit {index} is not finite ({value})")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),
    #[error("certainty {certainty} does not equal max probability {max}")]
    CertaintyMismatch { certainty: f64, max: f64 },
}

/// One decoded RGB8 frame, row-major, 3 bytes per pixel.
///
/// The pixel buffer is reference counted so that retaining a frame for review
/// does not copy the image on the hot path.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    index: u64,
    timestamp_ms: u64,
    width: u32,
    height: u32,
    pixels: Arc<[u8]>,
}

impl Frame {
    pub fn new(
        index: u64,
        timestamp_ms: u64,
        width: u32,
        height: u32,
        pixels: impl Into<Arc<[u8]>>,
    ) -> Result<Self, DomainError> {
        if width == 0 || height == 0 {
            return Err(DomainError::EmptyFrame { width, height });
        }
        let pixels = pixels.into();
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(DomainError::PixelLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            index,
            timestamp_ms,
            width,
            height,
            pixels,
        })
    }

    /// Frame filled with a single colour.
    pub fn solid(index: u64, width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, DomainError> {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(index, 0, width, height, pixels)
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn shared_pixels(&self) -> Arc<[u8]> {
        Arc::clone(&self.pixels)
    }

    /// Same image under a different index and timestamp.
    pub fn with_index(&self, index: u64, timestamp_ms: u64) -> Self {
        Self {
            index,
            timestamp_ms,
            ..self.clone()
        }
    }

    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let o = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("index", &self.index)
            .field("timestamp_ms", &self.timestamp_ms)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

/// Mayo endoscopic subscore.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct MesScore(u8);

impl MesScore {
    pub const ALL: [MesScore; 4] = [MesScore(0), MesScore(1), MesScore(2), MesScore(3)];

    pub fn new(value: u8) -> Result<Self, DomainError> {
        if (value as usize) < NUM_CLASSES {
            Ok(Self(value))
        } else {
            Err(DomainError::InvalidMes(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn as_index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<u8> for MesScore {
    type Error = DomainError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<MesScore> for u8 {
    fn from(m: MesScore) -> u8 {
        m.0
    }
}

impl fmt::Display for MesScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of the largest entry; ties resolve toward the higher class.
pub(crate) fn argmax_high(values: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if values[i] >= values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn max_entry(values: &[f64; NUM_CLASSES]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Unnormalized classifier outputs, one per MES class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct LogitVector([f64; NUM_CLASSES]);

impl LogitVector {
    pub fn new(values: [f64; NUM_CLASSES]) -> Result<Self, DomainError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(DomainError::NonFiniteLogit { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        max_entry(&self.0)
    }

    pub fn argmax(&self) -> MesScore {
        MesScore(argmax_high(&self.0) as u8)
    }
}

impl TryFrom<[f64; 4]> for LogitVector {
    type Error = DomainError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LogitVector> for [f64; 4] {
    fn from(l: LogitVector) -> Self {
        l.0
    }
}

/// Normalized class distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct ProbVector([f64; NUM_CLASSES]);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: [f64; NUM_CLASSES]) -> Result<Self, DomainError> {
        for &p in &values {
            if !(0.0..=1.0).contains(&p) {
                return Err(DomainError::InvalidProbs(format!(
                    "entry {p} outside [0,1]"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(DomainError::InvalidProbs(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(class: MesScore) -> Self {
        let mut v = [0.0; NUM_CLASSES];
        v[class.as_index()] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        max_entry(&self.0)
    }

    /// Most probable class, ties toward the higher class.
    pub fn argmax(&self) -> MesScore {
        MesScore(argmax_high(&self.0) as u8)
    }
}

impl TryFrom<[f64; 4]> for ProbVector {
    type Error = DomainError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ProbVector> for [f64; 4] {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Blur,
    ColourRatio,
    BelowOsrThreshold,
    /// The model backend failed (timeout or malformed reply).
    InferenceUnavailable,
    /// Dropped by the ingest queue because processing fell behind.
    Dropped,
}

/// Payload of a frame that passed every check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScoredRepr", into = "ScoredRepr")]
pub struct ScoredFrame {
    mes: MesScore,
    probs: ProbVector,
    max_logit: f64,
    certainty: f64,
}

impl ScoredFrame {
    pub fn new(
        mes: MesScore,
        probs: ProbVector,
        max_logit: f64,
        certainty: f64,
    ) -> Result<Self, DomainError> {
        let max = probs.max();
        if certainty != max {
            return Err(DomainError::CertaintyMismatch { certainty, max });
        }
        Ok(Self {
            mes,
            probs,
            max_logit,
            certainty,
        })
    }

    pub fn mes(&self) -> MesScore {
        self.mes
    }

    pub fn probs(&self) -> &ProbVector {
        &self.probs
    }

    pub fn max_logit(&self) -> f64 {
        self.max_logit
    }

    pub fn certainty(&self) -> f64 {
        self.certainty
    }
}

#[derive(Serialize, Deserialize)]
struct ScoredRepr {
    mes: MesScore,
    probs: ProbVector,
    max_logit: f64,
    certainty: f64,
}

impl TryFrom<ScoredRepr> for ScoredFrame {
    type Error = DomainError;

    fn try_from(r: ScoredRepr) -> Result<Self, Self::Error> {
        Self::new(r.mes, r.probs, r.max_logit, r.certainty)
    }
}

impl From<ScoredFrame> for ScoredRepr {
    fn from(s: ScoredFrame) -> Self {
        Self {
            mes: s.mes,
            probs: s.probs,
            max_logit: s.max_logit,
            certainty: s.certainty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerdictStatus {
    Discarded { reason: DiscardReason },
    Scored(ScoredFrame),
}

/// Per-frame outcome of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameVerdict {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub status: VerdictStatus,
    /// Raw model output whenever the model ran, kept for replay and evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<LogitVector>,
}

impl FrameVerdict {
    pub fn discarded(frame_index: u64, timestamp_ms: u64, reason: DiscardReason) -> Self {
        Self {
            frame_index,
            timestamp_ms,
            status: VerdictStatus::Discarded { reason },
            logits: None,
        }
    }

    pub fn scored(frame_index: u64, timestamp_ms: u64, scored: ScoredFrame) -> Self {
        Self {
            frame_index,
            timestamp_ms,
            status: VerdictStatus::Scored(scored),
            logits: None,
        }
    }

    pub fn with_logits(mut self, logits: LogitVector) -> Self {
        self.logits = Some(logits);
        self
    }

    pub fn scored_frame(&self) -> Option<&ScoredFrame> {
        match &self.status {
            VerdictStatus::Scored(s) => Some(s),
            VerdictStatus::Discarded { .. } => None,
        }
    }

    pub fn discard_reason(&self) -> Option<DiscardReason> {
        match self.status {
            VerdictStatus::Discarded { reason } => Some(reason),
            VerdictStatus::Scored(_) => None,
        }
    }

    pub fn is_scored(&self) -> bool {
        self.scored_frame().is_some()
    }

    /// Usability score used for evaluation: the maximum raw logit when the
    /// model ran, negative infinity for frames rejected before inference.
    pub fn usability_score(&self) -> f64 {
        self.logits.map_or(f64::NEG_INFINITY, |l| l.max())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Tunables for every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Minimum Laplacian variance (grayscale units squared).
    pub blur_var_min: f64,
    pub red_ratio_min: f64,
    pub red_ratio_max: f64,
    /// Max-logit gate, in raw logit units.
    pub osr_tau: f64,
    pub temperature: f64,
    /// Rolling mean length in scored frames.
    pub window: u32,
    /// Number of frames retained for review.
    pub k: u32,
    /// Minimum frame-index distance between retained frames.
    pub min_gap: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            blur_var_min: 50.0,
            red_ratio_min: 0.35,
            red_ratio_max: 0.95,
            osr_tau: 3.0,
            temperature: 1.0,
            window: 5,
            k: 6,
            min_gap: 30,
        }
    }
}

impl PipelineConfig {
    /// Every violated invariant; empty iff the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push("temperature must be > 0".to_string());
        }
        if self.window < 1 {
            v.push("window must be >= 1".to_string());
        }
        if self.k < 1 {
            v.push("k must be >= 1".to_string());
        }
        if !(self.blur_var_min >= 0.0 && self.blur_var_min.is_finite()) {
            v.push("blur_var_min must be a finite value >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.red_ratio_min) {
            v.push("red_ratio_min must lie in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.red_ratio_max) {
            v.push("red_ratio_max must lie in [0, 1]".to_string());
        }
        if self.red_ratio_min > self.red_ratio_max {
            v.push("red_ratio_min must be <= red_ratio_max".to_string());
        }
        if !self.osr_tau.is_finite() {
            v.push("osr_tau must be finite".to_string());
        }
        v
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(violations))
        }
    }

    /// Parses the flat `key = value` format. Missing keys take defaults.
    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_config_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_config_string()?)?;
        Ok(())
    }
}

/// Free-function form used by the CLI and service.
pub fn validate_config(config: &PipelineConfig) -> Vec<String> {
    config.validate()
}
