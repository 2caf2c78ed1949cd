//! Deterministic synthetic endoscopy streams with known ground truth.
//!
//! Usable and out-of-distribution frames are sharp, red-tinted and textured.
//! Their colour field is solved so that the stub model, fed the frame,
//! produces a chosen ("planted") logit vector. Blurred, dark and blue frames
//! fail the prefilter. Every frame can be rendered independently from
//! `(seed, index)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::domain::{Frame, LogitVector, MesScore, NUM_CLASSES};
use crate::inference::{cell_range, StubModel, StubModelSpec};

/// Noise level at which the generator's own-score AUROC sits near 0.9.
pub const CALIBRATED_NOISE: f64 = 4.0;

/// Texture half-amplitude in 8-bit units.
const TEXTURE: u8 = 24;
const USABLE_BASE: [f64; 3] = [0.6, 0.35, 0.3];
const BLUE_BASE: [f64; 3] = [0.12, 0.25, 0.65];
const PLANT_ITERATIONS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    /// In-distribution footage of the given class.
    Usable(MesScore),
    /// Sharp and red but unlike anything the model knows.
    OutOfDistribution,
    Blur,
    Dark,
    /// Out-of-body view, fails the colour check.
    Blue,
}

impl SegmentKind {
    pub fn is_usable(self) -> bool {
        matches!(self, Self::Usable(_))
    }

    fn passes_prefilter(self) -> bool {
        matches!(self, Self::Usable(_) | Self::OutOfDistribution)
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usable(m) => write!(f, "u{m}"),
            Self::OutOfDistribution => f.write_str("ood"),
            Self::Blur => f.write_str("blur"),
            Self::Dark => f.write_str("dark"),
            Self::Blue => f.write_str("blue"),
        }
    }
}

impl FromStr for SegmentKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ood" => Self::OutOfDistribution,
            "blur" => Self::Blur,
            "dark" => Self::Dark,
            "blue" => Self::Blue,
            _ => {
                let m = s
                    .strip_prefix('u')
                    .and_then(|d| d.parse::<u8>().ok())
                    .and_then(|d| MesScore::new(d).ok())
                    .ok_or_else(|| SynthError::Invalid(format!("unknown segment kind {s:?}")))?;
                Self::Usable(m)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub frames: u64,
}

/// Generator parameters. The textual form is
/// `seed=1,noise=0,size=320x256,fps=30,model=42,plan=u0:40/blur:10/u2:40`;
/// every key is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to every planted logit.
    pub noise: f64,
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    /// Seed of the stub model the frames are planted for.
    pub model_seed: u64,
    pub plan: Vec<Segment>,
}

pub fn default_plan() -> Vec<Segment> {
    use SegmentKind::*;
    let m = |v| MesScore::new(v).expect("valid class");
    [
        (Blue, 15),
        (Dark, 10),
        (Usable(m(0)), 40),
        (Blur, 10),
        (Usable(m(1)), 40),
        (OutOfDistribution, 20),
        (Usable(m(2)), 40),
        (Blur, 10),
        (Usable(m(1)), 30),
        (OutOfDistribution, 15),
        (Usable(m(0)), 30),
    ]
    .into_iter()
    .map(|(kind, frames)| Segment { kind, frames })
    .collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: 0.0,
            width: 320,
            height: 256,
            fps: 30,
            model_seed: 42,
            plan: default_plan(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let side = StubModelSpec::new(self.model_seed).input_side;
        if self.width < 2 * side || self.height < 2 * side {
            return Err(SynthError::Invalid(format!(
                "frames must be at least {0}x{0}",
                2 * side
            )));
        }
        if self.width > u16::MAX as u32 || self.height > u16::MAX as u32 {
            return Err(SynthError::Invalid("frame size exceeds 65535".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::Invalid("noise must be finite and >= 0".into()));
        }
        if self.fps == 0 {
            return Err(SynthError::Invalid("fps must be >= 1".into()));
        }
        if self.plan.is_empty() || self.plan.iter().any(|s| s.frames == 0) {
            return Err(SynthError::Invalid("plan needs non-empty segments".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> u64 {
        self.plan.iter().map(|s| s.frames).sum()
    }

    pub fn timestamp_ms(&self, index: u64) -> u64 {
        index * 1000 / self.fps as u64
    }

    /// Highest usable class in the plan.
    pub fn planted_max_class(&self) -> Option<MesScore> {
        self.plan
            .iter()
            .filter_map(|s| match s.kind {
                SegmentKind::Usable(m) => Some(m),
                _ => None,
            })
            .max()
    }

    pub fn segment_at(&self, index: u64) -> Option<SegmentKind> {
        let mut end = 0;
        for s in &self.plan {
            end += s.frames;
            if index < end {
                return Some(s.kind);
            }
        }
        None
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed={},noise={},size={}x{},fps={},model={},plan=",
            self.seed, self.noise, self.width, self.height, self.fps, self.model_seed
        )?;
        for (i, s) in self.plan.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{}:{}", s.kind, s.frames)?;
        }
        Ok(())
    }
}

impl FromStr for SynthSpec {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = Self::default();
        let bad = |what: &str, v: &str| SynthError::Invalid(format!("bad {what} {v:?}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| SynthError::Invalid(format!("expected key=value, got {part:?}")))?;
            match key {
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed", value))?,
                "noise" => spec.noise = value.parse().map_err(|_| bad("noise", value))?,
                "fps" => spec.fps = value.parse().map_err(|_| bad("fps", value))?,
                "model" => spec.model_seed = value.parse().map_err(|_| bad("model", value))?,
                "size" => {
                    let (w, h) = value.split_once('x').ok_or_else(|| bad("size", value))?;
                    spec.width = w.parse().map_err(|_| bad("size", value))?;
                    spec.height = h.parse().map_err(|_| bad("size", value))?;
                }
                "plan" => {
                    spec.plan = value
                        .split('/')
                        .map(|seg| {
                            let (kind, n) =
                                seg.split_once(':').ok_or_else(|| bad("segment", seg))?;
                            Ok(Segment {
                                kind: kind.parse()?,
                                frames: n.parse().map_err(|_| bad("segment length", seg))?,
                            })
                        })
                        .collect::<Result<_, SynthError>>()?;
                }
                _ => return Err(SynthError::Invalid(format!("unknown key {key:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Ground truth for one synthetic frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTruth {
    pub frame_index: u64,
    pub kind: SegmentKind,
    pub usable: bool,
    pub mes: Option<MesScore>,
    /// Logits the frame was built to produce; `None` for prefilter failures.
    pub planted: Option<LogitVector>,
}

impl FrameTruth {
    /// The generator's own usability score: planted max logit, or negative
    /// infinity for frames built to fail the prefilter.
    pub fn own_score(&self) -> f64 {
        self.planted.map_or(f64::NEG_INFINITY, |l| l.max())
    }
}

/// Per-frame usability labels of a stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UsabilityLabelTrack {
    pub usable: Vec<bool>,
}

fn frame_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws the planted logits. Always consumes the same number of values so
/// later draws line up regardless of kind or noise.
fn draw_planted(kind: SegmentKind, noise: f64, rng: &mut ChaCha8Rng) -> Option<LogitVector> {
    let high: f64 = rng.random_range(6.0..7.5);
    let mut base = [0.0; NUM_CLASSES];
    for b in &mut base {
        *b = rng.random_range(-1.0..1.0);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut eps = [0.0; NUM_CLASSES];
    for e in &mut eps {
        *e = normal.sample(rng) * noise;
    }
    let mut t = match kind {
        SegmentKind::Usable(m) => {
            base[m.as_index()] = high;
            base
        }
        SegmentKind::OutOfDistribution => base.map(|b| b * 1.5),
        _ => return None,
    };
    for (v, e) in t.iter_mut().zip(eps) {
        *v += e;
    }
    Some(LogitVector::new(t).expect("finite planted logits"))
}

/// Renders frames of a [`SynthSpec`].
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    spec: SynthSpec,
    model: StubModel,
    /// Inverse of `W W^T`.
    gram_inv: [[f64; NUM_CLASSES]; NUM_CLASSES],
    x_ranges: Vec<(u32, u32)>,
    y_ranges: Vec<(u32, u32)>,
}

impl SynthGenerator {
    pub fn new(spec: SynthSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let model = StubModel::new(StubModelSpec::new(spec.model_seed));
        let n = model.spec().feature_len();
        let w = model.weights();
        let mut gram = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in gram.iter_mut().enumerate() {
            for (j, g) in row.iter_mut().enumerate() {
                *g = (0..n).map(|k| w[i * n + k] * w[j * n + k]).sum();
            }
        }
        let gram_inv =
            invert4(gram).ok_or_else(|| SynthError::Invalid("singular model weights".into()))?;
        let side = model.spec().input_side;
        Ok(Self {
            x_ranges: (0..side).map(|c| cell_range(c, spec.width, side)).collect(),
            y_ranges: (0..side)
                .map(|c| cell_range(c, spec.height, side))
                .collect(),
            spec,
            model,
            gram_inv,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn len(&self) -> u64 {
        self.spec.total_frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truth(&self, index: u64) -> Option<FrameTruth> {
        let kind = self.spec.segment_at(index)?;
        let mut rng = frame_rng(self.spec.seed, index);
        Some(self.truth_with(index, kind, &mut rng))
    }

    fn truth_with(&self, index: u64, kind: SegmentKind, rng: &mut ChaCha8Rng) -> FrameTruth {
        let planted = draw_planted(kind, self.spec.noise, rng);
        FrameTruth {
            frame_index: index,
            kind,
            usable: kind.is_usable(),
            mes: match kind {
                SegmentKind::Usable(m) => Some(m),
                _ => None,
            },
            planted,
        }
    }

    pub fn render(&self, index: u64) -> Option<(Frame, FrameTruth)> {
        let kind = self.spec.segment_at(index)?;
        let mut rng = frame_rng(self.spec.seed, index);
        let truth = self.truth_with(index, kind, &mut rng);
        let (w, h) = (self.spec.width, self.spec.height);
        let pixels = match (kind, truth.planted) {
            (_, Some(target)) => {
                let cells = self.plant(&target, USABLE_BASE, &mut rng);
                self.textured(&cells)
            }
            (SegmentKind::Blue, None) => {
                let cells = self.jittered_base(BLUE_BASE, &mut rng);
                let q: Vec<u8> = cells.iter().map(|x| quantize(*x)).collect();
                self.textured(&q)
            }
            (SegmentKind::Blur, None) => smooth_gradient(w, h, &mut rng),
            (SegmentKind::Dark, None) => {
                let level: u8 = rng.random_range(0..6);
                vec![level; (w * h * 3) as usize]
            }
            (SegmentKind::Usable(_) | SegmentKind::OutOfDistribution, None) => {
                unreachable!("prefilter-passing kinds always carry planted logits")
            }
        };
        debug_assert_eq!(kind.passes_prefilter(), truth.planted.is_some());
        let frame = Frame::new(index, self.spec.timestamp_ms(index), w, h, pixels)
            .expect("generator emits well-formed frames");
        Some((frame, truth))
    }

    fn jittered_base(&self, base: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.model.spec().feature_len();
        (0..n)
            .map(|i| base[i % 3] + rng.random_range(-0.05..0.05))
            .collect()
    }

    /// Solves for per-cell intensities whose stub logits equal `target`:
    /// repeated minimum-norm corrections, each followed by clamping into the
    /// range the texture needs.
    fn plant(&self, target: &LogitVector, base: [f64; 3], rng: &mut ChaCha8Rng) -> Vec<u8> {
        let n = self.model.spec().feature_len();
        let w = self.model.weights();
        let lo = TEXTURE as f64 / 255.0;
        let hi = 1.0 - lo;
        let mut x = self.jittered_base(base, rng);
        for _ in 0..PLANT_ITERATIONS {
            let mut r = [0.0; NUM_CLASSES];
            for (c, rc) in r.iter_mut().enumerate() {
                let row = &w[c * n..(c + 1) * n];
                *rc = target.values()[c] - row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut coef = [0.0; NUM_CLASSES];
            for (i, ci) in coef.iter_mut().enumerate() {
                *ci = (0..NUM_CLASSES).map(|j| self.gram_inv[i][j] * r[j]).sum();
            }
            for (k, xk) in x.iter_mut().enumerate() {
                let delta: f64 = (0..NUM_CLASSES).map(|c| w[c * n + k] * coef[c]).sum();
                *xk = (*xk + delta).clamp(lo, hi);
            }
        }
        x.into_iter().map(quantize).collect()
    }

    /// Expands per-cell values into a full frame with a zero-mean texture in
    /// every cell, so the box average of each cell is exactly its value.
    fn textured(&self, cells: &[u8]) -> Vec<u8> {
        let (w, h) = (self.spec.width as usize, self.spec.height as usize);
        let side = self.x_ranges.len();
        let mut px = vec![0u8; w * h * 3];
        for (cy, &(y0, y1)) in self.y_ranges.iter().enumerate() {
            for (cx, &(x0, x1)) in self.x_ranges.iter().enumerate() {
                let cw = (x1 - x0) as usize;
                let count = cw * (y1 - y0) as usize;
                let base = &cells[(cy * side + cx) * 3..][..3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let k = (y - y0) as usize * cw + (x - x0) as usize;
                        let o = (y as usize * w + x as usize) * 3;
                        for ch in 0..3 {
                            px[o + ch] = if count % 2 == 1 && k == count - 1 {
                                base[ch]
                            } else if k.is_multiple_of(2) {
                                base[ch] + TEXTURE
                            } else {
                                base[ch] - TEXTURE
                            };
                        }
                    }
                }
            }
        }
        px
    }
}

fn quantize(x: f64) -> u8 {
    (x * 255.0)
        .round()
        .clamp(TEXTURE as f64, (255 - TEXTURE) as f64) as u8
}

/// Red-tinted linear ramp: no texture, so the Laplacian is only rounding.
fn smooth_gradient(w: u32, h: u32, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let gx: f64 = rng.random_range(-40.0..40.0) / w as f64;
    let gy: f64 = rng.random_range(-40.0..40.0) / h as f64;
    let base = [170.0, 90.0, 70.0];
    let mut px = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let d = gx * x as f64 + gy * y as f64;
            for b in base {
                px.push((b + d).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    px
}

fn invert4(m: [[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut a = m;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for k in 0..4 {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = a[r][col];
                for k in 0..4 {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    Some(inv)
}

/// Iterator over `(frame, truth)` pairs.
pub struct SynthStream {
    generator: SynthGenerator,
    next: u64,
}

impl SynthStream {
    pub fn new(spec: SynthSpec) -> Result<Self, SynthError> {
        Ok(Self {
            generator: SynthGenerator::new(spec)?,
            next: 0,
        })
    }

    pub fn generator(&self) -> &SynthGenerator {
        &self.generator
    }
}

impl Iterator for SynthStream {
    type Item = (Frame, FrameTruth);

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.generator.render(self.next)?;
        self.next += 1;
        Some(out)
    }
}

/// A fully materialized synthetic video.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub frames: Vec<Frame>,
    pub usability: UsabilityLabelTrack,
    pub true_mes: Vec<Option<MesScore>>,
    pub truth: Vec<FrameTruth>,
}

pub fn synth_stream(spec: SynthSpec) -> Result<SynthVideo, SynthError> {
    let mut video = SynthVideo {
        frames: Vec::new(),
        usability: UsabilityLabelTrack::default(),
        true_mes: Vec::new(),
        truth: Vec::new(),
    };
    for (frame, truth) in SynthStream::new(spec)? {
        video.frames.push(frame);
        video.usability.usable.push(truth.usable);
        video.true_mes.push(truth.mes);
        video.truth.push(truth);
    }
    Ok(video)
}
