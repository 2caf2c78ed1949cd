//! Temperature-scaled softmax, the maximum-logit open-set gate, and offline
//! temperature fitting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{LogitVector, MesScore, ProbVector, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("temperature must be finite and > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("validation set is empty")]
    EmptyValidationSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    temperature: f64,
}

impl CalibrationModel {
    pub fn new(temperature: f64) -> Result<Self, CalibrationError> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(Self { temperature })
        } else {
            Err(CalibrationError::InvalidTemperature(temperature))
        }
    }

    pub fn identity() -> Self {
        Self { temperature: 1.0 }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// The single-line config form, `temperature = <decimal>`.
    pub fn to_config_line(&self) -> String {
        format!("temperature = {:?}\n", self.temperature)
    }
}

pub fn apply_temperature(logits: &LogitVector, calib: &CalibrationModel) -> LogitVector {
    let t = calib.temperature;
    let v = logits.values().map(|l| l / t);
    LogitVector::new(v).expect("dividing finite logits by a positive finite T stays finite")
}

/// Max-subtracted softmax; never overflows for finite input.
pub fn softmax(logits: &LogitVector) -> ProbVector {
    let max = logits.max();
    let exps = logits.values().map(|l| (l - max).exp());
    let sum: f64 = exps.iter().sum();
    let probs = exps.map(|e| e / sum);
    ProbVector::new(probs).expect("softmax output is a distribution")
}

/// Outcome of the open-set gate for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub max_logit: f64,
    /// Present iff the frame is in-distribution.
    pub classification: Option<Classification>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub mes: MesScore,
    pub probs: ProbVector,
    pub certainty: f64,
}

impl GateDecision {
    pub fn in_distribution(&self) -> bool {
        self.classification.is_some()
    }
}

/// Gates on the RAW maximum logit (`>= osr_tau` is in-distribution), then
/// classifies from the temperature-scaled softmax.
pub fn gate_and_classify(
    logits: &LogitVector,
    calib: &CalibrationModel,
    osr_tau: f64,
) -> GateDecision {
    let max_logit = logits.max();
    let classification = (max_logit >= osr_tau).then(|| {
        let probs = softmax(&apply_temperature(logits, calib));
        Classification {
            mes: probs.argmax(),
            certainty: probs.max(),
            probs,
        }
    });
    GateDecision {
        max_logit,
        classification,
    }
}

fn log_sum_exp(values: &[f64; NUM_CLASSES]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of `softmax(logits / t)` against the labels.
pub fn mean_nll(validation: &[(LogitVector, MesScore)], t: f64) -> f64 {
    let total: f64 = validation
        .iter()
        .map(|(logits, label)| {
            let scaled = logits.values().map(|l| l / t);
            log_sum_exp(&scaled) - scaled[label.as_index()]
        })
        .sum();
    total / validation.len() as f64
}

pub const FIT_LOG_T_MIN: f64 = -2.995_732_273_553_991; // ln 0.05
pub const FIT_LOG_T_MAX: f64 = 2.995_732_273_553_991; // ln 20
pub const FIT_TOLERANCE: f64 = 1e-4;

/// Temperature minimizing validation NLL, by golden-section search over ln T.
///
/// The set is put into a canonical order first so the result does not depend
/// on how the caller ordered it. T = 1 is kept whenever the search fails to
/// beat it.
pub fn fit_temperature(
    validation: &[(LogitVector, MesScore)],
) -> Result<CalibrationModel, CalibrationError> {
    if validation.is_empty() {
        return Err(CalibrationError::EmptyValidationSet);
    }
    let mut set = validation.to_vec();
    set.sort_by(|(la, ya), (lb, yb)| {
        ya.cmp(yb).then_with(|| {
            la.values()
                .iter()
                .zip(lb.values())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let f = |u: f64| mean_nll(&set, u.exp());

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (FIT_LOG_T_MIN, FIT_LOG_T_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > FIT_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let u = (a + b) / 2.0;
    let t = if f(u) <= f(0.0) { u.exp() } else { 1.0 };
    CalibrationModel::new(t)
}

#[derive(Debug, Error)]
pub enum ValidationFileError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
}

#[derive(Deserialize)]
struct ValidationRow {
    l0: f64,
    l1: f64,
    l2: f64,
    l3: f64,
    label: u8,
}

/// Reads a held-out validation set from CSV with header `l0,l1,l2,l3,label`.
pub fn read_validation_csv(
    input: impl std::io::Read,
) -> Result<Vec<(LogitVector, MesScore)>, ValidationFileError> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(input).deserialize().enumerate() {
        let r: ValidationRow = row?;
        let bad = |e: crate::domain::DomainError| ValidationFileError::BadRow {
            row: i + 1,
            reason: e.to_string(),
        };
        let logits = LogitVector::new([r.l0, r.l1, r.l2, r.l3]).map_err(bad)?;
        let label = MesScore::new(r.label).map_err(bad)?;
        out.push((logits, label));
    }
    Ok(out)
}
