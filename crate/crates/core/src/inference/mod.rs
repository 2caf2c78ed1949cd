//! Boundary between the pipeline and whatever produces logits.
//!
//! The pipeline only sees [`LogitProvider`]. Three providers ship here: a
//! deterministic linear stub for tests and benchmarks, a TCP client for an
//! external model server, and a replay provider that serves logits recorded in
//! a session log.

mod remote;
mod stub;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::domain::{Frame, FrameVerdict, LogitVector};

pub use remote::{
    decode_request, decode_response, encode_request, encode_response, serve_connection,
    RemoteProvider, DEFAULT_TIMEOUT, MAGIC,
};
pub(crate) use stub::cell_range;
pub use stub::{StubModel, StubModelSpec};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no logits available for frame {0}")]
    Missing(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderDescriptor {
    pub name: String,
    /// Input size the model expects, when it resizes internally.
    pub input_size: Option<(u32, u32)>,
}

/// Produces one logit vector per frame.
///
/// A provider is driven by one pipeline thread at a time, never concurrently
/// for the same session.
pub trait LogitProvider: Send {
    fn descriptor(&self) -> ProviderDescriptor;

    fn infer(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn descriptor(&self) -> ProviderDescriptor {
        (**self).descriptor()
    }

    fn infer(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError> {
        (**self).infer(frame)
    }
}

/// Which provider to build, as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    /// `stub:SEED`
    Stub(u64),
    /// `remote:HOST:PORT`
    Remote(String),
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn LogitProvider>, InferenceError> {
        Ok(match self {
            Self::Stub(seed) => Box::new(StubModel::new(StubModelSpec::new(*seed))),
            Self::Remote(addr) => Box::new(RemoteProvider::new(addr.as_str())?),
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Stub(seed) => write!(f, "stub:{seed}"),
            Self::Remote(addr) => write!(f, "remote:{addr}"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(seed) = s.strip_prefix("stub:") {
            return seed
                .parse()
                .map(Self::Stub)
                .map_err(|_| format!("bad stub seed {seed:?}"));
        }
        if let Some(addr) = s.strip_prefix("remote:") {
            if addr
                .rsplit_once(':')
                .is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok())
            {
                return Ok(Self::Remote(addr.to_string()));
            }
            return Err(format!("expected remote:HOST:PORT, got {s:?}"));
        }
        Err(format!("expected stub:SEED or remote:HOST:PORT, got {s:?}"))
    }
}

/// Serves the logits recorded alongside a session's verdicts.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    logits: HashMap<u64, LogitVector>,
}

impl ReplayProvider {
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a FrameVerdict>) -> Self {
        let logits = verdicts
            .into_iter()
            .filter_map(|v| v.logits.map(|l| (v.frame_index, l)))
            .collect();
        Self { logits }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

impl LogitProvider for ReplayProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: "replay".into(),
            input_size: None,
        }
    }

    fn infer(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError> {
        self.logits
            .get(&frame.index())
            .copied()
            .ok_or(InferenceError::Missing(frame.index()))
    }
}
