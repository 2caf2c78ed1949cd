//! Real-time endoscopic MES scoring: frame prefilter, open-set gated
//! classification, temporal smoothing, key-frame selection and session storage.

pub mod domain;
pub mod eval;
pub mod events;
pub mod imageio;
pub mod inference;
pub mod osr;
pub mod pipeline;
pub mod prefilter;
pub mod protocol;
pub mod selection;
pub mod service;
pub mod session;
pub mod source;
pub mod synth;
pub mod temporal;
