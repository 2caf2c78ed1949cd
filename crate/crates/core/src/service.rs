//! Session lifecycle: Idle -> Running (start) -> Review (stop or end of
//! source) -> Idle (review submitted). Control calls are serialized.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MesScore, PipelineConfig};
use crate::events::{Event, EventBus, LifecycleState};
use crate::inference::ModelSpec;
use crate::pipeline::{
    now_ms, spawn_run, FrameProcessor, ReviewBundle, RunHandle, RunOptions, RunStats,
};
use crate::session::{next_session_id, ReviewEdit, Session, SessionError};
use crate::source::{SourceKind, SourceSpec};
use crate::synth::SynthGenerator;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("a session is already running")]
    AlreadyRunning,
    #[error("session {0} is awaiting review")]
    ReviewPending(u64),
    #[error("no session is running")]
    NotRunning,
    #[error("no session is in review")]
    NotInReview,
    #[error("{0}")]
    SourceUnavailable(String),
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("model unavailable: {0}")]
    ModelUnavailable(String),
    #[error("frame {0} is not in the selection")]
    UnknownFrame(u64),
    #[error(transparent)]
    Session(SessionError),
    #[error("pipeline failed: {0}")]
    RunFailed(String),
}

impl ControlError {
    /// Stable error code for the wire protocol.
    pub fn code(&self) -> &'static str {
        match self {
            Self::AlreadyRunning => "AlreadyRunning",
            Self::ReviewPending(_) => "ReviewPending",
            Self::NotRunning => "NotRunning",
            Self::NotInReview => "NotInReview",
            Self::SourceUnavailable(_) => "SourceUnavailable",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::ModelUnavailable(_) => "ModelUnavailable",
            Self::UnknownFrame(_) => "UnknownFrame",
            Self::Session(_) => "SessionError",
            Self::RunFailed(_) => "RunFailed",
        }
    }
}

impl From<SessionError> for ControlError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::UnknownFrame(f) => Self::UnknownFrame(f),
            other => Self::Session(other),
        }
    }
}

/// A clinician's correction as sent by the review screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub frame_index: u64,
    pub corrected_mes: MesScore,
    #[serde(default)]
    pub keep_in_journal: bool,
}

#[derive(Debug, Clone)]
pub struct ServiceSettings {
    /// Root directory for session logs and frames.
    pub data_dir: PathBuf,
    pub model: ModelSpec,
    /// Used when `start` carries no config.
    pub default_config: PipelineConfig,
}

#[allow(clippy::large_enum_variant)] // a single instance per controller
enum State {
    Idle,
    Running {
        session_id: u64,
        run: RunHandle,
    },
    Review {
        session: Session,
        bundle: ReviewBundle,
    },
}

struct Inner {
    state: State,
    last_stats: Option<RunStats>,
}

pub struct Controller {
    settings: ServiceSettings,
    bus: Arc<EventBus>,
    inner: Mutex<Inner>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub state: LifecycleState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<u64>,
}

impl Controller {
    pub fn new(settings: ServiceSettings) -> Self {
        Self {
            settings,
            bus: Arc::new(EventBus::new()),
            inner: Mutex::new(Inner {
                state: State::Idle,
                last_stats: None,
            }),
        }
    }

    pub fn events(&self) -> &Arc<EventBus> {
        &self.bus
    }

    pub fn data_dir(&self) -> &Path {
        &self.settings.data_dir
    }

    /// Locks and folds in a run that has finished on its own.
    fn lock(&self) -> MutexGuard<'_, Inner> {
        let mut inner = self.inner.lock().expect("controller lock");
        if matches!(&inner.state, State::Running { run, .. } if run.is_finished()) {
            let _ = self.reap(&mut inner);
        }
        inner
    }

    /// Joins the running pipeline and moves to Review (or Idle on failure).
    fn reap(&self, inner: &mut Inner) -> Result<ReviewBundle, ControlError> {
        let State::Running { run, session_id } = std::mem::replace(&mut inner.state, State::Idle)
        else {
            return Err(ControlError::NotRunning);
        };
        match run.join() {
            Ok(outcome) => {
                inner.last_stats = Some(outcome.stats);
                let bundle = outcome.bundle.clone();
                inner.state = State::Review {
                    session: outcome.session,
                    bundle: outcome.bundle,
                };
                Ok(bundle)
            }
            Err(e) => {
                log::error!("session {session_id}: {e}");
                self.bus.publish(&Event::Lifecycle {
                    state: LifecycleState::Idle,
                    session_id: None,
                });
                Err(ControlError::RunFailed(e.to_string()))
            }
        }
    }

    pub fn status(&self) -> Status {
        let inner = self.lock();
        match &inner.state {
            State::Idle => Status {
                state: LifecycleState::Idle,
                session_id: None,
            },
            State::Running { session_id, .. } => Status {
                state: LifecycleState::Running,
                session_id: Some(*session_id),
            },
            State::Review { session, .. } => Status {
                state: LifecycleState::Review,
                session_id: Some(session.id()),
            },
        }
    }

    pub fn start(&self, source: &str, config: Option<PipelineConfig>) -> Result<u64, ControlError> {
        let mut inner = self.lock();
        match &inner.state {
            State::Idle => {}
            State::Running { .. } => return Err(ControlError::AlreadyRunning),
            State::Review { session, .. } => return Err(ControlError::ReviewPending(session.id())),
        }
        let config = config.unwrap_or_else(|| self.settings.default_config.clone());
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(ControlError::InvalidConfig(problems));
        }
        let spec = SourceSpec::parse(source)
            .map_err(|e| ControlError::SourceUnavailable(e.to_string()))?;
        let frames = spec
            .open()
            .map_err(|e| ControlError::SourceUnavailable(e.to_string()))?;
        let provider = self
            .settings
            .model
            .build()
            .map_err(|e| ControlError::ModelUnavailable(e.to_string()))?;
        let processor = FrameProcessor::new(config.clone(), provider)
            .map_err(|e| ControlError::InvalidConfig(vec![e.to_string()]))?;

        let dir = &self.settings.data_dir;
        std::fs::create_dir_all(dir).map_err(|e| ControlError::Session(e.into()))?;
        let id = next_session_id(dir).map_err(|e| ControlError::Session(e.into()))?;
        if let SourceKind::Synthetic(synth) = &spec.kind {
            // Ground truth travels with the session so it can be evaluated later.
            let generator = SynthGenerator::new(synth.clone())
                .map_err(|e| ControlError::SourceUnavailable(e.to_string()))?;
            crate::eval::LabelTrack::from_generator(&generator)
                .save(&crate::eval::label_track_path(dir, id))
                .map_err(|e| ControlError::Session(e.into()))?;
        }
        let session = Session::create(
            dir,
            id,
            now_ms(),
            config,
            frames.describe(),
            self.settings.model.to_string(),
        )?;
        let run = spawn_run(
            frames,
            processor,
            session,
            self.bus.clone(),
            RunOptions::for_source(spec.live),
        );
        inner.state = State::Running {
            session_id: id,
            run,
        };
        self.bus.publish(&Event::Lifecycle {
            state: LifecycleState::Running,
            session_id: Some(id),
        });
        log::info!("session {id} started on {source}");
        Ok(id)
    }

    /// Stops the source, drains the frames already ingested and returns the
    /// review bundle.
    pub fn stop(&self) -> Result<ReviewBundle, ControlError> {
        let mut inner = self.lock();
        match &inner.state {
            State::Running { run, .. } => run.request_stop(),
            _ => return Err(ControlError::NotRunning),
        }
        self.reap(&mut inner)
    }

    /// Blocks until a running session reaches the end of its source.
    pub fn wait_for_review(&self) -> Result<ReviewBundle, ControlError> {
        let mut inner = self.lock();
        match &inner.state {
            State::Running { .. } => self.reap(&mut inner),
            State::Review { bundle, .. } => Ok(bundle.clone()),
            State::Idle => Err(ControlError::NotRunning),
        }
    }

    pub fn review_get(&self) -> Result<ReviewBundle, ControlError> {
        match &self.lock().state {
            State::Review { bundle, .. } => Ok(bundle.clone()),
            _ => Err(ControlError::NotInReview),
        }
    }

    /// Applies the whole batch or nothing; on success the session closes.
    pub fn review_submit(
        &self,
        edits: &[EditRequest],
        journal: &[u64],
    ) -> Result<(), ControlError> {
        let mut inner = self.lock();
        let State::Review { session, .. } = &mut inner.state else {
            return Err(ControlError::NotInReview);
        };
        let at = now_ms();
        let edits = edits
            .iter()
            .map(|e| ReviewEdit {
                frame_index: e.frame_index,
                corrected_mes: e.corrected_mes,
                keep_in_journal: e.keep_in_journal,
                edited_at_ms: at,
            })
            .collect();
        session.submit_review(edits, journal.to_vec())?;
        inner.state = State::Idle;
        self.bus.publish(&Event::Lifecycle {
            state: LifecycleState::Idle,
            session_id: None,
        });
        Ok(())
    }

    pub fn last_run_stats(&self) -> Option<RunStats> {
        self.lock().last_stats.clone()
    }
}

impl Drop for Controller {
    fn drop(&mut self) {
        if let Ok(inner) = self.inner.get_mut() {
            if let State::Running { run, .. } = std::mem::replace(&mut inner.state, State::Idle) {
                let _ = run.stop();
            }
        }
    }
}
