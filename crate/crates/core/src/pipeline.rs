//! The per-frame chain (prefilter, inference, gate, smoother, selection) and
//! the threaded session runner that feeds it from a [`FrameSource`].

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ConfigError, DiscardReason, Frame, FrameVerdict, PipelineConfig, ScoredFrame};
use crate::events::{Event, EventBus, LifecycleState, VerdictEvent};
use crate::inference::LogitProvider;
use crate::osr::{gate_and_classify, CalibrationModel};
use crate::prefilter::prefilter;
use crate::selection::{persist_selection, SelectedFrame, SelectionEntry, SelectionState};
use crate::session::{Session, SessionError, SessionRecord};
use crate::source::FrameSource;
use crate::temporal::{finalize_video_score, ScoreError, SmoothedPoint, Smoother, VideoScore};

pub const QUEUE_CAPACITY: usize = 2;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Result of pushing one frame through the chain.
#[derive(Debug, Clone)]
pub struct Processed {
    pub verdict: FrameVerdict,
    pub smoothed: Option<SmoothedPoint>,
}

pub struct FrameProcessor {
    config: PipelineConfig,
    calibration: CalibrationModel,
    provider: Box<dyn LogitProvider>,
    smoother: Smoother,
    selection: SelectionState,
    smoothed: Vec<SmoothedPoint>,
}

impl FrameProcessor {
    pub fn new(
        config: PipelineConfig,
        provider: Box<dyn LogitProvider>,
    ) -> Result<Self, ConfigError> {
        let config = config.validated()?;
        let calibration = CalibrationModel::new(config.temperature)
            .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        Ok(Self {
            smoother: Smoother::new(config.window),
            selection: SelectionState::new(config.k, config.min_gap),
            calibration,
            provider,
            smoothed: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn model_name(&self) -> String {
        self.provider.descriptor().name
    }

    pub fn process(&mut self, frame: &Frame) -> Processed {
        let (idx, ts) = (frame.index(), frame.timestamp_ms());
        let checked = prefilter(frame, &self.config);
        if let Some(fail) = checked.fail_reason {
            return Processed {
                verdict: FrameVerdict::discarded(idx, ts, fail.into()),
                smoothed: None,
            };
        }
        let logits = match self.provider.infer(frame) {
            Ok(l) => l,
            Err(e) => {
                log::warn!("frame {idx}: inference failed: {e}");
                return Processed {
                    verdict: FrameVerdict::discarded(idx, ts, DiscardReason::InferenceUnavailable),
                    smoothed: None,
                };
            }
        };
        let gate = gate_and_classify(&logits, &self.calibration, self.config.osr_tau);
        let Some(c) = gate.classification else {
            return Processed {
                verdict: FrameVerdict::discarded(idx, ts, DiscardReason::BelowOsrThreshold)
                    .with_logits(logits),
                smoothed: None,
            };
        };
        let scored = ScoredFrame::new(c.mes, c.probs, gate.max_logit, c.certainty)
            .expect("certainty is the max probability");
        let point = self.smoother.push_scored(c.probs, idx);
        self.smoothed.push(point);
        self.selection
            .offer(SelectionEntry::new(frame.clone(), &scored));
        Processed {
            verdict: FrameVerdict::scored(idx, ts, scored).with_logits(logits),
            smoothed: Some(point),
        }
    }

    pub fn smoothed(&self) -> &[SmoothedPoint] {
        &self.smoothed
    }

    pub fn selection(&self) -> &SelectionState {
        &self.selection
    }

    pub fn video_score(&self) -> Result<VideoScore, ScoreError> {
        finalize_video_score(&self.smoothed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backpressure {
    /// The source waits for the pipeline. Nothing is lost.
    Block,
    /// The oldest queued frame is discarded to admit the newest.
    DropOldest,
}

enum Item {
    Frame(Frame, Instant),
    Dropped {
        index: u64,
        ts: u64,
        ingested: Instant,
    },
}

struct QueueState {
    frames: VecDeque<(Frame, Instant)>,
    /// Markers for frames pushed out of `frames`; always older than any
    /// frame still queued.
    dropped: VecDeque<(u64, u64, Instant)>,
    closed: bool,
}

/// Bounded hand-off between the ingest thread and the processing thread.
struct IngestQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
    capacity: usize,
    policy: Backpressure,
}

impl IngestQueue {
    fn new(capacity: usize, policy: Backpressure) -> Self {
        Self {
            state: Mutex::new(QueueState {
                frames: VecDeque::with_capacity(capacity),
                dropped: VecDeque::new(),
                closed: false,
            }),
            changed: Condvar::new(),
            capacity: capacity.max(1),
            policy,
        }
    }

    /// Returns false once the queue has been closed by the consumer.
    fn push(&self, frame: Frame, ingested: Instant) -> bool {
        let mut st = self.state.lock().expect("queue lock");
        if self.policy == Backpressure::Block {
            while st.frames.len() >= self.capacity && !st.closed {
                st = self.changed.wait(st).expect("queue lock");
            }
        }
        if st.closed {
            return false;
        }
        if st.frames.len() >= self.capacity {
            let (old, t) = st.frames.pop_front().expect("queue is full");
            st.dropped.push_back((old.index(), old.timestamp_ms(), t));
        }
        st.frames.push_back((frame, ingested));
        self.changed.notify_all();
        true
    }

    fn close(&self) {
        self.state.lock().expect("queue lock").closed = true;
        self.changed.notify_all();
    }

    fn pop(&self) -> Option<Item> {
        let mut st = self.state.lock().expect("queue lock");
        loop {
            if let Some((index, ts, ingested)) = st.dropped.pop_front() {
                return Some(Item::Dropped {
                    index,
                    ts,
                    ingested,
                });
            }
            if let Some((f, t)) = st.frames.pop_front() {
                self.changed.notify_all();
                return Some(Item::Frame(f, t));
            }
            if st.closed {
                return None;
            }
            st = self.changed.wait(st).expect("queue lock");
        }
    }
}

/// Summary counts plus the per-frame verdict timeline.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub total: u64,
    pub scored: u64,
    pub blur: u64,
    pub colour_ratio: u64,
    pub below_osr_threshold: u64,
    pub inference_unavailable: u64,
    pub dropped: u64,
    pub timeline: Vec<VerdictEvent>,
}

impl VerdictSummary {
    pub fn from_verdicts(verdicts: &[FrameVerdict]) -> Self {
        let mut s = Self {
            total: verdicts.len() as u64,
            ..Self::default()
        };
        for v in verdicts {
            match v.discard_reason() {
                None => s.scored += 1,
                Some(DiscardReason::Blur) => s.blur += 1,
                Some(DiscardReason::ColourRatio) => s.colour_ratio += 1,
                Some(DiscardReason::BelowOsrThreshold) => s.below_osr_threshold += 1,
                Some(DiscardReason::InferenceUnavailable) => s.inference_unavailable += 1,
                Some(DiscardReason::Dropped) => s.dropped += 1,
            }
            s.timeline.push(v.into());
        }
        s
    }
}

/// Everything the review screen needs. Built once when a session ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewBundle {
    pub session_id: u64,
    pub unscorable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_score: Option<VideoScore>,
    /// Chronological.
    pub selection: Vec<SelectedFrame>,
    pub verdicts: VerdictSummary,
}

impl ReviewBundle {
    pub fn from_record(record: &SessionRecord) -> Self {
        let mut selection = record.selection.clone();
        selection.sort_by_key(|s| s.frame_index);
        Self {
            session_id: record.session_id,
            unscorable: record.video_score.is_none(),
            video_score: record.video_score,
            selection,
            verdicts: VerdictSummary::from_verdicts(&record.verdicts),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundles always serialize")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub frames: u64,
    pub dropped: u64,
    /// Ingest to event emission, one per frame in order.
    pub latencies: Vec<Duration>,
    pub elapsed: Duration,
}

impl RunStats {
    pub fn fps(&self) -> f64 {
        self.frames as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    /// Nearest-rank percentile, `p` in (0, 100].
    pub fn latency_percentile(&self, p: f64) -> Option<Duration> {
        if self.latencies.is_empty() {
            return None;
        }
        let mut sorted = self.latencies.clone();
        sorted.sort();
        let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
        Some(sorted[rank.clamp(1, sorted.len()) - 1])
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("writing selected frames: {0}")]
    Io(#[from] std::io::Error),
    #[error("pipeline thread panicked")]
    Panicked,
}

pub struct RunOutcome {
    pub session: Session,
    pub bundle: ReviewBundle,
    pub stats: RunStats,
}

pub struct RunHandle {
    stop: Arc<AtomicBool>,
    join: JoinHandle<Result<RunOutcome, RunError>>,
}

impl RunHandle {
    /// Asks the source to stop; frames already ingested are still processed.
    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }

    pub fn join(self) -> Result<RunOutcome, RunError> {
        self.join.join().map_err(|_| RunError::Panicked)?
    }

    pub fn stop(self) -> Result<RunOutcome, RunError> {
        self.request_stop();
        self.join()
    }
}

pub struct RunOptions {
    /// Pace the source at its frame rate.
    pub live: bool,
    pub backpressure: Backpressure,
    pub queue_capacity: usize,
}

impl RunOptions {
    /// Live sources drop oldest-first; offline sources are read losslessly.
    pub fn for_source(live: bool) -> Self {
        Self {
            live,
            backpressure: if live {
                Backpressure::DropOldest
            } else {
                Backpressure::Block
            },
            queue_capacity: QUEUE_CAPACITY,
        }
    }
}

fn ingest(mut source: Box<dyn FrameSource>, queue: &IngestQueue, stop: &AtomicBool, live: bool) {
    let start = Instant::now();
    let interval = Duration::from_secs_f64(1.0 / source.fps().max(1) as f64);
    let mut n: u32 = 0;
    while !stop.load(Ordering::SeqCst) {
        if live {
            let due = start + interval * n;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
        match source.next_frame() {
            Ok(Some(frame)) => {
                if !queue.push(frame, Instant::now()) {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                log::error!("source {}: {e}; ending stream", source.describe());
                break;
            }
        }
        n = n.wrapping_add(1);
    }
    queue.close();
}

/// Starts ingest and processing threads for an open session. The
/// processing thread is the only writer of the session log.
pub fn spawn_run(
    source: Box<dyn FrameSource>,
    mut processor: FrameProcessor,
    mut session: Session,
    bus: Arc<EventBus>,
    options: RunOptions,
) -> RunHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let queue = Arc::new(IngestQueue::new(
        options.queue_capacity,
        options.backpressure,
    ));
    let join = {
        let stop = stop.clone();
        thread::Builder::new()
            .name("hector-pipeline".into())
            .spawn(move || {
                let started = Instant::now();
                let ingest_thread = {
                    let (queue, stop) = (queue.clone(), stop.clone());
                    thread::Builder::new()
                        .name("hector-ingest".into())
                        .spawn(move || ingest(source, &queue, &stop, options.live))
                        .expect("spawn ingest thread")
                };
                let result = process_all(&queue, &mut processor, &mut session, &bus);
                if result.is_err() {
                    stop.store(true, Ordering::SeqCst);
                    queue.close();
                }
                let _ = ingest_thread.join();
                let mut stats = result?;
                stats.elapsed = started.elapsed();
                let bundle = finish(&processor, &mut session)?;
                bus.publish(&Event::Lifecycle {
                    state: LifecycleState::Review,
                    session_id: Some(session.id()),
                });
                Ok(RunOutcome {
                    session,
                    bundle,
                    stats,
                })
            })
            .expect("spawn pipeline thread")
    };
    RunHandle { stop, join }
}

fn process_all(
    queue: &IngestQueue,
    processor: &mut FrameProcessor,
    session: &mut Session,
    bus: &EventBus,
) -> Result<RunStats, RunError> {
    let mut stats = RunStats::default();
    while let Some(item) = queue.pop() {
        let (processed, ingested) = match item {
            Item::Frame(frame, t) => (processor.process(&frame), t),
            Item::Dropped {
                index,
                ts,
                ingested,
            } => {
                stats.dropped += 1;
                let verdict = FrameVerdict::discarded(index, ts, DiscardReason::Dropped);
                (
                    Processed {
                        verdict,
                        smoothed: None,
                    },
                    ingested,
                )
            }
        };
        session.append_verdict(processed.verdict)?;
        if let Some(p) = processed.smoothed {
            session.append_smoothed(p)?;
        }
        bus.publish(&Event::Verdict((&processed.verdict).into()));
        stats.latencies.push(ingested.elapsed());
        stats.frames += 1;
    }
    Ok(stats)
}

fn finish(processor: &FrameProcessor, session: &mut Session) -> Result<ReviewBundle, RunError> {
    let video_score = processor.video_score().ok();
    let chosen = processor.selection().final_selection();
    let selected = persist_selection(session.id(), &chosen, session.dir())?;
    session.end(video_score, selected, now_ms())?;
    Ok(ReviewBundle::from_record(session.record()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LogitVector, MesScore};
    use crate::inference::{InferenceError, ProviderDescriptor, StubModel, StubModelSpec};

    struct Fixed(Option<[f64; 4]>);

    impl LogitProvider for Fixed {
        fn descriptor(&self) -> ProviderDescriptor {
            ProviderDescriptor {
                name: "fixed".into(),
                input_size: None,
            }
        }

        fn infer(&mut self, frame: &Frame) -> Result<LogitVector, InferenceError> {
            self.0
                .map(|l| LogitVector::new(l).unwrap())
                .ok_or(InferenceError::Missing(frame.index()))
        }
    }

    fn sharp_red(index: u64) -> Frame {
        let (w, h) = (16u32, 16u32);
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 200 } else { 120 };
                px.extend_from_slice(&[v, v / 3, v / 4]);
            }
        }
        Frame::new(index, index * 33, w, h, px).unwrap()
    }

    #[test]
    fn chain_outcomes() {
        let cfg = PipelineConfig::default();
        let mut p =
            FrameProcessor::new(cfg.clone(), Box::new(Fixed(Some([0.0, 0.0, 5.0, 1.0])))).unwrap();
        let out = p.process(&sharp_red(0));
        assert_eq!(
            out.verdict.scored_frame().unwrap().mes(),
            MesScore::new(2).unwrap()
        );
        assert!(out.verdict.logits.is_some());
        assert_eq!(out.smoothed.unwrap().window_fill, 1);

        let blurred = Frame::solid(1, 16, 16, [200, 60, 50]).unwrap();
        let out = p.process(&blurred);
        assert_eq!(out.verdict.discard_reason(), Some(DiscardReason::Blur));
        assert!(out.verdict.logits.is_none());

        let mut low =
            FrameProcessor::new(cfg.clone(), Box::new(Fixed(Some([1.0, 0.0, 0.0, 0.0])))).unwrap();
        let out = low.process(&sharp_red(2));
        assert_eq!(
            out.verdict.discard_reason(),
            Some(DiscardReason::BelowOsrThreshold)
        );
        assert!(low.video_score().is_err());

        let mut broken = FrameProcessor::new(cfg, Box::new(Fixed(None))).unwrap();
        let out = broken.process(&sharp_red(3));
        assert_eq!(
            out.verdict.discard_reason(),
            Some(DiscardReason::InferenceUnavailable)
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = PipelineConfig {
            window: 0,
            ..PipelineConfig::default()
        };
        let stub = Box::new(StubModel::new(StubModelSpec::new(1)));
        assert!(FrameProcessor::new(cfg, stub).is_err());
    }

    #[test]
    fn drop_oldest_queue_keeps_newest_and_marks_drops() {
        let q = IngestQueue::new(2, Backpressure::DropOldest);
        let t = Instant::now();
        for i in 0..5 {
            assert!(q.push(Frame::solid(i, 1, 1, [0, 0, 0]).unwrap(), t));
        }
        q.close();
        let mut order = Vec::new();
        while let Some(item) = q.pop() {
            order.push(match item {
                Item::Frame(f, _) => (f.index(), false),
                Item::Dropped { index, .. } => (index, true),
            });
        }
        assert_eq!(
            order,
            vec![(0, true), (1, true), (2, true), (3, false), (4, false)]
        );
    }

    #[test]
    fn closed_queue_rejects_pushes() {
        let q = IngestQueue::new(2, Backpressure::Block);
        q.close();
        assert!(!q.push(Frame::solid(0, 1, 1, [0, 0, 0]).unwrap(), Instant::now()));
        assert!(q.pop().is_none());
    }

    #[test]
    fn percentiles() {
        let stats = RunStats {
            frames: 100,
            dropped: 0,
            latencies: (1..=100).map(Duration::from_millis).collect(),
            elapsed: Duration::from_secs(2),
        };
        assert_eq!(
            stats.latency_percentile(99.0),
            Some(Duration::from_millis(99))
        );
        assert_eq!(
            stats.latency_percentile(100.0),
            Some(Duration::from_millis(100))
        );
        assert_eq!(stats.fps(), 50.0);
        assert_eq!(RunStats::default().latency_percentile(50.0), None);
    }
}
