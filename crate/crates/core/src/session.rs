//! Per-session persistence and retraining export.
//!
//! A session file is a sequence of records, each a little-endian `u32` byte
//! length followed by that many bytes of single-line JSON carrying a `type`
//! field. Records are only ever appended, so a file cut at any record
//! boundary is a valid prefix of the session; a torn final record is ignored
//! on load.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FrameVerdict, MesScore, PipelineConfig, NUM_CLASSES};
use crate::selection::SelectedFrame;
use crate::temporal::{SmoothedPoint, VideoScore};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session io: {0}")]
    Io(#[from] io::Error),
    #[error("session record encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("session {0} is closed")]
    SessionClosed(u64),
    #[error("session {0} is still open")]
    SessionStillOpen(u64),
    #[error("frame index {got} does not follow {last}")]
    NonMonotonicIndex { last: u64, got: u64 },
    #[error("frame {0} is not in the selection")]
    UnknownFrame(u64),
    #[error("label list is empty")]
    EmptyLabelList,
    #[error("session {0} in export batch is still open")]
    OpenSessionInBatch(u64),
    #[error("session log has no start record")]
    MissingMeta,
    #[error("inconsistent session log: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewEdit {
    pub frame_index: u64,
    pub corrected_mes: MesScore,
    pub keep_in_journal: bool,
    pub edited_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum MetaRecord {
    Start {
        session_id: u64,
        started_at_ms: u64,
        config: PipelineConfig,
        source: String,
        model: String,
    },
    End {
        ended_at_ms: u64,
    },
    /// Frames the clinician picked for the journal without correcting them.
    Journal {
        frames: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEntry {
    Meta(MetaRecord),
    Verdict(FrameVerdict),
    Smoothed(SmoothedPoint),
    Videoscore(VideoScore),
    Selection(SelectedFrame),
    Edit(ReviewEdit),
}

/// In-memory view of a session, rebuilt by applying log entries in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: u64,
    pub started_at_ms: u64,
    pub ended_at_ms: Option<u64>,
    pub config: PipelineConfig,
    pub source: String,
    pub model: String,
    pub verdicts: Vec<FrameVerdict>,
    pub smoothed: Vec<SmoothedPoint>,
    pub video_score: Option<VideoScore>,
    pub selection: Vec<SelectedFrame>,
    pub journal: Vec<u64>,
    /// Every edit in the order it was made.
    pub edit_history: Vec<ReviewEdit>,
}

impl SessionRecord {
    pub fn is_closed(&self) -> bool {
        self.ended_at_ms.is_some()
    }

    /// Effective edits: the latest per frame, ordered by frame index.
    pub fn edits(&self) -> Vec<&ReviewEdit> {
        let mut latest: BTreeMap<u64, &ReviewEdit> = BTreeMap::new();
        for e in &self.edit_history {
            latest.insert(e.frame_index, e);
        }
        latest.into_values().collect()
    }

    /// Edits superseded by a later edit of the same frame.
    pub fn audit(&self) -> Vec<&ReviewEdit> {
        self.edit_history
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                self.edit_history[i + 1..]
                    .iter()
                    .any(|later| later.frame_index == e.frame_index)
            })
            .map(|(_, e)| e)
            .collect()
    }

    pub fn effective_edit(&self, frame_index: u64) -> Option<&ReviewEdit> {
        self.edit_history
            .iter()
            .rev()
            .find(|e| e.frame_index == frame_index)
    }

    pub fn has_scored_verdict(&self) -> bool {
        self.verdicts.iter().any(FrameVerdict::is_scored)
    }

    fn from_start(meta: &MetaRecord) -> Result<Self, SessionError> {
        match meta {
            MetaRecord::Start {
                session_id,
                started_at_ms,
                config,
                source,
                model,
            } => Ok(Self {
                session_id: *session_id,
                started_at_ms: *started_at_ms,
                ended_at_ms: None,
                config: config.clone(),
                source: source.clone(),
                model: model.clone(),
                verdicts: Vec::new(),
                smoothed: Vec::new(),
                video_score: None,
                selection: Vec::new(),
                journal: Vec::new(),
                edit_history: Vec::new(),
            }),
            _ => Err(SessionError::MissingMeta),
        }
    }

    fn check_verdict(&self, v: &FrameVerdict) -> Result<(), SessionError> {
        if self.is_closed() {
            return Err(SessionError::SessionClosed(self.session_id));
        }
        if let Some(last) = self.verdicts.last() {
            if v.frame_index <= last.frame_index {
                return Err(SessionError::NonMonotonicIndex {
                    last: last.frame_index,
                    got: v.frame_index,
                });
            }
        }
        Ok(())
    }

    fn check_edit(&self, e: &ReviewEdit) -> Result<(), SessionError> {
        if !self.is_closed() {
            return Err(SessionError::SessionStillOpen(self.session_id));
        }
        self.check_selected(e.frame_index)
    }

    fn check_selected(&self, frame_index: u64) -> Result<(), SessionError> {
        if self.selection.iter().any(|s| s.frame_index == frame_index) {
            Ok(())
        } else {
            Err(SessionError::UnknownFrame(frame_index))
        }
    }

    /// Checks that `entry` may follow the current state, without applying it.
    pub fn check(&self, entry: &SessionEntry) -> Result<(), SessionError> {
        let open_only = || {
            if self.is_closed() {
                Err(SessionError::SessionClosed(self.session_id))
            } else {
                Ok(())
            }
        };
        match entry {
            SessionEntry::Meta(MetaRecord::Start { .. }) => {
                Err(SessionError::Corrupt("second start record".into()))
            }
            SessionEntry::Meta(MetaRecord::End { .. }) => {
                open_only()?;
                if self.has_scored_verdict() != self.video_score.is_some() {
                    return Err(SessionError::Corrupt(
                        "video score must be present iff a frame was scored".into(),
                    ));
                }
                Ok(())
            }
            SessionEntry::Meta(MetaRecord::Journal { frames }) => {
                if !self.is_closed() {
                    return Err(SessionError::SessionStillOpen(self.session_id));
                }
                frames.iter().try_for_each(|&f| self.check_selected(f))
            }
            SessionEntry::Verdict(v) => self.check_verdict(v),
            SessionEntry::Smoothed(p) => {
                open_only()?;
                match self.smoothed.last() {
                    Some(last) if p.frame_index <= last.frame_index => {
                        Err(SessionError::NonMonotonicIndex {
                            last: last.frame_index,
                            got: p.frame_index,
                        })
                    }
                    _ => Ok(()),
                }
            }
            SessionEntry::Videoscore(_) | SessionEntry::Selection(_) => open_only(),
            SessionEntry::Edit(e) => self.check_edit(e),
        }
    }

    /// Validates and applies one log entry.
    pub fn apply(&mut self, entry: &SessionEntry) -> Result<(), SessionError> {
        self.check(entry)?;
        match entry {
            SessionEntry::Meta(MetaRecord::Start { .. }) => unreachable!("rejected by check"),
            SessionEntry::Meta(MetaRecord::End { ended_at_ms }) => {
                self.ended_at_ms = Some(*ended_at_ms)
            }
            SessionEntry::Meta(MetaRecord::Journal { frames }) => self.journal = frames.clone(),
            SessionEntry::Verdict(v) => self.verdicts.push(*v),
            SessionEntry::Smoothed(p) => self.smoothed.push(*p),
            SessionEntry::Videoscore(s) => self.video_score = Some(*s),
            SessionEntry::Selection(s) => self.selection.push(s.clone()),
            SessionEntry::Edit(e) => self.edit_history.push(e.clone()),
        }
        Ok(())
    }

    /// Builds a record from a complete entry sequence.
    pub fn from_entries(entries: &[SessionEntry]) -> Result<Self, SessionError> {
        let (first, rest) = entries.split_first().ok_or(SessionError::MissingMeta)?;
        let SessionEntry::Meta(meta) = first else {
            return Err(SessionError::MissingMeta);
        };
        let mut record = Self::from_start(meta)?;
        for e in rest {
            record.apply(e)?;
        }
        Ok(record)
    }

    /// Canonical entry sequence that rebuilds this record.
    pub fn to_entries(&self) -> Vec<SessionEntry> {
        let mut out = vec![SessionEntry::Meta(MetaRecord::Start {
            session_id: self.session_id,
            started_at_ms: self.started_at_ms,
            config: self.config.clone(),
            source: self.source.clone(),
            model: self.model.clone(),
        })];
        out.extend(self.verdicts.iter().copied().map(SessionEntry::Verdict));
        out.extend(self.smoothed.iter().copied().map(SessionEntry::Smoothed));
        out.extend(self.video_score.map(SessionEntry::Videoscore));
        out.extend(self.selection.iter().cloned().map(SessionEntry::Selection));
        if let Some(ended_at_ms) = self.ended_at_ms {
            out.push(SessionEntry::Meta(MetaRecord::End { ended_at_ms }));
            out.extend(self.edit_history.iter().cloned().map(SessionEntry::Edit));
            if !self.journal.is_empty() {
                out.push(SessionEntry::Meta(MetaRecord::Journal {
                    frames: self.journal.clone(),
                }));
            }
        }
        out
    }

    /// Writes the canonical log for this record to `path`, replacing it.
    pub fn write_to(&self, path: &Path) -> Result<(), SessionError> {
        let mut file = File::create(path)?;
        for e in self.to_entries() {
            file.write_all(&encode_entry(&e)?)?;
        }
        file.sync_data()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, LoadReport), SessionError> {
        let (entries, report) = read_entries(path)?;
        Ok((Self::from_entries(&entries)?, report))
    }
}

pub fn encode_entry(entry: &SessionEntry) -> Result<Vec<u8>, SessionError> {
    let json = serde_json::to_vec(entry)?;
    let len = u32::try_from(json.len())
        .map_err(|_| SessionError::Corrupt("record exceeds u32 length".into()))?;
    let mut buf = Vec::with_capacity(4 + json.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub records: usize,
    /// Bytes after the last complete record (a torn write).
    pub torn_tail_bytes: usize,
}

/// Reads every complete record; a truncated trailing record is reported, not
/// an error.
pub fn read_entries(path: &Path) -> Result<(Vec<SessionEntry>, LoadReport), SessionError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_entries(&bytes)
}

pub fn decode_entries(bytes: &[u8]) -> Result<(Vec<SessionEntry>, LoadReport), SessionError> {
    let mut entries = Vec::new();
    let mut pos = 0;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + len) else {
            break;
        };
        entries.push(serde_json::from_slice(body)?);
        pos += 4 + len;
    }
    let report = LoadReport {
        records: entries.len(),
        torn_tail_bytes: bytes.len() - pos,
    };
    Ok((entries, report))
}

pub fn session_log_path(dir: &Path, session_id: u64) -> PathBuf {
    dir.join(format!("sess{session_id}.log"))
}

pub fn session_frames_dir(dir: &Path, session_id: u64) -> PathBuf {
    dir.join(format!("sess{session_id}_frames"))
}

/// Next unused session id in `dir` (1 for an empty directory).
pub fn next_session_id(dir: &Path) -> io::Result<u64> {
    Ok(list_session_logs(dir)?
        .into_iter()
        .map(|(id, _)| id)
        .max()
        .map_or(1, |m| m + 1))
}

/// `(session_id, path)` of every session log in `dir`, ordered by id.
pub fn list_session_logs(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name
            .strip_prefix("sess")
            .and_then(|r| r.strip_suffix(".log"))
            .and_then(|n| n.parse::<u64>().ok())
        {
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

/// A session bound to its append-only log file. The single writer for that
/// file.
pub struct Session {
    record: SessionRecord,
    dir: PathBuf,
    file: File,
}

impl Session {
    pub fn create(
        dir: &Path,
        session_id: u64,
        started_at_ms: u64,
        config: PipelineConfig,
        source: String,
        model: String,
    ) -> Result<Self, SessionError> {
        std::fs::create_dir_all(dir)?;
        let path = session_log_path(dir, session_id);
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)?;
        let start = MetaRecord::Start {
            session_id,
            started_at_ms,
            config,
            source,
            model,
        };
        let record = SessionRecord::from_start(&start)?;
        let mut session = Self {
            record,
            dir: dir.to_path_buf(),
            file,
        };
        session.write(&SessionEntry::Meta(start))?;
        Ok(session)
    }

    /// Re-opens an existing log, e.g. to review a closed session.
    pub fn open(dir: &Path, session_id: u64) -> Result<Self, SessionError> {
        let path = session_log_path(dir, session_id);
        let (record, _) = SessionRecord::load(&path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Self {
            record,
            dir: dir.to_path_buf(),
            file,
        })
    }

    pub fn record(&self) -> &SessionRecord {
        &self.record
    }

    pub fn id(&self) -> u64 {
        self.record.session_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn frames_dir(&self) -> PathBuf {
        session_frames_dir(&self.dir, self.id())
    }

    fn write(&mut self, entry: &SessionEntry) -> Result<(), SessionError> {
        self.file.write_all(&encode_entry(entry)?)?;
        self.file.flush()?;
        Ok(())
    }

    /// Validate, write ahead, then apply in memory.
    fn commit(&mut self, entry: SessionEntry) -> Result<(), SessionError> {
        self.record.check(&entry)?;
        self.write(&entry)?;
        self.record.apply(&entry)
    }

    pub fn append_verdict(&mut self, verdict: FrameVerdict) -> Result<(), SessionError> {
        self.commit(SessionEntry::Verdict(verdict))
    }

    pub fn append_smoothed(&mut self, point: SmoothedPoint) -> Result<(), SessionError> {
        self.commit(SessionEntry::Smoothed(point))
    }

    /// Writes the score and selection, then closes the session.
    pub fn end(
        &mut self,
        video_score: Option<VideoScore>,
        selection: Vec<SelectedFrame>,
        ended_at_ms: u64,
    ) -> Result<(), SessionError> {
        if self.record.is_closed() {
            return Err(SessionError::SessionClosed(self.id()));
        }
        if let Some(s) = video_score {
            self.commit(SessionEntry::Videoscore(s))?;
        }
        for s in selection {
            self.commit(SessionEntry::Selection(s))?;
        }
        self.commit(SessionEntry::Meta(MetaRecord::End { ended_at_ms }))?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn apply_edit(&mut self, edit: ReviewEdit) -> Result<(), SessionError> {
        self.commit(SessionEntry::Edit(edit))?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Applies a whole review: every edit and journal pick is checked before
    /// anything is written, so an invalid batch leaves the session untouched.
    pub fn submit_review(
        &mut self,
        edits: Vec<ReviewEdit>,
        journal: Vec<u64>,
    ) -> Result<(), SessionError> {
        if !self.record.is_closed() {
            return Err(SessionError::SessionStillOpen(self.id()));
        }
        for e in &edits {
            self.record.check_edit(e)?;
        }
        for &f in &journal {
            self.record.check_selected(f)?;
        }
        for e in edits {
            self.commit(SessionEntry::Edit(e))?;
        }
        if !journal.is_empty() {
            self.commit(SessionEntry::Meta(MetaRecord::Journal { frames: journal }))?;
        }
        self.file.sync_data()?;
        Ok(())
    }
}

/// Modal label; ties resolve to the most severe tied class.
pub fn majority_vote(labels: &[MesScore]) -> Result<MesScore, SessionError> {
    if labels.is_empty() {
        return Err(SessionError::EmptyLabelList);
    }
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.as_index()] += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] >= counts[best] {
            best = c;
        }
    }
    Ok(MesScore::ALL[best])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    ModelAccepted,
    ClinicianCorrected,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ModelAccepted => "model_accepted",
            Self::ClinicianCorrected => "clinician_corrected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    /// Path relative to the export directory.
    pub image_path: PathBuf,
    pub label: MesScore,
    pub source: LabelSource,
    pub session_id: u64,
    pub frame_index: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 5] =
    ["image_path", "label", "source", "session_id", "frame_index"];

/// Exports every selected frame of closed sessions as a labeled example.
///
/// `sessions` pairs each record with the directory its log lives in, which
/// is where its relative image paths resolve. Images are copied into
/// `out_dir/images/`; rows are ordered by `(session_id, frame_index)`.
pub fn export_dataset(
    sessions: &[(SessionRecord, PathBuf)],
    out_dir: &Path,
) -> Result<Vec<LabeledExample>, SessionError> {
    if let Some((open, _)) = sessions.iter().find(|(s, _)| !s.is_closed()) {
        return Err(SessionError::OpenSessionInBatch(open.session_id));
    }
    let mut ordered: Vec<&(SessionRecord, PathBuf)> = sessions.iter().collect();
    ordered.sort_by_key(|(s, _)| s.session_id);

    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut examples = Vec::new();
    for (record, base) in ordered {
        let mut selection: Vec<&SelectedFrame> = record.selection.iter().collect();
        selection.sort_by_key(|s| s.frame_index);
        for sel in selection {
            let (label, source) = match record.effective_edit(sel.frame_index) {
                Some(e) => (e.corrected_mes, LabelSource::ClinicianCorrected),
                None => (sel.mes, LabelSource::ModelAccepted),
            };
            let file_name = sel
                .image_path
                .file_name()
                .ok_or_else(|| SessionError::Corrupt("selection without image name".into()))?;
            std::fs::copy(base.join(&sel.image_path), images.join(file_name))?;
            examples.push(LabeledExample {
                image_path: Path::new("images").join(file_name),
                label,
                source,
                session_id: record.session_id,
                frame_index: sel.frame_index,
            });
        }
    }

    let mut w = csv::Writer::from_path(out_dir.join(MANIFEST_FILE))?;
    w.write_record(MANIFEST_HEADER)?;
    for ex in &examples {
        w.write_record([
            ex.image_path.to_string_lossy().replace('\\', "/"),
            ex.label.to_string(),
            ex.source.as_str().to_string(),
            ex.session_id.to_string(),
            ex.frame_index.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(examples)
}

/// Loads every session log in `dir`.
pub fn load_sessions(dir: &Path) -> Result<Vec<(SessionRecord, PathBuf)>, SessionError> {
    list_session_logs(dir)?
        .into_iter()
        .map(|(_, path)| Ok((SessionRecord::load(&path)?.0, dir.to_path_buf())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DiscardReason, ProbVector, ScoredFrame};

    fn mes(v: u8) -> MesScore {
        MesScore::new(v).unwrap()
    }

    fn scored(i: u64, m: u8) -> FrameVerdict {
        let probs = ProbVector::one_hot(mes(m));
        FrameVerdict::scored(
            i,
            i * 40,
            ScoredFrame::new(mes(m), probs, 6.0, 1.0).unwrap(),
        )
    }

    fn new_session(dir: &Path, id: u64) -> Session {
        Session::create(
            dir,
            id,
            1_000,
            PipelineConfig::default(),
            "test".into(),
            "stub:1".into(),
        )
        .unwrap()
    }

    fn selected(i: u64, m: u8) -> SelectedFrame {
        SelectedFrame {
            frame_index: i,
            mes: mes(m),
            certainty: 1.0,
            probs: ProbVector::one_hot(mes(m)),
            image_path: PathBuf::from(format!("sess1_frames/sess1_frame{i}_mes{m}.png")),
        }
    }

    fn closed_session(dir: &Path) -> Session {
        let mut s = new_session(dir, 1);
        for i in 0..3 {
            s.append_verdict(scored(i * 40, 2)).unwrap();
        }
        let score = VideoScore {
            overall_mes: mes(2),
            peak_frame_index: 0,
            peak_probs: ProbVector::one_hot(mes(2)),
        };
        s.end(
            Some(score),
            vec![selected(0, 2), selected(40, 2), selected(80, 2)],
            2_000,
        )
        .unwrap();
        s
    }

    #[test]
    fn append_verdict_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = new_session(dir.path(), 1);
        s.append_verdict(FrameVerdict::discarded(0, 0, DiscardReason::Blur))
            .unwrap();
        assert_eq!(s.record().verdicts.len(), 1);
        s.append_verdict(FrameVerdict::discarded(5, 0, DiscardReason::Blur))
            .unwrap();
        assert!(matches!(
            s.append_verdict(FrameVerdict::discarded(5, 0, DiscardReason::Blur)),
            Err(SessionError::NonMonotonicIndex { last: 5, got: 5 })
        ));
        s.end(None, vec![], 9).unwrap();
        assert!(matches!(
            s.append_verdict(FrameVerdict::discarded(6, 0, DiscardReason::Blur)),
            Err(SessionError::SessionClosed(1))
        ));
    }

    #[test]
    fn end_requires_score_iff_scored() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = new_session(dir.path(), 1);
        s.append_verdict(scored(0, 1)).unwrap();
        assert!(matches!(
            s.end(None, vec![], 1),
            Err(SessionError::Corrupt(_))
        ));
        assert!(!s.record().is_closed());
    }

    #[test]
    fn edits_require_closed_session_and_selected_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut open = new_session(dir.path(), 7);
        let edit = |i, m| ReviewEdit {
            frame_index: i,
            corrected_mes: mes(m),
            keep_in_journal: false,
            edited_at_ms: 5,
        };
        assert!(matches!(
            open.apply_edit(edit(0, 1)),
            Err(SessionError::SessionStillOpen(7))
        ));

        let mut s = closed_session(&dir.path().join("closed"));
        assert!(matches!(
            s.apply_edit(edit(1, 1)),
            Err(SessionError::UnknownFrame(1))
        ));
        s.apply_edit(edit(40, 2)).unwrap();
        s.apply_edit(edit(40, 3)).unwrap();
        let effective = s.record().effective_edit(40).unwrap();
        assert_eq!(effective.corrected_mes, mes(3));
        let audit = s.record().audit();
        assert_eq!(audit.len(), 1);
        assert_eq!(audit[0].corrected_mes, mes(2));
        assert_eq!(s.record().edits().len(), 1);

        // Survives a reload.
        let (back, _) = SessionRecord::load(&session_log_path(s.dir(), 1)).unwrap();
        assert_eq!(&back, s.record());
    }

    #[test]
    fn review_batch_is_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = closed_session(dir.path());
        let before = s.record().clone();
        let batch = vec![
            ReviewEdit {
                frame_index: 0,
                corrected_mes: mes(1),
                keep_in_journal: true,
                edited_at_ms: 1,
            },
            ReviewEdit {
                frame_index: 999,
                corrected_mes: mes(1),
                keep_in_journal: false,
                edited_at_ms: 1,
            },
        ];
        assert!(matches!(
            s.submit_review(batch, vec![]),
            Err(SessionError::UnknownFrame(999))
        ));
        assert_eq!(s.record(), &before);
        let (on_disk, _) = SessionRecord::load(&session_log_path(dir.path(), 1)).unwrap();
        assert_eq!(on_disk, before);

        assert!(matches!(
            s.submit_review(vec![], vec![5]),
            Err(SessionError::UnknownFrame(5))
        ));
        s.submit_review(vec![], vec![0, 80]).unwrap();
        assert_eq!(s.record().journal, vec![0, 80]);
    }

    #[test]
    fn majority_vote_examples() {
        let v = |xs: &[u8]| majority_vote(&xs.iter().map(|&x| mes(x)).collect::<Vec<_>>());
        assert_eq!(v(&[1, 1, 2]).unwrap(), mes(1));
        assert_eq!(v(&[2, 2, 3, 3]).unwrap(), mes(3));
        assert_eq!(v(&[0, 1, 2]).unwrap(), mes(2));
        assert!(matches!(v(&[]), Err(SessionError::EmptyLabelList)));
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let s = closed_session(dir.path());
        let path = session_log_path(dir.path(), s.id());
        let mut bytes = std::fs::read(&path).unwrap();
        let full = decode_entries(&bytes).unwrap().0.len();
        bytes.truncate(bytes.len() - 3);
        let (entries, report) = decode_entries(&bytes).unwrap();
        assert_eq!(entries.len(), full - 1);
        assert!(report.torn_tail_bytes > 0);
    }

    #[test]
    fn next_id_scans_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(next_session_id(dir.path()).unwrap(), 1);
        new_session(dir.path(), 4);
        std::fs::write(dir.path().join("sessX.log"), b"").unwrap();
        assert_eq!(next_session_id(dir.path()).unwrap(), 5);
    }

    #[test]
    fn entry_json_carries_type_field() {
        let e = SessionEntry::Meta(MetaRecord::End { ended_at_ms: 3 });
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"type":"meta","phase":"end","ended_at_ms":3}"#
        );
        let v = SessionEntry::Verdict(scored(2, 1));
        let json = serde_json::to_string(&v).unwrap();
        assert!(
            json.starts_with(r#"{"type":"verdict","frame_index":2"#),
            "{json}"
        );
        assert_eq!(serde_json::from_str::<SessionEntry>(&json).unwrap(), v);
    }
}
