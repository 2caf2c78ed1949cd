//! Online retention of the k most relevant scored frames.
//!
//! Relevance is lexicographic: MES first, then certainty, then the earlier
//! frame. Retained frames must be at least `min_gap` frame indices apart; a
//! candidate that conflicts with a higher-ranked retained frame is rejected,
//! otherwise it evicts every frame it conflicts with.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Frame, MesScore, ProbVector, ScoredFrame};

#[derive(Debug, Clone)]
pub struct SelectionEntry {
    pub frame_index: u64,
    pub mes: MesScore,
    pub certainty: f64,
    pub probs: ProbVector,
    pub frame: Frame,
}

impl SelectionEntry {
    pub fn new(frame: Frame, scored: &ScoredFrame) -> Self {
        Self {
            frame_index: frame.index(),
            mes: scored.mes(),
            certainty: scored.certainty(),
            probs: *scored.probs(),
            frame,
        }
    }

    pub fn rank(&self) -> RankKey {
        RankKey {
            mes: self.mes,
            certainty: self.certainty,
            frame_index: self.frame_index,
        }
    }
}

/// Totally ordered relevance key; `a > b` means `a` outranks `b`.
#[derive(Debug, Clone, Copy)]
pub struct RankKey {
    pub mes: MesScore,
    pub certainty: f64,
    pub frame_index: u64,
}

impl Ord for RankKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.mes
            .cmp(&other.mes)
            .then_with(|| self.certainty.total_cmp(&other.certainty))
            .then_with(|| other.frame_index.cmp(&self.frame_index))
    }
}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for RankKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for RankKey {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OfferOutcome {
    /// Candidate kept; lists every frame index removed to make room.
    Accepted { evicted: Vec<u64> },
    /// A conflicting retained frame outranks the candidate.
    RejectedByConflict { blocker: u64 },
    /// Capacity reached and every retained frame outranks the candidate.
    RejectedByCapacity,
}

#[derive(Debug, Clone)]
pub struct SelectionState {
    k: usize,
    min_gap: u64,
    entries: Vec<SelectionEntry>,
}

impl SelectionState {
    pub fn new(k: u32, min_gap: u64) -> Self {
        assert!(k >= 1, "k must be >= 1");
        Self {
            k: k as usize,
            min_gap,
            entries: Vec::with_capacity(k as usize + 1),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn min_gap(&self) -> u64 {
        self.min_gap
    }

    /// Retained entries, highest rank first.
    pub fn entries(&self) -> &[SelectionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn conflicts(&self, a: u64, b: u64) -> bool {
        a.abs_diff(b) < self.min_gap
    }

    pub fn offer(&mut self, candidate: SelectionEntry) -> OfferOutcome {
        let rank = candidate.rank();
        let idx = candidate.frame_index;
        if let Some(blocker) = self
            .entries
            .iter()
            .find(|e| self.conflicts(e.frame_index, idx) && e.rank() > rank)
        {
            return OfferOutcome::RejectedByConflict {
                blocker: blocker.frame_index,
            };
        }
        let mut evicted = Vec::new();
        let min_gap = self.min_gap;
        self.entries.retain(|e| {
            let keep = e.frame_index.abs_diff(idx) >= min_gap;
            if !keep {
                evicted.push(e.frame_index);
            }
            keep
        });
        let pos = self.entries.partition_point(|e| e.rank() > rank);
        self.entries.insert(pos, candidate);
        if self.entries.len() > self.k {
            let dropped = self.entries.pop().expect("over capacity");
            if dropped.frame_index == idx {
                debug_assert!(evicted.is_empty());
                return OfferOutcome::RejectedByCapacity;
            }
            evicted.push(dropped.frame_index);
        }
        OfferOutcome::Accepted { evicted }
    }

    /// Surviving entries in chronological order.
    pub fn final_selection(&self) -> Vec<SelectionEntry> {
        let mut out = self.entries.clone();
        out.sort_by_key(|e| e.frame_index);
        out
    }
}

/// Persisted description of a selected frame; the image lives in a PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFrame {
    pub frame_index: u64,
    pub mes: MesScore,
    pub certainty: f64,
    pub probs: ProbVector,
    pub image_path: PathBuf,
}

pub fn png_file_name(session_id: u64, frame_index: u64, mes: MesScore) -> String {
    format!("sess{session_id}_frame{frame_index}_mes{mes}.png")
}

/// Writes each entry as a PNG into the session's frame directory under
/// `sessions_dir`. The returned image paths are relative to `sessions_dir`.
pub fn persist_selection(
    session_id: u64,
    entries: &[SelectionEntry],
    sessions_dir: &Path,
) -> std::io::Result<Vec<SelectedFrame>> {
    let rel_dir = PathBuf::from(format!("sess{session_id}_frames"));
    std::fs::create_dir_all(sessions_dir.join(&rel_dir))?;
    entries
        .iter()
        .map(|e| {
            let rel = rel_dir.join(png_file_name(session_id, e.frame_index, e.mes));
            crate::imageio::write_png(&sessions_dir.join(&rel), &e.frame)?;
            Ok(SelectedFrame {
                frame_index: e.frame_index,
                mes: e.mes,
                certainty: e.certainty,
                probs: e.probs,
                image_path: rel,
            })
        })
        .collect()
}
