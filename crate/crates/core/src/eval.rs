//! Classification and usability metrics: confusion matrix, accuracy, Cohen's
//! kappa, Mann-Whitney AUROC and the threshold sweep used to pick the gate.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MesScore, NUM_CLASSES};
use crate::session::{load_sessions, SessionError};
use crate::synth::SynthGenerator;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("{}only one class present", .video.as_ref().map(|v| format!("video {v}: ")).unwrap_or_default())]
    SingleClassInput { video: Option<String> },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score is NaN")]
    NanScore,
}

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (MesScore, MesScore)>) -> Self {
        let mut cm = Self::default();
        for (truth, pred) in pairs {
            cm.add(truth, pred);
        }
        cm
    }

    pub fn add(&mut self, truth: MesScore, predicted: MesScore) {
        self.counts[truth.as_index()][predicted.as_index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// `(p_o - p_e) / (1 - p_e)`; a matrix with all mass in one cell is perfect
/// agreement and scores 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    // Scaled by n^2 so everything but the last division stays in integers.
    let n = total as i128;
    let mut chance: i128 = 0;
    for c in 0..NUM_CLASSES {
        let row: u64 = cm.counts[c].iter().sum();
        let col: u64 = (0..NUM_CLASSES).map(|r| cm.counts[r][c]).sum();
        chance += row as i128 * col as i128;
    }
    let denom = n * n - chance;
    if denom == 0 {
        // Only reachable when one cell holds everything, so p_o == 1 too.
        return Ok(1.0);
    }
    Ok((n * cm.trace() as i128 - chance) as f64 / denom as f64)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClassInput { video: None });
    }
    Ok((pos, neg))
}

/// Sorted `(score, positives, negatives)` per distinct score, ascending.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for (s, l) in pairs {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if l {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, l as u64, (!l) as u64)),
        }
    }
    groups
}

/// P(score of a random positive > score of a random negative), ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut neg_below = 0u64;
    let mut wins = 0.0f64;
    for (_, p, n) in tie_groups(scores, labels) {
        wins += p as f64 * neg_below as f64 + 0.5 * p as f64 * n as f64;
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroAuroc {
    pub mean: f64,
    pub per_video: Vec<(String, f64)>,
}

/// Unweighted mean of per-video AUROCs.
pub fn macro_auroc<'a>(
    videos: impl IntoIterator<Item = (&'a str, &'a [f64], &'a [bool])>,
) -> Result<MacroAuroc, EvalError> {
    let mut per_video = Vec::new();
    for (id, scores, labels) in videos {
        let a = auroc(scores, labels).map_err(|e| match e {
            EvalError::SingleClassInput { .. } => EvalError::SingleClassInput {
                video: Some(id.to_string()),
            },
            other => other,
        })?;
        per_video.push((id.to_string(), a));
    }
    if per_video.is_empty() {
        return Err(EvalError::SingleClassInput { video: None });
    }
    let mean = per_video.iter().map(|(_, a)| a).sum::<f64>() / per_video.len() as f64;
    Ok(MacroAuroc { mean, per_video })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Frames with `score >= tau` are called usable.
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// One operating point per distinct score, ascending in tau, closed by the
/// `tau = +inf` point at (0, 0).
pub fn roc_sweep(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, EvalError> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let mut points = Vec::with_capacity(groups.len() + 1);
    let (mut tp, mut fp) = (pos as u64, neg as u64);
    for (s, p, n) in groups {
        points.push(RocPoint {
            tau: s,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
        tp -= p;
        fp -= n;
    }
    points.push(RocPoint {
        tau: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    });
    Ok(points)
}

/// Trapezoidal area under a curve produced by [`roc_sweep`].
pub fn roc_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[0].fpr - w[1].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

pub fn write_roc_csv(points: &[RocPoint], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "tpr", "fpr"])?;
    for p in points {
        w.write_record([p.tau.to_string(), p.tpr.to_string(), p.fpr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_auroc_csv(per_video: &[(String, f64)], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "auroc"])?;
    for (id, a) in per_video {
        w.write_record([id.clone(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Ground truth for one frame of a recorded session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub frame_index: u64,
    pub usable: bool,
    /// Empty for frames that carry no MES (non-usable footage).
    pub mes: Option<MesScore>,
}

/// Per-frame labels stored next to a session as `sess<id>.labels.csv`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelTrack {
    pub rows: Vec<LabelRow>,
}

pub fn label_track_path(sessions_dir: &Path, session_id: u64) -> PathBuf {
    sessions_dir.join(format!("sess{session_id}.labels.csv"))
}

impl LabelTrack {
    pub fn from_generator(generator: &SynthGenerator) -> Self {
        let rows = (0..generator.len())
            .filter_map(|i| generator.truth(i))
            .map(|t| LabelRow {
                frame_index: t.frame_index,
                usable: t.usable,
                mes: t.mes,
            })
            .collect();
        Self { rows }
    }

    pub fn save(&self, path: &Path) -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> csv::Result<Self> {
        let rows = csv::Reader::from_path(path)?
            .deserialize()
            .collect::<csv::Result<Vec<LabelRow>>>()?;
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEval {
    pub session_id: u64,
    pub frames: usize,
    /// `None` when the video holds only one usability class.
    pub auroc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub predicted_mes: Option<MesScore>,
    /// Highest labelled MES among usable frames.
    pub true_mes: Option<MesScore>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub videos: Vec<VideoEval>,
    /// Closed sessions without a label file.
    pub unlabelled: Vec<u64>,
    pub macro_auroc: Option<f64>,
    /// True MES vs predicted MES over scored frames that carry a label.
    pub frame_confusion: ConfusionMatrix,
    /// True vs predicted overall video score.
    pub video_confusion: ConfusionMatrix,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("labels for session {session_id}: {source}")]
    Labels { session_id: u64, source: csv::Error },
    #[error(transparent)]
    Metric(#[from] EvalError),
    #[error("writing report: {0}")]
    Write(#[from] csv::Error),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

/// Scores every closed session in `dir` that has a label file. The usability
/// score of a frame is its raw maximum logit (negative infinity when the
/// prefilter rejected it before inference).
pub fn evaluate_sessions(dir: &Path) -> Result<EvalReport, ReportError> {
    let mut report = EvalReport::default();
    for (record, _) in load_sessions(dir)? {
        if !record.is_closed() {
            continue;
        }
        let id = record.session_id;
        let path = label_track_path(dir, id);
        if !path.exists() {
            report.unlabelled.push(id);
            continue;
        }
        let labels = LabelTrack::load(&path).map_err(|source| ReportError::Labels {
            session_id: id,
            source,
        })?;
        let by_frame: HashMap<u64, &LabelRow> =
            labels.rows.iter().map(|r| (r.frame_index, r)).collect();
        let mut scores = Vec::new();
        let mut usable = Vec::new();
        for v in &record.verdicts {
            let Some(truth) = by_frame.get(&v.frame_index) else {
                continue;
            };
            scores.push(v.usability_score());
            usable.push(truth.usable);
            if let (Some(t), Some(s)) = (truth.mes, v.scored_frame()) {
                report.frame_confusion.add(t, s.mes());
            }
        }
        let true_mes = labels
            .rows
            .iter()
            .filter(|r| r.usable)
            .filter_map(|r| r.mes)
            .max();
        let predicted_mes = record.video_score.map(|s| s.overall_mes);
        if let (Some(t), Some(p)) = (true_mes, predicted_mes) {
            report.video_confusion.add(t, p);
        }
        let auroc = auroc(&scores, &usable).ok();
        report.videos.push(VideoEval {
            session_id: id,
            frames: scores.len(),
            auroc,
            roc: if auroc.is_some() {
                roc_sweep(&scores, &usable)?
            } else {
                Vec::new()
            },
            predicted_mes,
            true_mes,
        });
    }
    let aurocs: Vec<f64> = report.videos.iter().filter_map(|v| v.auroc).collect();
    if !aurocs.is_empty() {
        report.macro_auroc = Some(aurocs.iter().sum::<f64>() / aurocs.len() as f64);
    }
    Ok(report)
}

/// Writes `auroc.csv` and one `roc_<id>.csv` per evaluated video.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(out_dir)?;
    let per_video: Vec<(String, f64)> = report
        .videos
        .iter()
        .filter_map(|v| v.auroc.map(|a| (format!("sess{}", v.session_id), a)))
        .collect();
    write_auroc_csv(
        &per_video,
        std::fs::File::create(out_dir.join("auroc.csv"))?,
    )?;
    for v in report.videos.iter().filter(|v| !v.roc.is_empty()) {
        let f = std::fs::File::create(out_dir.join(format!("roc_sess{}.csv", v.session_id)))?;
        write_roc_csv(&v.roc, f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mes(v: u8) -> MesScore {
        MesScore::new(v).unwrap()
    }

    /// Direct pairwise comparison over every (positive, negative) pair.
    pub(crate) fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    fn binary(a: u64, b: u64, c: u64, d: u64) -> ConfusionMatrix {
        let mut m = [[0; 4]; 4];
        m[0][0] = a;
        m[0][1] = b;
        m[1][0] = c;
        m[1][1] = d;
        ConfusionMatrix::new(m)
    }

    #[test]
    fn accuracy_examples() {
        let mut diag = [[0; 4]; 4];
        for (i, row) in diag.iter_mut().enumerate() {
            row[i] = i as u64 + 1;
        }
        assert_eq!(accuracy(&ConfusionMatrix::new(diag)).unwrap(), 1.0);
        assert_eq!(accuracy(&binary(1, 1, 1, 1)).unwrap(), 0.5);
        assert_eq!(
            accuracy(&ConfusionMatrix::default()),
            Err(EvalError::EmptyMatrix)
        );
    }

    #[test]
    fn kappa_hand_derived() {
        // p_o = 80/100, p_e = (50*60 + 50*40) / 100^2 = 0.5.
        let k = cohen_kappa(&binary(45, 5, 15, 35)).unwrap();
        assert!((k - 0.6).abs() < 1e-15, "{k}");
    }

    #[test]
    fn kappa_perfect_and_degenerate() {
        let mut m = [[0; 4]; 4];
        m[2][2] = 17;
        assert_eq!(cohen_kappa(&ConfusionMatrix::new(m)).unwrap(), 1.0);
        m[0][0] = 3;
        m[3][3] = 9;
        assert_eq!(cohen_kappa(&ConfusionMatrix::new(m)).unwrap(), 1.0);
        assert_eq!(
            cohen_kappa(&ConfusionMatrix::default()),
            Err(EvalError::EmptyMatrix)
        );
    }

    #[test]
    fn kappa_zero_for_independent_predictions() {
        let rows = [3u64, 5, 2, 7];
        let cols = [4u64, 1, 6, 2];
        let mut m = [[0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                m[r][c] = rows[r] * cols[c];
            }
        }
        assert!(cohen_kappa(&ConfusionMatrix::new(m)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn from_pairs_counts() {
        let cm =
            ConfusionMatrix::from_pairs([(mes(0), mes(0)), (mes(3), mes(2)), (mes(3), mes(2))]);
        assert_eq!(cm.counts[3][2], 2);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.7, 0.85];
        let l = [true, true, false, false];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
        assert_eq!(pairwise_auroc(&s, &l), 0.75);
        assert_eq!(
            auroc(&[3.0, 4.0, 1.0, 0.0], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[2.0; 5], &[true, false, true, false, false]).unwrap(),
            0.5
        );
        assert_eq!(
            auroc(&[1.0, 2.0], &[true, true]),
            Err(EvalError::SingleClassInput { video: None })
        );
        assert!(matches!(
            auroc(&[1.0], &[true, false]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn auroc_handles_negative_infinity() {
        let s = [f64::NEG_INFINITY, f64::NEG_INFINITY, 1.0, f64::NEG_INFINITY];
        let l = [false, true, true, false];
        assert_eq!(auroc(&s, &l).unwrap(), pairwise_auroc(&s, &l));
    }

    #[test]
    fn macro_examples() {
        let (s1, l1) = (vec![1.0, 0.0], vec![true, false]);
        let (s2, l2) = (vec![1.0, 1.0], vec![true, false]);
        let m = macro_auroc([("a", &s1[..], &l1[..]), ("b", &s2[..], &l2[..])]).unwrap();
        assert_eq!(m.mean, 0.75);
        assert_eq!(
            m.per_video,
            vec![("a".to_string(), 1.0), ("b".to_string(), 0.5)]
        );

        let one = macro_auroc([("a", &s1[..], &l1[..])]).unwrap();
        assert_eq!(one.mean, 1.0);

        let bad = [true, true];
        assert_eq!(
            macro_auroc([("a", &s1[..], &l1[..]), ("v7", &s2[..], &bad[..])]),
            Err(EvalError::SingleClassInput {
                video: Some("v7".into())
            })
        );
    }

    #[test]
    fn sweep_examples() {
        let pts = roc_sweep(&[3.0, 4.0, 1.0, 0.0], &[true, true, false, false]).unwrap();
        assert!(pts.iter().any(|p| p.tpr == 1.0 && p.fpr == 0.0));
        assert_eq!(roc_area(&pts), 1.0);

        let pts = roc_sweep(&[5.0; 4], &[true, false, true, false]).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[0].tpr, pts[0].fpr), (1.0, 1.0));
        assert_eq!((pts[1].tpr, pts[1].fpr), (0.0, 0.0));
        assert_eq!(roc_area(&pts), 0.5);
    }

    #[test]
    fn csv_reports() {
        let mut buf = Vec::new();
        write_auroc_csv(&[("sess1".into(), 0.5)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "video_id,auroc\nsess1,0.5\n"
        );
        let mut buf = Vec::new();
        let pts = roc_sweep(&[1.0, 0.0], &[true, false]).unwrap();
        write_roc_csv(&pts, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("tau,tpr,fpr\n0,1,1\n"));
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        prop::collection::vec((-5i32..5, any::<bool>()), 2..60)
            .prop_map(|v| {
                let (s, l): (Vec<f64>, Vec<bool>) =
                    v.into_iter().map(|(s, l)| (s as f64 * 0.5, l)).unzip();
                (s, l)
            })
            .prop_filter("both classes", |(_, l)| {
                l.iter().any(|&x| x) && l.iter().any(|&x| !x)
            })
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise((s, l) in scored_labels()) {
            prop_assert!((auroc(&s, &l).unwrap() - pairwise_auroc(&s, &l)).abs() <= 1e-12);
        }

        #[test]
        fn sweep_area_matches_auroc((s, l) in scored_labels()) {
            let pts = roc_sweep(&s, &l).unwrap();
            prop_assert!((roc_area(&pts) - auroc(&s, &l).unwrap()).abs() <= 1e-9);
            for w in pts.windows(2) {
                prop_assert!(w[0].tau < w[1].tau);
                prop_assert!(w[0].tpr >= w[1].tpr && w[0].fpr >= w[1].fpr);
            }
        }

        #[test]
        fn auroc_invariant_under_monotone_transform((s, l) in scored_labels()) {
            let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() + 3.0 * x).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        }

        #[test]
        fn kappa_invariant_under_relabeling(
            cells in prop::array::uniform16(0u64..20),
            perm_seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut m = [[0u64; 4]; 4];
            for (i, c) in cells.iter().enumerate() {
                m[i / 4][i % 4] = *c;
            }
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let mut perm = [0usize, 1, 2, 3];
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let mut p = [[0u64; 4]; 4];
            for r in 0..4 {
                for c in 0..4 {
                    p[perm[r]][perm[c]] = m[r][c];
                }
            }
            let (a, b) = (cohen_kappa(&ConfusionMatrix::new(m)).unwrap(), cohen_kappa(&ConfusionMatrix::new(p)).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn kappa_one_iff_no_off_diagonal(cells in prop::array::uniform16(0u64..5)) {
            let mut m = [[0u64; 4]; 4];
            for (i, c) in cells.iter().enumerate() {
                m[i / 4][i % 4] = *c;
            }
            prop_assume!(m.iter().flatten().sum::<u64>() > 0);
            let cm = ConfusionMatrix::new(m);
            let off = cm.total() - cm.trace();
            prop_assert_eq!(cohen_kappa(&cm).unwrap() == 1.0, off == 0);
        }

        #[test]
        fn macro_invariant_under_reordering(
            vids in prop::collection::vec(scored_labels(), 1..6),
        ) {
            let named: Vec<(String, Vec<f64>, Vec<bool>)> = vids
                .into_iter()
                .enumerate()
                .map(|(i, (s, l))| (format!("v{i}"), s, l))
                .collect();
            let fwd = macro_auroc(named.iter().map(|(n, s, l)| (n.as_str(), &s[..], &l[..]))).unwrap();
            let rev = macro_auroc(named.iter().rev().map(|(n, s, l)| (n.as_str(), &s[..], &l[..]))).unwrap();
            prop_assert!((fwd.mean - rev.mean).abs() < 1e-12);
        }
    }
}
