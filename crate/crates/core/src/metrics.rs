//! Phase, triplet and grounding metrics.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::grammar::EntityKind;
use crate::mask::BinaryMask;
use crate::vocab::{Ivt, LabelSpace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no videos to evaluate")]
    Empty,
    #[error("video {video}: {gt} ground-truth frames but {pred} predictions")]
    LengthMismatch { video: usize, gt: usize, pred: usize },
    #[error("video {0} has no frames")]
    EmptyVideo(usize),
    #[error("phase id {id} out of range for {num_phases} phases")]
    PhaseOutOfRange { id: usize, num_phases: usize },
    #[error("{scores} scores for {positives} labels")]
    ScoreLengthMismatch { scores: usize, positives: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("frame {frame}: {found} triplet scores, expected {expected}")]
    ScoreWidth {
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("frame {frame}: triplet id {id} out of range")]
    TripletOutOfRange { frame: usize, id: usize },
    #[error("frame {frame}: mask resolution {pred:?} does not match ground truth {gt:?}")]
    ResolutionMismatch {
        frame: usize,
        pred: (usize, usize),
        gt: (usize, usize),
    },
}

/// One video's ground-truth and predicted phase per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSequencePair {
    pub gt: Vec<usize>,
    pub pred: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseAveraging {
    /// Per-phase scores per video, averaged over videos, then over phases.
    #[default]
    PerVideo,
    /// All frames treated as one sequence.
    Pooled,
}

pub fn phase_metrics(pairs: &[PhaseSequencePair], num_phases: usize) -> Result<PhaseMetrics, MetricsError> {
    phase_metrics_with(pairs, num_phases, PhaseAveraging::PerVideo)
}

pub fn phase_metrics_with(
    pairs: &[PhaseSequencePair],
    num_phases: usize,
    averaging: PhaseAveraging,
) -> Result<PhaseMetrics, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (video, pair) in pairs.iter().enumerate() {
        if pair.gt.len() != pair.pred.len() {
            return Err(MetricsError::LengthMismatch {
                video,
                gt: pair.gt.len(),
                pred: pair.pred.len(),
            });
        }
        if pair.gt.is_empty() {
            return Err(MetricsError::EmptyVideo(video));
        }
        if let Some(&id) = pair.gt.iter().chain(&pair.pred).find(|&&id| id >= num_phases) {
            return Err(MetricsError::PhaseOutOfRange { id, num_phases });
        }
    }
    let pooled;
    let pairs = match averaging {
        PhaseAveraging::PerVideo => pairs,
        PhaseAveraging::Pooled => {
            pooled = [PhaseSequencePair {
                gt: pairs.iter().flat_map(|p| p.gt.iter().copied()).collect(),
                pred: pairs.iter().flat_map(|p| p.pred.iter().copied()).collect(),
            }];
            &pooled[..]
        }
    };

    let accuracy = pairs
        .iter()
        .map(|p| p.gt.iter().zip(&p.pred).filter(|(g, q)| g == q).count() as f64 / p.gt.len() as f64)
        .sum::<f64>()
        / pairs.len() as f64;

    // Per phase: sums of (precision, recall, jaccard) and the number of videos.
    let mut acc = vec![([0.0; 3], 0usize); num_phases];
    for pair in pairs {
        let mut tp = vec![0usize; num_phases];
        let mut gt_count = vec![0usize; num_phases];
        let mut pred_count = vec![0usize; num_phases];
        for (&g, &q) in pair.gt.iter().zip(&pair.pred) {
            gt_count[g] += 1;
            pred_count[q] += 1;
            if g == q {
                tp[g] += 1;
            }
        }
        for c in 0..num_phases {
            if gt_count[c] == 0 && pred_count[c] == 0 {
                continue;
            }
            let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
            let union = gt_count[c] + pred_count[c] - tp[c];
            let (sums, videos) = &mut acc[c];
            sums[0] += ratio(tp[c], pred_count[c]);
            sums[1] += ratio(tp[c], gt_count[c]);
            sums[2] += ratio(tp[c], union);
            *videos += 1;
        }
    }
    let mut means = [0.0; 3];
    let mut phases = 0;
    for (sums, videos) in acc.iter().filter(|(_, v)| *v > 0) {
        for k in 0..3 {
            means[k] += sums[k] / *videos as f64;
        }
        phases += 1;
    }
    let phases = phases as f64;
    Ok(PhaseMetrics {
        accuracy,
        precision: means[0] / phases,
        recall: means[1] / phases,
        jaccard: means[2] / phases,
    })
}

/// All-points interpolated average precision.
///
/// Samples are ranked by descending score, ties in input order. Returns
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>, MetricsError> {
    if scores.len() != positives.len() {
        return Err(MetricsError::ScoreLengthMismatch {
            scores: scores.len(),
            positives: positives.len(),
        });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s));
    }
    let num_pos = positives.iter().filter(|&&p| p).count();
    if num_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut precision = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += positives[i] as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let ap = order
        .iter()
        .zip(&precision)
        .filter(|(&i, _)| positives[i])
        .map(|(_, &p)| p)
        .sum::<f64>()
        / num_pos as f64;
    Ok(Some(ap))
}

/// Frame-level triplet scores and ground-truth presence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletScoreSet {
    /// One score per valid triplet, per frame.
    pub scores: Vec<Vec<f64>>,
    /// Triplet ids present in each frame.
    pub present: Vec<Vec<usize>>,
}

impl TripletScoreSet {
    pub fn push(&mut self, scores: Vec<f64>, present: Vec<usize>) {
        self.scores.push(scores);
        self.present.push(present);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApFamily {
    I,
    V,
    T,
    Iv,
    It,
    Ivt,
}

impl ApFamily {
    pub const ALL: [ApFamily; 6] = [
        ApFamily::I,
        ApFamily::V,
        ApFamily::T,
        ApFamily::Iv,
        ApFamily::It,
        ApFamily::Ivt,
    ];

    /// Class key of a triplet under this family's projection.
    pub fn key(self, ivt: Ivt) -> (usize, usize, usize) {
        const NONE: usize = usize::MAX;
        match self {
            ApFamily::I => (ivt.instrument, NONE, NONE),
            ApFamily::V => (NONE, ivt.verb, NONE),
            ApFamily::T => (NONE, NONE, ivt.target),
            ApFamily::Iv => (ivt.instrument, ivt.verb, NONE),
            ApFamily::It => (ivt.instrument, NONE, ivt.target),
            ApFamily::Ivt => (ivt.instrument, ivt.verb, ivt.target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSuite {
    pub ap_i: Option<f64>,
    pub ap_v: Option<f64>,
    pub ap_t: Option<f64>,
    pub ap_iv: Option<f64>,
    pub ap_it: Option<f64>,
    pub ap_ivt: Option<f64>,
    /// Per valid-triplet AP, `None` for classes without positives.
    pub per_triplet: Vec<Option<f64>>,
}

impl ApSuite {
    pub fn get(&self, family: ApFamily) -> Option<f64> {
        match family {
            ApFamily::I => self.ap_i,
            ApFamily::V => self.ap_v,
            ApFamily::T => self.ap_t,
            ApFamily::Iv => self.ap_iv,
            ApFamily::It => self.ap_it,
            ApFamily::Ivt => self.ap_ivt,
        }
    }
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class APs of one family: max-marginalized scores, existential presence.
pub fn family_class_aps(
    data: &TripletScoreSet,
    space: &LabelSpace,
    family: ApFamily,
) -> Result<Vec<Option<f64>>, MetricsError> {
    // Classes in order of first appearance, so the IVT family lines up with triplet ids.
    let mut index: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (id, &ivt) in space.valid_triplets().iter().enumerate() {
        let slot = *index.entry(family.key(ivt)).or_insert_with(|| {
            classes.push(Vec::new());
            classes.len() - 1
        });
        classes[slot].push(id);
    }
    let frames = data.len();
    classes
        .iter()
        .map(|ids| {
            let mut scores = Vec::with_capacity(frames);
            let mut positives = Vec::with_capacity(frames);
            for (s, present) in data.scores.iter().zip(&data.present) {
                scores.push(ids.iter().map(|&k| s[k]).fold(f64::NEG_INFINITY, f64::max));
                positives.push(ids.iter().any(|k| present.contains(k)));
            }
            average_precision(&scores, &positives)
        })
        .collect()
}

pub fn triplet_ap_suite(data: &TripletScoreSet, space: &LabelSpace) -> Result<ApSuite, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::Empty);
    }
    if data.scores.len() != data.present.len() {
        return Err(MetricsError::ScoreLengthMismatch {
            scores: data.scores.len(),
            positives: data.present.len(),
        });
    }
    let k = space.num_triplets();
    for (frame, (s, present)) in data.scores.iter().zip(&data.present).enumerate() {
        if s.len() != k {
            return Err(MetricsError::ScoreWidth {
                frame,
                expected: k,
                found: s.len(),
            });
        }
        if let Some(&id) = present.iter().find(|&&id| id >= k) {
            return Err(MetricsError::TripletOutOfRange { frame, id });
        }
    }
    let per_triplet = family_class_aps(data, space, ApFamily::Ivt)?;
    let family = |f| -> Result<Option<f64>, MetricsError> { Ok(mean_defined(family_class_aps(data, space, f)?)) };
    Ok(ApSuite {
        ap_i: family(ApFamily::I)?,
        ap_v: family(ApFamily::V)?,
        ap_t: family(ApFamily::T)?,
        ap_iv: family(ApFamily::Iv)?,
        ap_it: family(ApFamily::It)?,
        ap_ivt: mean_defined(per_triplet.iter().copied()),
        per_triplet,
    })
}

/// A predicted mask paired with the ground truth for the same entity in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMaskPair {
    pub kind: EntityKind,
    pub label: usize,
    pub pred: BinaryMask,
    pub gt: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
    pub gt_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub iou_i: Option<f64>,
    pub iou_t: Option<f64>,
    pub miou: Option<f64>,
    /// Per-class IoU keyed by `"<kind>:<label id>"`, classes with ground truth only.
    pub per_class: BTreeMap<String, f64>,
}

/// Dataset-level IoU accumulator.
///
/// Within a frame, all masks of the same class are merged before counting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentationAccumulator {
    counts: BTreeMap<(EntityKind, usize), IouCounts>,
    frames: usize,
}

impl SegmentationAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_frame(&mut self, pairs: &[EntityMaskPair]) -> Result<(), MetricsError> {
        let frame = self.frames;
        let mut merged: BTreeMap<(EntityKind, usize), (BinaryMask, BinaryMask)> = BTreeMap::new();
        for p in pairs {
            if p.pred.shape() != p.gt.shape() {
                return Err(MetricsError::ResolutionMismatch {
                    frame,
                    pred: p.pred.shape(),
                    gt: p.gt.shape(),
                });
            }
            match merged.get_mut(&(p.kind, p.label)) {
                Some((pred, gt)) => {
                    if pred.shape() != p.pred.shape() {
                        return Err(MetricsError::ResolutionMismatch {
                            frame,
                            pred: p.pred.shape(),
                            gt: pred.shape(),
                        });
                    }
                    pred.union_with(&p.pred);
                    gt.union_with(&p.gt);
                }
                None => {
                    merged.insert((p.kind, p.label), (p.pred.clone(), p.gt.clone()));
                }
            }
        }
        for (key, (pred, gt)) in merged {
            let c = self.counts.entry(key).or_default();
            c.intersection += pred.intersection_count(&gt) as u64;
            c.union += pred.union_count(&gt) as u64;
            c.gt_pixels += gt.count() as u64;
        }
        self.frames += 1;
        Ok(())
    }

    pub fn counts(&self) -> &BTreeMap<(EntityKind, usize), IouCounts> {
        &self.counts
    }

    pub fn finish(&self) -> SegmentationMetrics {
        let mut per_class = BTreeMap::new();
        let mut by_kind: BTreeMap<EntityKind, Vec<f64>> = BTreeMap::new();
        for (&(kind, label), c) in &self.counts {
            if c.gt_pixels == 0 {
                continue;
            }
            let iou = c.intersection as f64 / c.union as f64;
            per_class.insert(format!("{}:{label}", kind.as_str()), iou);
            by_kind.entry(kind).or_default().push(iou);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let all: Vec<f64> = by_kind.values().flatten().copied().collect();
        SegmentationMetrics {
            iou_i: by_kind.get(&EntityKind::Instrument).and_then(|v| mean(v)),
            iou_t: by_kind.get(&EntityKind::Target).and_then(|v| mean(v)),
            miou: mean(&all),
            per_class,
        }
    }
}

pub fn segmentation_metrics(frames: &[Vec<EntityMaskPair>]) -> Result<SegmentationMetrics, MetricsError> {
    let mut acc = SegmentationAccumulator::new();
    for frame in frames {
        acc.add_frame(frame)?;
    }
    Ok(acc.finish())
}

/// All metrics of one evaluation run, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub jaccard: Option<f64>,
    pub ap_i: Option<f64>,
    pub ap_v: Option<f64>,
    pub ap_t: Option<f64>,
    pub ap_iv: Option<f64>,
    pub ap_it: Option<f64>,
    pub ap_ivt: Option<f64>,
    pub iou_i: Option<f64>,
    pub iou_t: Option<f64>,
    pub miou: Option<f64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 13] = [
        "accuracy",
        "precision",
        "recall",
        "jaccard",
        "ap_i",
        "ap_v",
        "ap_t",
        "ap_iv",
        "ap_it",
        "ap_ivt",
        "iou_i",
        "iou_t",
        "miou",
    ];

    pub fn values(&self) -> [Option<f64>; 13] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.jaccard,
            self.ap_i,
            self.ap_v,
            self.ap_t,
            self.ap_iv,
            self.ap_it,
            self.ap_ivt,
            self.iou_i,
            self.iou_t,
            self.miou,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|&n| n == name)
            .and_then(|i| self.values()[i])
    }

    pub fn set_phase(&mut self, m: PhaseMetrics) {
        self.accuracy = Some(m.accuracy);
        self.precision = Some(m.precision);
        self.recall = Some(m.recall);
        self.jaccard = Some(m.jaccard);
    }

    pub fn set_triplet(&mut self, s: &ApSuite) {
        self.ap_i = s.ap_i;
        self.ap_v = s.ap_v;
        self.ap_t = s.ap_t;
        self.ap_iv = s.ap_iv;
        self.ap_it = s.ap_it;
        self.ap_ivt = s.ap_ivt;
    }

    pub fn set_segmentation(&mut self, s: &SegmentationMetrics) {
        self.iou_i = s.iou_i;
        self.iou_t = s.iou_t;
        self.miou = s.miou;
    }

    /// Aligned phase / triplet / grounding tables in percent.
    pub fn table(&self) -> String {
        let cells: Vec<String> = self.values().iter().map(|v| percent(*v)).collect();
        render_table(&cells)
    }
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

const TABLE_GROUPS: [(&str, &[&str]); 3] = [
    ("Phase", &["Accuracy", "Precision", "Recall", "Jaccard"]),
    ("Triplet", &["AP_I", "AP_V", "AP_T", "AP_IV", "AP_IT", "AP_IVT"]),
    ("Grounding", &["IoU_I", "IoU_T", "mIoU"]),
];

fn render_table(cells: &[String]) -> String {
    let mut out = String::new();
    let mut offset = 0;
    for (title, headers) in TABLE_GROUPS {
        let row = &cells[offset..offset + headers.len()];
        offset += headers.len();
        let widths: Vec<usize> = headers
            .iter()
            .zip(row)
            .map(|(h, c)| h.len().max(c.len()))
            .collect();
        let line = |items: &mut dyn Iterator<Item = &str>| {
            items
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "  {}", line(&mut headers.iter().copied()));
        let _ = writeln!(out, "  {}", line(&mut row.iter().map(String::as_str)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Folds contributing a defined value.
    pub n: usize,
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub folds: usize,
    pub metrics: BTreeMap<String, MeanStd>,
    pub warnings: Vec<String>,
}

impl CrossvalSummary {
    pub fn get(&self, name: &str) -> Option<MeanStd> {
        self.metrics.get(name).copied()
    }

    pub fn table(&self) -> String {
        let cells: Vec<String> = MetricReport::NAMES
            .iter()
            .map(|n| self.get(n).map_or_else(|| "-".to_string(), |m| m.to_string()))
            .collect();
        let mut out = render_table(&cells);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

pub const EXPECTED_FOLDS: usize = 5;

/// Mean and population standard deviation per metric over the folds that define it.
pub fn crossval_aggregate(reports: &[MetricReport]) -> CrossvalSummary {
    let mut warnings = Vec::new();
    if reports.len() != EXPECTED_FOLDS {
        warnings.push(format!(
            "expected {EXPECTED_FOLDS} fold reports, got {}",
            reports.len()
        ));
    }
    let mut metrics = BTreeMap::new();
    for (i, name) in MetricReport::NAMES.iter().enumerate() {
        let mut values: Vec<f64> = reports.iter().filter_map(|r| r.values()[i]).collect();
        if values.is_empty() {
            continue;
        }
        // Sorting makes the sums independent of fold order.
        values.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let std = (sq.iter().sum::<f64>() / n).sqrt();
        metrics.insert(
            name.to_string(),
            MeanStd {
                mean,
                std,
                n: values.len(),
            },
        );
    }
    CrossvalSummary {
        folds: reports.len(),
        metrics,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn phase_perfect_prediction() {
        let pairs = vec![
            PhaseSequencePair {
                gt: vec![0, 0, 1, 2],
                pred: vec![0, 0, 1, 2],
            },
            PhaseSequencePair {
                gt: vec![1, 1],
                pred: vec![1, 1],
            },
        ];
        let m = phase_metrics(&pairs, 3).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.jaccard), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn phase_hand_case() {
        // A = {0, 1} vs {0}: P 1, R 1/2, J 1/2. B = {2, 3} vs {1, 2, 3}: P 2/3, R 1, J 2/3.
        let pairs = vec![PhaseSequencePair {
            gt: vec![0, 0, 1, 1],
            pred: vec![0, 1, 1, 1],
        }];
        let m = phase_metrics(&pairs, 2).unwrap();
        assert!(close(m.accuracy, 0.75));
        assert!(close(m.precision, (1.0 + 2.0 / 3.0) / 2.0));
        assert!(close(m.recall, 0.75));
        assert!(close(m.jaccard, (0.5 + 2.0 / 3.0) / 2.0));
    }

    #[test]
    fn phase_entirely_wrong() {
        let pairs = vec![PhaseSequencePair {
            gt: vec![2, 2, 2],
            pred: vec![0, 0, 0],
        }];
        let m = phase_metrics(&pairs, 3).unwrap();
        assert_eq!((m.accuracy, m.jaccard), (0.0, 0.0));
    }

    #[test]
    fn phase_errors() {
        assert_eq!(phase_metrics(&[], 3), Err(MetricsError::Empty));
        let bad = [PhaseSequencePair {
            gt: vec![0],
            pred: vec![0, 1],
        }];
        assert!(matches!(phase_metrics(&bad, 3), Err(MetricsError::LengthMismatch { .. })));
        let empty = [PhaseSequencePair {
            gt: vec![],
            pred: vec![],
        }];
        assert_eq!(phase_metrics(&empty, 3), Err(MetricsError::EmptyVideo(0)));
        let range = [PhaseSequencePair {
            gt: vec![3],
            pred: vec![0],
        }];
        assert!(matches!(phase_metrics(&range, 3), Err(MetricsError::PhaseOutOfRange { .. })));
    }

    #[test]
    fn accuracy_equals_pooled_for_equal_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let pairs: Vec<_> = (0..rng.random_range(1..5))
                .map(|_| PhaseSequencePair {
                    gt: (0..6).map(|_| rng.random_range(0..3)).collect(),
                    pred: (0..6).map(|_| rng.random_range(0..3)).collect(),
                })
                .collect();
            let a = phase_metrics(&pairs, 3).unwrap();
            let b = phase_metrics_with(&pairs, 3, PhaseAveraging::Pooled).unwrap();
            assert!(close(a.accuracy, b.accuracy));
        }
    }

    #[test]
    fn ap_hand_cases() {
        let ap = average_precision(&[0.9, 0.7, 0.3], &[true, false, true]).unwrap().unwrap();
        assert!(close(ap, 0.5 + 0.5 * 2.0 / 3.0));
        let perfect = average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(perfect, Some(1.0));
        assert_eq!(average_precision(&[0.2], &[true]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.2, 0.4], &[false, false]).unwrap(), None);
        assert!(average_precision(&[0.2], &[true, false]).is_err());
        assert!(average_precision(&[f64::NAN], &[true]).is_err());
    }

    #[test]
    fn ap_ties_follow_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), Some(0.5));
    }

    #[test]
    fn marginal_score_is_max_over_shared_instrument() {
        let space = LabelSpace::from_json(
            r#"{"phases":["p"],"instruments":["a","b"],"verbs":["v","w"],"targets":["t"],
                "valid_triplets":[[0,0,0],[0,1,0],[1,0,0]]}"#,
        )
        .unwrap();
        let data = TripletScoreSet {
            scores: vec![vec![0.2, 0.9, 0.1], vec![0.6, 0.1, 0.8], vec![0.3, 0.3, 0.7]],
            present: vec![vec![1], vec![2], vec![2]],
        };
        let aps = family_class_aps(&data, &space, ApFamily::I).unwrap();
        // Instrument a: scores [0.9, 0.6, 0.3], present [1, 0, 0].
        assert_eq!(aps[0], Some(1.0));
        // Instrument b: scores [0.1, 0.8, 0.7], present [0, 1, 1].
        assert_eq!(aps[1], Some(1.0));
        let suite = triplet_ap_suite(&data, &space).unwrap();
        assert_eq!(suite.per_triplet[0], None);
        assert_eq!(suite.ap_ivt, Some(1.0));
    }

    #[test]
    fn perfect_detector_scores_one() {
        let space = LabelSpace::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = TripletScoreSet::default();
        for _ in 0..30 {
            let present: Vec<usize> = (0..space.num_triplets()).filter(|_| rng.random_bool(0.3)).collect();
            let scores = (0..space.num_triplets())
                .map(|k| if present.contains(&k) { 1.0 } else { 0.0 })
                .collect();
            data.push(scores, present);
        }
        let suite = triplet_ap_suite(&data, &space).unwrap();
        for f in ApFamily::ALL {
            assert_eq!(suite.get(f), Some(1.0), "{f:?}");
        }
    }

    fn square(n: usize, cells: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(n, n, |r, c| cells.contains(&(r, c)))
    }

    #[test]
    fn segmentation_hand_cases() {
        let gt = square(4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let pred = square(4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
        let frames = vec![vec![
            EntityMaskPair {
                kind: EntityKind::Instrument,
                label: 0,
                pred: pred.clone(),
                gt: gt.clone(),
            },
            EntityMaskPair {
                kind: EntityKind::Target,
                label: 3,
                pred: gt.clone(),
                gt: gt.clone(),
            },
            EntityMaskPair {
                kind: EntityKind::Target,
                label: 5,
                pred: BinaryMask::new(4, 4),
                gt: BinaryMask::new(4, 4),
            },
        ]];
        let m = segmentation_metrics(&frames).unwrap();
        assert!(close(m.iou_i.unwrap(), 1.0 / 3.0));
        assert_eq!(m.iou_t, Some(1.0));
        assert!(close(m.miou.unwrap(), (1.0 / 3.0 + 1.0) / 2.0));
        assert_eq!(m.per_class.len(), 2);

        let bad = vec![vec![EntityMaskPair {
            kind: EntityKind::Target,
            label: 0,
            pred: BinaryMask::new(2, 2),
            gt: BinaryMask::new(4, 4),
        }]];
        assert!(matches!(
            segmentation_metrics(&bad),
            Err(MetricsError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn crossval_cases() {
        let fold = |v: f64| MetricReport {
            accuracy: Some(v),
            ..MetricReport::default()
        };
        let two = crossval_aggregate(&[fold(0.8), fold(0.9)]);
        let acc = two.get("accuracy").unwrap();
        assert!(close(acc.mean, 0.85) && close(acc.std, 0.05));
        assert_eq!(two.warnings.len(), 1);
        assert!(two.get("miou").is_none());

        let same = crossval_aggregate(&vec![fold(0.7); 5]);
        assert!(same.warnings.is_empty());
        assert_eq!(same.get("accuracy").unwrap().std, 0.0);

        let a = crossval_aggregate(&[fold(0.1), fold(0.4), fold(0.35), fold(0.9), fold(0.2)]);
        let b = crossval_aggregate(&[fold(0.9), fold(0.2), fold(0.1), fold(0.35), fold(0.4)]);
        assert_eq!(a, b);
    }

    #[test]
    fn table_has_all_columns() {
        let r = MetricReport {
            ap_ivt: Some(0.123),
            ..MetricReport::default()
        };
        let t = r.table();
        assert!(t.contains("AP_IVT") && t.contains("12.3") && t.contains("mIoU"));
    }
}
