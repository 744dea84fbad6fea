//! Scores a prediction directory against a ground-truth directory.
//!
//! Predictions use the annotation layout. Triplet confidences live in an
//! optional `scores/<video>.json` (`{"<frame>": [score per valid triplet]}`);
//! without it, predicted triplets score 1 and the rest 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset_io::{rle_decode, DatasetError, FoldSplit, FrameAnnotation, LoadedDataset};
use crate::grammar::EntityKind;
use crate::mask::BinaryMask;
use crate::metrics::{
    crossval_aggregate, phase_metrics, segmentation_metrics, triplet_ap_suite, CrossvalSummary, EntityMaskPair,
    MetricReport, MetricsError, PhaseSequencePair, TripletScoreSet,
};
use crate::vocab::LabelSpace;
use crate::SCHEMA_VERSION;

pub const SCORES_DIR: &str = "scores";

pub type FrameScores = BTreeMap<usize, Vec<f64>>;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("video {video}: no prediction for frame {frame}")]
    MissingFrame { video: String, frame: usize },
    #[error("video {0} has no ground truth")]
    UnknownVideo(String),
    #[error("video {video}, frame {frame}: {message}")]
    Record {
        video: String,
        frame: usize,
        message: String,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn write_scores(root: &Path, video: &str, scores: &FrameScores) -> Result<(), DatasetError> {
    let dir = root.join(SCORES_DIR);
    let io = |path: &Path, e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let path = dir.join(format!("{video}.json"));
    let text = serde_json::to_string(scores).expect("scores serialize");
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))
}

/// `None` when the video has no scores file.
pub fn read_scores(root: &Path, video: &str) -> Result<Option<FrameScores>, DatasetError> {
    let path = root.join(SCORES_DIR).join(format!("{video}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| DatasetError::Schema {
            path,
            message: e.to_string(),
        })
}

fn entity_masks(frame: &FrameAnnotation, space: &LabelSpace) -> Result<Vec<(EntityKind, usize, BinaryMask)>, EvalError> {
    let mut out = Vec::new();
    for t in &frame.triplets {
        let ivt = space.valid_triplets()[t.triplet_id];
        for (kind, label, rle) in [
            (EntityKind::Instrument, ivt.instrument, &t.instrument_mask),
            (EntityKind::Target, ivt.target, &t.target_mask),
        ] {
            let mask = rle_decode(rle).map_err(|e| EvalError::Record {
                video: frame.video_id.clone(),
                frame: frame.frame_index,
                message: e.to_string(),
            })?;
            out.push((kind, label, mask));
        }
    }
    Ok(out)
}

fn mask_pairs(pred: &FrameAnnotation, gt: &FrameAnnotation, space: &LabelSpace) -> Result<Vec<EntityMaskPair>, EvalError> {
    let mut pairs = Vec::new();
    for (kind, label, mask) in entity_masks(gt, space)? {
        let (h, w) = mask.shape();
        pairs.push(EntityMaskPair {
            kind,
            label,
            pred: BinaryMask::new(h, w),
            gt: mask,
        });
    }
    for (kind, label, mask) in entity_masks(pred, space)? {
        let (h, w) = mask.shape();
        pairs.push(EntityMaskPair {
            kind,
            label,
            pred: mask,
            gt: BinaryMask::new(h, w),
        });
    }
    Ok(pairs)
}

/// Metrics over `videos`; every ground-truth frame needs a prediction.
pub fn evaluate_predictions(
    pred: &LoadedDataset,
    scores: &BTreeMap<String, FrameScores>,
    gt: &LoadedDataset,
    space: &LabelSpace,
    videos: &[String],
) -> Result<MetricReport, EvalError> {
    let gt_videos = gt.by_video();
    let pred_videos = pred.by_video();
    let mut phases = Vec::new();
    let mut triplets = TripletScoreSet::default();
    let mut masks = Vec::new();
    for video in videos {
        let gt_frames = gt_videos
            .get(video.as_str())
            .ok_or_else(|| EvalError::UnknownVideo(video.clone()))?;
        let predicted: BTreeMap<usize, &FrameAnnotation> = pred_videos
            .get(video.as_str())
            .map(|fs| fs.iter().map(|f| (f.frame_index, *f)).collect())
            .unwrap_or_default();
        let mut pair = PhaseSequencePair {
            gt: Vec::new(),
            pred: Vec::new(),
        };
        for g in gt_frames {
            let p = predicted.get(&g.frame_index).ok_or_else(|| EvalError::MissingFrame {
                video: video.clone(),
                frame: g.frame_index,
            })?;
            pair.gt.push(g.phase);
            pair.pred.push(p.phase);
            let row = match scores.get(video).and_then(|s| s.get(&g.frame_index)) {
                Some(row) => row.clone(),
                None => {
                    let mut row = vec![0.0; space.num_triplets()];
                    for id in p.triplet_ids() {
                        row[id] = 1.0;
                    }
                    row
                }
            };
            triplets.push(row, g.triplet_ids());
            masks.push(mask_pairs(p, g, space)?);
        }
        phases.push(pair);
    }
    let mut report = MetricReport::default();
    report.set_phase(phase_metrics(&phases, space.phases().len())?);
    report.set_triplet(&triplet_ap_suite(&triplets, space)?);
    report.set_segmentation(&segmentation_metrics(&masks)?);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: u32,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub videos: Vec<String>,
    /// Metrics over all evaluated videos together.
    pub overall: MetricReport,
    /// Per-fold metrics on each fold's test videos, when folds are given.
    pub folds: Vec<FoldMetrics>,
    pub summary: Option<CrossvalSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = format!("{} videos\n{}", self.videos.len(), self.overall.table());
        for f in &self.folds {
            out += &format!("\nfold {}\n{}", f.fold, f.metrics.table());
        }
        if let Some(summary) = &self.summary {
            out += &format!("\nmean ± std over folds\n{}", summary.table());
        }
        out
    }
}

/// Evaluates the fold videos when `folds` is given, adding per-fold metrics;
/// otherwise every predicted video. Predicted videos must exist in the
/// ground truth.
pub fn evaluate_report(
    pred: &LoadedDataset,
    scores: &BTreeMap<String, FrameScores>,
    gt: &LoadedDataset,
    space: &LabelSpace,
    folds: Option<&FoldSplit>,
) -> Result<EvalReport, EvalError> {
    if let Some(v) = pred.stats.videos.iter().find(|v| !gt.stats.frames_per_video.contains_key(*v)) {
        return Err(EvalError::UnknownVideo(v.clone()));
    }
    let videos = match folds {
        Some(f) => f.videos(),
        None => pred.stats.videos.clone(),
    };
    let overall = evaluate_predictions(pred, scores, gt, space, &videos)?;
    let mut per_fold = Vec::new();
    if let Some(f) = folds {
        for fold in f.fold_ids() {
            let metrics = evaluate_predictions(pred, scores, gt, space, &f.folds[&fold])?;
            per_fold.push(FoldMetrics { fold, metrics });
        }
    }
    let summary = folds.map(|_| crossval_aggregate(&per_fold.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>()));
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        videos,
        overall,
        folds: per_fold,
        summary,
    })
}
