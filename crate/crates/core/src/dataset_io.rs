//! On-disk annotation format.
//!
//! ```text
//! root/
//!   label_space.json
//!   folds.json                 {"1": ["VID01", ...], ...}
//!   meta.json                  optional: {"resolution": [H, W], "grid": [h, w, d]}
//!   annotations/<video>.json   [{"frame", "phase", "triplets": [{"ivt", "inst_mask", "target_mask"}], "narrative"}]
//!   features/<video>.f64       optional: little-endian f64, frames x h x w x d
//! ```
//!
//! Masks are run-length encoded in column-major order, background run first.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::vocab::{Ivt, LabelSpace};

pub const ANNOTATIONS_DIR: &str = "annotations";
pub const FEATURES_DIR: &str = "features";
pub const FOLDS_FILE: &str = "folds.json";
pub const LABEL_SPACE_FILE: &str = "label_space.json";
pub const META_FILE: &str = "meta.json";

pub const CHOLECT45_FOLDS: &str = include_str!("../configs/cholect45_folds.json");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RleError {
    #[error("run lengths sum to {sum}, expected {expected} for size {size:?}")]
    CountSum {
        sum: u64,
        expected: u64,
        size: [usize; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    /// `[H, W]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let (h, w) = mask.shape();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for c in 0..w {
        for r in 0..h {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask { size: [h, w], counts }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask, RleError> {
    let [h, w] = rle.size;
    let expected = (h * w) as u64;
    let sum = rle.counts.iter().try_fold(0u64, |acc, &c| acc.checked_add(c));
    if sum != Some(expected) {
        return Err(RleError::CountSum {
            sum: sum.unwrap_or(u64::MAX),
            expected,
            size: rle.size,
        });
    }
    let mut mask = BinaryMask::new(h, w);
    let mut pos = 0usize;
    for (k, &run) in rle.counts.iter().enumerate() {
        let fg = k % 2 == 1;
        for p in pos..pos + run as usize {
            if fg {
                mask.set(p % h, p / h, true);
            }
        }
        pos += run as usize;
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletAnnotation {
    pub triplet_id: usize,
    pub instrument_mask: RleMask,
    pub target_mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub video_id: String,
    pub frame_index: usize,
    pub phase: usize,
    pub triplets: Vec<TripletAnnotation>,
    pub narrative: Option<String>,
}

impl FrameAnnotation {
    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    /// Distinct triplet ids in annotation order.
    pub fn triplet_ids(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        self.triplets
            .iter()
            .map(|t| t.triplet_id)
            .filter(|id| seen.insert(*id))
            .collect()
    }
}

/// Triplet reference on disk: a valid-triplet id or an `[i, v, t]` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IvtRef {
    Id(usize),
    Components([usize; 3]),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TripletRecord {
    ivt: IvtRef,
    inst_mask: RleMask,
    target_mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    phase: usize,
    triplets: Vec<TripletRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    narrative: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordErrorKind {
    #[error("cannot read file: {0}")]
    Io(String),
    #[error("malformed annotation: {0}")]
    Schema(String),
    #[error("phase id {0} out of range")]
    PhaseOutOfRange(usize),
    #[error("triplet {0:?} is not a valid combination")]
    InvalidTriplet(IvtRef),
    #[error("{which} mask: {source}")]
    Rle {
        which: &'static str,
        source: RleError,
    },
    #[error("{which} mask has resolution {found:?}, expected {expected:?}")]
    Resolution {
        which: &'static str,
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("duplicate frame index")]
    DuplicateFrame,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{video}{}: {kind}", frame.map(|f| format!(" frame {f}")).unwrap_or_default())]
pub struct RecordError {
    pub video: String,
    pub frame: Option<usize>,
    pub kind: RecordErrorKind,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("validation failed: {0}")]
    Record(RecordError),
    #[error(transparent)]
    Folds(#[from] FoldError),
}

fn io_error(path: &Path, e: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub errors: Vec<RecordError>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub frames: usize,
    pub videos: Vec<String>,
    pub frames_per_video: BTreeMap<String, usize>,
    pub phase_counts: Vec<usize>,
    /// Frames containing each valid triplet.
    pub triplet_counts: Vec<usize>,
    pub instrument_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub resolution: Option<[usize; 2]>,
}

impl DatasetStats {
    pub fn compute(frames: &[FrameAnnotation], space: &LabelSpace, resolution: Option<[usize; 2]>) -> Self {
        let mut stats = DatasetStats {
            frames: frames.len(),
            phase_counts: vec![0; space.phases().len()],
            triplet_counts: vec![0; space.num_triplets()],
            instrument_counts: vec![0; space.instruments().len()],
            target_counts: vec![0; space.targets().len()],
            resolution,
            ..Default::default()
        };
        for f in frames {
            *stats.frames_per_video.entry(f.video_id.clone()).or_default() += 1;
            stats.phase_counts[f.phase] += 1;
            for id in f.triplet_ids() {
                stats.triplet_counts[id] += 1;
            }
            let comps: Vec<Ivt> = f
                .triplets
                .iter()
                .map(|t| space.valid_triplets()[t.triplet_id])
                .collect();
            for i in comps.iter().map(|c| c.instrument).collect::<BTreeSet<_>>() {
                stats.instrument_counts[i] += 1;
            }
            for t in comps.iter().map(|c| c.target).collect::<BTreeSet<_>>() {
                stats.target_counts[t] += 1;
            }
        }
        stats.videos = stats.frames_per_video.keys().cloned().collect();
        stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    /// Valid records sorted by (video, frame).
    pub frames: Vec<FrameAnnotation>,
    pub stats: DatasetStats,
    pub report: ValidationReport,
    pub meta: DatasetMeta,
}

impl LoadedDataset {
    pub fn video(&self, id: &str) -> Vec<&FrameAnnotation> {
        self.frames.iter().filter(|f| f.video_id == id).collect()
    }

    pub fn by_video(&self) -> BTreeMap<&str, Vec<&FrameAnnotation>> {
        let mut map: BTreeMap<&str, Vec<&FrameAnnotation>> = BTreeMap::new();
        for f in &self.frames {
            map.entry(f.video_id.as_str()).or_default().push(f);
        }
        map
    }
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta, DatasetError> {
    let path = root.join(META_FILE);
    if !path.exists() {
        return Ok(DatasetMeta::default());
    }
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        path,
        message: e.to_string(),
    })
}

fn annotation_files(root: &Path) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    let dir = root.join(ANNOTATIONS_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| io_error(&dir, e))? {
        let path = entry.map_err(|e| io_error(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.push((stem.to_string(), path.clone()));
            }
        }
    }
    files.sort();
    Ok(files)
}

type VideoRecords = Result<Vec<FrameRecord>, RecordError>;

fn read_video(video: &str, path: &Path) -> VideoRecords {
    let fail = |kind| RecordError {
        video: video.to_string(),
        frame: None,
        kind,
    };
    let text = fs::read_to_string(path).map_err(|e| fail(RecordErrorKind::Io(e.to_string())))?;
    let mut records: Vec<FrameRecord> =
        serde_json::from_str(&text).map_err(|e| fail(RecordErrorKind::Schema(e.to_string())))?;
    records.sort_by_key(|r| r.frame);
    Ok(records)
}

fn first_resolution(videos: &[(String, VideoRecords)]) -> Option<[usize; 2]> {
    videos
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .flatten()
        .flat_map(|r| &r.triplets)
        .map(|t| t.inst_mask.size)
        .next()
}

fn resolve_triplet(space: &LabelSpace, ivt: IvtRef) -> Option<usize> {
    match ivt {
        IvtRef::Id(id) => (id < space.num_triplets()).then_some(id),
        IvtRef::Components([i, v, t]) => space.triplet_id(Ivt::new(i, v, t)).ok(),
    }
}

fn validate_record(
    video: &str,
    record: &FrameRecord,
    space: &LabelSpace,
    resolution: Option<[usize; 2]>,
) -> Result<FrameAnnotation, RecordError> {
    let fail = |kind| RecordError {
        video: video.to_string(),
        frame: Some(record.frame),
        kind,
    };
    if record.phase >= space.phases().len() {
        return Err(fail(RecordErrorKind::PhaseOutOfRange(record.phase)));
    }
    let mut triplets = Vec::with_capacity(record.triplets.len());
    for t in &record.triplets {
        let triplet_id = resolve_triplet(space, t.ivt).ok_or_else(|| fail(RecordErrorKind::InvalidTriplet(t.ivt)))?;
        for (which, m) in [("instrument", &t.inst_mask), ("target", &t.target_mask)] {
            if let Some(expected) = resolution {
                if m.size != expected {
                    return Err(fail(RecordErrorKind::Resolution {
                        which,
                        expected,
                        found: m.size,
                    }));
                }
            }
            rle_decode(m).map_err(|source| fail(RecordErrorKind::Rle { which, source }))?;
        }
        triplets.push(TripletAnnotation {
            triplet_id,
            instrument_mask: t.inst_mask.clone(),
            target_mask: t.target_mask.clone(),
        });
    }
    Ok(FrameAnnotation {
        video_id: video.to_string(),
        frame_index: record.frame,
        phase: record.phase,
        triplets,
        narrative: record.narrative.clone(),
    })
}

/// Loads and validates every annotation file under `root`.
///
/// Invalid records are reported and skipped; with `strict`, the first error
/// in (video, frame) order is returned instead.
pub fn load_dataset(root: &Path, space: &LabelSpace, options: LoadOptions) -> Result<LoadedDataset, DatasetError> {
    let meta = read_meta(root)?;
    let files = annotation_files(root)?;
    let videos: Vec<(String, VideoRecords)> = files
        .par_iter()
        .map(|(video, path)| (video.clone(), read_video(video, path)))
        .collect();
    let resolution = meta.resolution.or_else(|| first_resolution(&videos));

    let checked: Vec<Vec<Result<FrameAnnotation, RecordError>>> = videos
        .par_iter()
        .map(|(video, records)| match records {
            Err(e) => vec![Err(e.clone())],
            Ok(records) => {
                let mut out = Vec::with_capacity(records.len());
                let mut prev = None;
                for r in records {
                    if prev == Some(r.frame) {
                        out.push(Err(RecordError {
                            video: video.clone(),
                            frame: Some(r.frame),
                            kind: RecordErrorKind::DuplicateFrame,
                        }));
                        continue;
                    }
                    prev = Some(r.frame);
                    out.push(validate_record(video, r, space, resolution));
                }
                out
            }
        })
        .collect();

    let mut frames = Vec::new();
    let mut report = ValidationReport::default();
    for result in checked.into_iter().flatten() {
        match result {
            Ok(frame) => frames.push(frame),
            Err(e) if options.strict => return Err(DatasetError::Record(e)),
            Err(e) => report.errors.push(e),
        }
    }
    let stats = DatasetStats::compute(&frames, space, resolution);
    Ok(LoadedDataset {
        frames,
        stats,
        report,
        meta: DatasetMeta { resolution, ..meta },
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DatasetError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

/// Writes one video's annotation file; frames are written in the given order.
pub fn write_video(root: &Path, video: &str, frames: &[FrameAnnotation]) -> Result<(), DatasetError> {
    let dir = root.join(ANNOTATIONS_DIR);
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let records: Vec<FrameRecord> = frames
        .iter()
        .map(|f| FrameRecord {
            frame: f.frame_index,
            phase: f.phase,
            triplets: f
                .triplets
                .iter()
                .map(|t| TripletRecord {
                    ivt: IvtRef::Id(t.triplet_id),
                    inst_mask: t.instrument_mask.clone(),
                    target_mask: t.target_mask.clone(),
                })
                .collect(),
            narrative: f.narrative.clone(),
        })
        .collect();
    write_json(&dir.join(format!("{video}.json")), &records)
}

pub fn write_meta(root: &Path, meta: &DatasetMeta) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
    write_json(&root.join(META_FILE), meta)
}

pub fn write_label_space(root: &Path, space: &LabelSpace) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
    let path = root.join(LABEL_SPACE_FILE);
    fs::write(&path, space.to_json()).map_err(|e| io_error(&path, e))
}

/// Per-frame feature grids, `h x w x d` each.
pub fn write_features(root: &Path, video: &str, grids: &[Array3<f64>]) -> Result<(), DatasetError> {
    let dir = root.join(FEATURES_DIR);
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut bytes = Vec::with_capacity(grids.iter().map(|g| g.len() * 8).sum());
    for g in grids {
        for v in g.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(format!("{video}.f64"));
    fs::write(&path, bytes).map_err(|e| io_error(&path, e))
}

pub fn read_features(root: &Path, video: &str, grid: [usize; 3]) -> Result<Vec<Array3<f64>>, DatasetError> {
    let path = root.join(FEATURES_DIR).join(format!("{video}.f64"));
    let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
    let per_frame = grid.iter().product::<usize>() * 8;
    if per_frame == 0 || bytes.len() % per_frame != 0 {
        return Err(DatasetError::Schema {
            path,
            message: format!("{} bytes is not a whole number of {grid:?} grids", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(per_frame)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            Array3::from_shape_vec((grid[0], grid[1], grid[2]), values).expect("sized chunk")
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FoldError {
    #[error("video {video} is listed in folds {first} and {second}")]
    Overlap { video: String, first: u32, second: u32 },
    #[error("video {0} is not assigned to any fold")]
    Missing(String),
    #[error("fold config lists unknown video {0}")]
    Unknown(String),
    #[error("fold id {0} must be positive")]
    InvalidId(u32),
    #[error("fold {0} is not defined")]
    NoSuchFold(u32),
    #[error("malformed fold config: {0}")]
    Schema(String),
}

/// Fold id to test videos.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FoldSplit {
    pub folds: BTreeMap<u32, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold: u32,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn from_json(text: &str) -> Result<Self, FoldError> {
        serde_json::from_str(text).map_err(|e| FoldError::Schema(e.to_string()))
    }

    /// Official five-fold assignment of the 45 CholecT45 videos.
    pub fn cholect45() -> Self {
        Self::from_json(CHOLECT45_FOLDS).expect("shipped fold config is valid")
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Ok(Self::from_json(&text)?)
    }

    pub fn write(&self, root: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
        write_json(&root.join(FOLDS_FILE), self)
    }

    pub fn videos(&self) -> Vec<String> {
        let mut v: Vec<String> = self.folds.values().flatten().cloned().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn fold_ids(&self) -> Vec<u32> {
        self.folds.keys().copied().collect()
    }
}

/// Train/test videos for every fold: test is the fold's videos, train the rest.
pub fn split_folds(videos: &[String], config: &FoldSplit) -> Result<Vec<FoldAssignment>, FoldError> {
    let mut owner: BTreeMap<&str, u32> = BTreeMap::new();
    for (&fold, list) in &config.folds {
        if fold == 0 {
            return Err(FoldError::InvalidId(fold));
        }
        for v in list {
            if let Some(first) = owner.insert(v.as_str(), fold) {
                return Err(FoldError::Overlap {
                    video: v.clone(),
                    first,
                    second: fold,
                });
            }
        }
    }
    let known: BTreeSet<&str> = videos.iter().map(String::as_str).collect();
    if let Some(v) = videos.iter().find(|v| !owner.contains_key(v.as_str())) {
        return Err(FoldError::Missing(v.clone()));
    }
    if let Some(v) = owner.keys().find(|v| !known.contains(*v)) {
        return Err(FoldError::Unknown(v.to_string()));
    }
    let mut sorted: Vec<String> = videos.to_vec();
    sorted.sort();
    Ok(config
        .folds
        .iter()
        .map(|(&fold, test)| {
            let mut test = test.clone();
            test.sort();
            FoldAssignment {
                fold,
                train: sorted.iter().filter(|v| owner[v.as_str()] != fold).cloned().collect(),
                test,
            }
        })
        .collect())
}
