//! Synthetic surgical-scene videos with phase-conditioned triplets.
//!
//! Feature channels of every grid cell:
//!
//! - `0`: frame gain `G_t` plus heavy per-cell noise, so the gain is only
//!   recoverable by pooling over the frame;
//! - `1`: a per-phase tint plus noise;
//! - `2..`: one signature channel per instrument and per target in use.
//!
//! Each video draws a contrast `c` per entity. An entity of a frame occupies
//! a rectangle whose signature channel is raised by `c * G_t`; it may also
//! leave a weaker decoy patch (`(c - decoy_gap) * G_t`) that is not part of
//! its mask. Separating the two needs both the frame gain and the entity's
//! contrast, which a single frame only reveals up to the unknown region size.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{
    rle_encode, write_features, write_label_space, write_meta, write_video, DatasetError, DatasetMeta,
    FoldSplit, FrameAnnotation, TripletAnnotation,
};
use crate::mask::BinaryMask;
use crate::vocab::LabelSpace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid probability table: {0}")]
    Table(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("could not place {0} non-overlapping regions on the grid")]
    Crowded(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub videos: usize,
    /// Frames per video.
    pub frames: usize,
    /// `[h, w, d]`.
    pub grid: [usize; 3],
    /// `[H, W]`.
    pub resolution: [usize; 2],
    /// Rows per phase over the valid triplets; `None` uses [`default_phase_table`].
    pub phase_table: Option<Vec<Vec<f64>>>,
    /// Probability of 0, 1, 2, ... triplets in a frame.
    pub count_probs: Vec<f64>,
    /// Range of the per-video base gain.
    pub gain_range: [f64; 2],
    /// Per-frame relative gain change is uniform in `[-drift, drift]`.
    pub drift: f64,
    /// The gain channel reads the frame gain times a factor uniform in
    /// `[1 - flicker, 1 + flicker]`, drawn per frame.
    pub flicker: f64,
    pub gain_noise: f64,
    pub tint_noise: f64,
    pub noise: f64,
    /// Range of the per-video, per-entity contrast.
    pub contrast_range: [f64; 2],
    pub decoy_prob: f64,
    /// Decoy intensity is the entity contrast minus this gap.
    pub decoy_gap: f64,
    /// Side lengths of entity rectangles, in cells.
    pub region: [usize; 2],
    pub folds: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            videos: 20,
            frames: 16,
            grid: [8, 8, 8],
            resolution: [32, 32],
            phase_table: None,
            count_probs: vec![0.1, 0.55, 0.35],
            gain_range: [0.5, 1.5],
            drift: 0.2,
            flicker: 0.4,
            gain_noise: 0.4,
            tint_noise: 0.3,
            noise: 0.05,
            contrast_range: [1.0, 1.0],
            decoy_prob: 1.0,
            decoy_gap: 0.4,
            region: [2, 3],
            folds: 5,
        }
    }
}

/// Phase-conditioned triplet table of the synthetic videos.
///
/// For the toy label space this is a fixed table with one preparation-only
/// and one dissection-only triplet; for other spaces each phase spreads its
/// mass evenly over a contiguous band of triplet ids.
pub fn default_phase_table(space: &LabelSpace) -> Vec<Vec<f64>> {
    if *space == LabelSpace::toy() {
        return vec![
            vec![0.5, 0.35, 0.0, 0.0, 0.0, 0.15],
            vec![0.2, 0.0, 0.5, 0.3, 0.0, 0.0],
            vec![0.0, 0.15, 0.0, 0.25, 0.6, 0.0],
        ];
    }
    let (p, k) = (space.phases().len(), space.num_triplets());
    (0..p)
        .map(|ph| {
            let lo = ph * k / p;
            let hi = ((ph + 1) * k / p).max(lo + 1).min(k);
            let mut row = vec![0.0; k];
            for v in &mut row[lo..hi] {
                *v = 1.0 / (hi - lo) as f64;
            }
            row
        })
        .collect()
}

impl SynthConfig {
    pub fn table(&self, space: &LabelSpace) -> Result<Vec<Vec<f64>>, SynthError> {
        let table = self.phase_table.clone().unwrap_or_else(|| default_phase_table(space));
        if table.len() != space.phases().len() {
            return Err(SynthError::Table(format!(
                "{} rows for {} phases",
                table.len(),
                space.phases().len()
            )));
        }
        for (p, row) in table.iter().enumerate() {
            check_distribution(row, space.num_triplets()).map_err(|e| SynthError::Table(format!("phase {p}: {e}")))?;
        }
        Ok(table)
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<Vec<Vec<f64>>, SynthError> {
        let [h, w, d] = self.grid;
        let [hh, ww] = self.resolution;
        let bad = |m: String| Err(SynthError::Config(m));
        if self.videos == 0 || self.frames == 0 || h == 0 || w == 0 || hh == 0 || ww == 0 {
            return bad("sizes must be positive".into());
        }
        if hh % h != 0 || ww % w != 0 {
            return bad(format!("resolution {hh}x{ww} is not a multiple of grid {h}x{w}"));
        }
        if self.frames < space.phases().len() {
            return bad(format!("{} frames cannot hold {} phases", self.frames, space.phases().len()));
        }
        let [r0, r1] = self.region;
        if r0 == 0 || r0 > r1 || r1 > h.min(w) {
            return bad(format!("region sides {r0}..={r1} do not fit a {h}x{w} grid"));
        }
        if self.folds == 0 || self.folds > self.videos {
            return bad(format!("{} folds for {} videos", self.folds, self.videos));
        }
        if self.gain_range[0] <= 0.0 || self.gain_range[0] > self.gain_range[1] || !(0.0..1.0).contains(&self.drift) {
            return bad("gain range must be positive and drift in [0, 1)".into());
        }
        for (name, v) in [
            ("flicker", self.flicker),
            ("gain_noise", self.gain_noise),
            ("tint_noise", self.tint_noise),
            ("noise", self.noise),
            ("decoy_gap", self.decoy_gap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        let [c0, c1] = self.contrast_range;
        if !(c0.is_finite() && c1.is_finite() && c0 > 0.0 && c0 <= c1) {
            return bad("contrast range must be positive and ordered".into());
        }
        if !(0.0..=1.0).contains(&self.decoy_prob) {
            return bad("decoy_prob must lie in [0, 1]".into());
        }
        check_distribution(&self.count_probs, self.count_probs.len())
            .map_err(|e| SynthError::Table(format!("count_probs: {e}")))?;
        let table = self.table(space)?;
        let channels = signature_channels(space, &table);
        let needed = 2 + channels.instruments.len() + channels.targets.len();
        if d < needed {
            return bad(format!("{d} feature channels, {needed} needed"));
        }
        Ok(table)
    }
}

fn check_distribution(row: &[f64], len: usize) -> Result<(), String> {
    if row.len() != len {
        return Err(format!("{} entries, expected {len}", row.len()));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("entries must be finite and non-negative".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Feature channel of each entity that occurs in the table's support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureChannels {
    pub instruments: BTreeMap<usize, usize>,
    pub targets: BTreeMap<usize, usize>,
}

pub fn signature_channels(space: &LabelSpace, table: &[Vec<f64>]) -> SignatureChannels {
    let mut inst = std::collections::BTreeSet::new();
    let mut tgt = std::collections::BTreeSet::new();
    for row in table {
        for (k, &p) in row.iter().enumerate() {
            if p > 0.0 {
                inst.insert(space.valid_triplets()[k].instrument);
                tgt.insert(space.valid_triplets()[k].target);
            }
        }
    }
    let instruments: BTreeMap<usize, usize> = inst.into_iter().enumerate().map(|(c, i)| (i, 2 + c)).collect();
    let base = 2 + instruments.len();
    let targets = tgt.into_iter().enumerate().map(|(c, o)| (o, base + c)).collect();
    SignatureChannels { instruments, targets }
}

/// Triplets of one frame: the count is drawn from `count_probs`, then each
/// triplet from the phase row, restricted to instruments and targets not
/// yet used in the frame. Stops early when nothing compatible remains.
pub fn sample_frame_triplets(
    rng: &mut impl Rng,
    row: &[f64],
    count_probs: &[f64],
    space: &LabelSpace,
) -> Vec<usize> {
    let n = WeightedIndex::new(count_probs).map_or(0, |d| d.sample(rng));
    let valid = space.valid_triplets();
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let weights: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let clash = chosen
                    .iter()
                    .any(|&c| valid[c].instrument == valid[k].instrument || valid[c].target == valid[k].target);
                if clash {
                    0.0
                } else {
                    p
                }
            })
            .collect();
        match WeightedIndex::new(&weights) {
            Ok(d) => chosen.push(d.sample(rng)),
            Err(_) => break,
        }
    }
    chosen
}

/// Phase of each frame: `P - 1` distinct cut points split the video into
/// contiguous, non-empty phases in label order.
pub fn sample_phases(rng: &mut impl Rng, frames: usize, phases: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = sample(rng, frames - 1, phases - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    (0..frames).map(|t| cuts.iter().filter(|&&c| c <= t).count()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Rect {
    fn cells(self) -> impl Iterator<Item = (usize, usize)> {
        (self.top..self.top + self.height).flat_map(move |r| (self.left..self.left + self.width).map(move |c| (r, c)))
    }
}

fn place(rng: &mut impl Rng, occupied: &mut [bool], grid: (usize, usize), sides: [usize; 2], placed: usize) -> Result<Rect, SynthError> {
    let (h, w) = grid;
    for _ in 0..500 {
        let height = rng.random_range(sides[0]..=sides[1]);
        let width = rng.random_range(sides[0]..=sides[1]);
        let rect = Rect {
            top: rng.random_range(0..=h - height),
            left: rng.random_range(0..=w - width),
            height,
            width,
        };
        if rect.cells().all(|(r, c)| !occupied[r * w + c]) {
            for (r, c) in rect.cells() {
                occupied[r * w + c] = true;
            }
            return Ok(rect);
        }
    }
    Err(SynthError::Crowded(placed + 1))
}

fn rect_mask(rect: Rect, grid: (usize, usize), resolution: (usize, usize)) -> BinaryMask {
    let (sh, sw) = (resolution.0 / grid.0, resolution.1 / grid.1);
    BinaryMask::from_fn(resolution.0, resolution.1, |r, c| {
        let (gr, gc) = (r / sh, c / sw);
        gr >= rect.top && gr < rect.top + rect.height && gc >= rect.left && gc < rect.left + rect.width
    })
}

/// A generated dataset: annotations, per-frame features and the fold split.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub frames: Vec<FrameAnnotation>,
    pub features: BTreeMap<String, Vec<Array3<f64>>>,
    pub folds: FoldSplit,
    pub meta: DatasetMeta,
}

impl SynthDataset {
    pub fn video_ids(&self) -> Vec<String> {
        self.features.keys().cloned().collect()
    }

    /// Writes the dataset in the on-disk layout read by `dataset_io::load_dataset`.
    pub fn write(&self, root: &Path, space: &LabelSpace) -> Result<(), DatasetError> {
        write_label_space(root, space)?;
        write_meta(root, &self.meta)?;
        self.folds.write(root)?;
        for (video, grids) in &self.features {
            let frames: Vec<FrameAnnotation> = self.frames.iter().filter(|f| &f.video_id == video).cloned().collect();
            write_video(root, video, &frames)?;
            write_features(root, video, grids)?;
        }
        Ok(())
    }
}

pub fn video_id(v: usize) -> String {
    format!("SYN{:02}", v + 1)
}

pub fn generate_synthetic(config: &SynthConfig, space: &LabelSpace) -> Result<SynthDataset, SynthError> {
    let table = config.validate(space)?;
    let channels = signature_channels(space, &table);
    let [h, w, d] = config.grid;
    let resolution = (config.resolution[0], config.resolution[1]);
    let phases = space.phases().len();
    let tint = |p: usize| if phases > 1 { -0.6 + 1.2 * p as f64 / (phases - 1) as f64 } else { 0.0 };
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut frames = Vec::with_capacity(config.videos * config.frames);
    let mut features = BTreeMap::new();
    for v in 0..config.videos {
        let id = video_id(v);
        let base_gain = rng.random_range(config.gain_range[0]..=config.gain_range[1]);
        let mut contrast = vec![0.0; d];
        for c in contrast.iter_mut().skip(2) {
            *c = rng.random_range(config.contrast_range[0]..=config.contrast_range[1]);
        }
        let phase_seq = sample_phases(&mut rng, config.frames, phases);
        let mut grids = Vec::with_capacity(config.frames);
        for (t, &phase) in phase_seq.iter().enumerate() {
            let gain = base_gain * (1.0 + rng.random_range(-config.drift..=config.drift));
            let reading = gain * (1.0 + rng.random_range(-config.flicker..=config.flicker));
            let triplets = sample_frame_triplets(&mut rng, &table[phase], &config.count_probs, space);
            let mut grid = Array3::from_shape_fn((h, w, d), |(_, _, k)| match k {
                0 => reading + config.gain_noise * unit.sample(&mut rng),
                1 => tint(phase) + config.tint_noise * unit.sample(&mut rng),
                _ => config.noise * unit.sample(&mut rng),
            });
            let mut occupied = vec![false; h * w];
            let mut annotations = Vec::with_capacity(triplets.len());
            let mut entities = Vec::new();
            for &k in &triplets {
                let ivt = space.valid_triplets()[k];
                let mut masks = [BinaryMask::new(0, 0), BinaryMask::new(0, 0)];
                for (slot, channel) in [channels.instruments[&ivt.instrument], channels.targets[&ivt.target]]
                    .into_iter()
                    .enumerate()
                {
                    let rect = place(&mut rng, &mut occupied, (h, w), config.region, entities.len())?;
                    for (r, c) in rect.cells() {
                        grid[[r, c, channel]] += contrast[channel] * gain;
                    }
                    masks[slot] = rect_mask(rect, (h, w), resolution);
                    entities.push(channel);
                }
                let [instrument_mask, target_mask] = masks;
                annotations.push(TripletAnnotation {
                    triplet_id: k,
                    instrument_mask: rle_encode(&instrument_mask),
                    target_mask: rle_encode(&target_mask),
                });
            }
            for &channel in &entities {
                if rng.random_bool(config.decoy_prob) {
                    let sides = [1, 1];
                    let mut rect = place(&mut rng, &mut occupied, (h, w), sides, entities.len())?;
                    if rect.left + 1 < w && !occupied[rect.top * w + rect.left + 1] && rng.random_bool(0.5) {
                        occupied[rect.top * w + rect.left + 1] = true;
                        rect.width = 2;
                    }
                    let level = (contrast[channel] - config.decoy_gap).max(0.0);
                    for (r, c) in rect.cells() {
                        grid[[r, c, channel]] += level * gain;
                    }
                }
            }
            frames.push(FrameAnnotation {
                video_id: id.clone(),
                frame_index: t,
                phase,
                triplets: annotations,
                narrative: None,
            });
            grids.push(grid);
        }
        features.insert(id, grids);
    }

    let mut folds = BTreeMap::new();
    for v in 0..config.videos {
        folds.entry((v % config.folds + 1) as u32).or_insert_with(Vec::new).push(video_id(v));
    }
    Ok(SynthDataset {
        frames,
        features,
        folds: FoldSplit { folds },
        meta: DatasetMeta {
            resolution: Some(config.resolution),
            grid: Some(config.grid),
        },
    })
}
