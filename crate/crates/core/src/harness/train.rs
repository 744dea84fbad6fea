//! End-to-end training and evaluation of the toy model.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{generate_synthetic, SynthConfig, SynthDataset};
use super::HarnessError;
use crate::dataset_io::{self, rle_decode, FoldSplit, FrameAnnotation, LoadOptions};
use crate::fusion::FusionError;
use crate::losses::{LossError, LossParts, LossWeights};
use crate::mask::BinaryMask;
use crate::metrics::{
    phase_metrics, segmentation_metrics, triplet_ap_suite, MetricReport, PhaseSequencePair, TripletScoreSet,
};
use crate::nn::Params;
use crate::toy_model::{
    predict, Ablation, ClipPrediction, ClipSample, FrameTarget, ModelConfig, ModelError, ModelShape, Objective, TemplateVocab,
    ToyModel, VideoClip,
};
use crate::vocab::{load_label_space, LabelSpace};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fold held out for evaluation.
    pub test_fold: u32,
    /// Loss is recorded every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.1,
            optimizer: Optimizer::Gd,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            test_fold: 1,
            log_every: 10,
        }
    }
}

/// Everything a run depends on. The master seed drives both the synthetic
/// data and the model initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Label space file; the toy space when absent.
    pub label_space: Option<PathBuf>,
    /// Dataset directory; synthesized from `synth` when absent.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label_space: None,
            dataset: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl ExperimentConfig {
    /// 20 videos of 16 frames, 8x8x8 grids, 32x32 masks, toy label space.
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn init_seed(&self) -> u64 {
        splitmix(self.seed ^ 0x5eed_0f_1417)
    }

    pub fn space(&self) -> Result<LabelSpace, HarnessError> {
        match (&self.label_space, &self.dataset) {
            (Some(p), _) => Ok(load_label_space(p)?),
            (None, Some(root)) if root.join(dataset_io::LABEL_SPACE_FILE).exists() => {
                Ok(load_label_space(root.join(dataset_io::LABEL_SPACE_FILE))?)
            }
            _ => Ok(LabelSpace::toy()),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.weights.validate()?;
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) || t.log_every == 0 {
            return Err(HarnessError::Config("lr must be positive and log_every non-zero".into()));
        }
        let m = &self.model;
        if m.d_enc == 0 || m.d_llm == 0 || m.d_sam == 0 || m.proj_hidden == 0 {
            return Err(HarnessError::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over the parameter bit patterns.
pub fn parameter_digest(model: &ToyModel) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in model.flatten() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Clips ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub space: LabelSpace,
    pub samples: BTreeMap<String, ClipSample>,
    pub folds: FoldSplit,
    pub grid: [usize; 3],
    /// On-disk frame index of every clip frame.
    pub frame_indices: BTreeMap<String, Vec<usize>>,
}

impl PreparedData {
    pub fn select(&self, videos: &[String]) -> Vec<ClipSample> {
        videos.iter().filter_map(|v| self.samples.get(v).cloned()).collect()
    }
}

fn frame_target(f: &FrameAnnotation) -> Result<FrameTarget, HarnessError> {
    let ids = f.triplet_ids();
    let mut masks: Vec<Option<(BinaryMask, BinaryMask)>> = vec![None; ids.len()];
    for t in &f.triplets {
        let slot = ids.iter().position(|&k| k == t.triplet_id).expect("id listed");
        let i = rle_decode(&t.instrument_mask).map_err(|e| HarnessError::Data(e.to_string()))?;
        let o = rle_decode(&t.target_mask).map_err(|e| HarnessError::Data(e.to_string()))?;
        match &mut masks[slot] {
            Some((a, b)) => {
                a.union_with(&i);
                b.union_with(&o);
            }
            none => *none = Some((i, o)),
        }
    }
    Ok(FrameTarget {
        phase: f.phase,
        triplets: ids,
        masks: masks.into_iter().map(|m| m.expect("filled")).collect(),
    })
}

pub fn prepare_dataset(
    frames: &[FrameAnnotation],
    features: &BTreeMap<String, Vec<ndarray::Array3<f64>>>,
    folds: FoldSplit,
    resolution: [usize; 2],
    space: &LabelSpace,
    k_max: usize,
) -> Result<PreparedData, HarnessError> {
    let mut by_video: BTreeMap<&str, Vec<&FrameAnnotation>> = BTreeMap::new();
    for f in frames {
        by_video.entry(f.video_id.as_str()).or_default().push(f);
    }
    let mut samples = BTreeMap::new();
    let mut frame_indices = BTreeMap::new();
    let mut grid = [0; 3];
    for (video, mut list) in by_video {
        list.sort_by_key(|f| f.frame_index);
        let grids = features
            .get(video)
            .ok_or_else(|| HarnessError::Data(format!("no features for {video}")))?;
        if grids.len() != list.len() {
            return Err(HarnessError::Data(format!(
                "{video}: {} feature grids for {} frames",
                grids.len(),
                list.len()
            )));
        }
        let (h, w, d) = grids[0].dim();
        grid = [h, w, d];
        let clip = VideoClip {
            frames: grids.clone(),
            resolution: (resolution[0], resolution[1]),
        };
        let targets = list.iter().map(|f| frame_target(f)).collect::<Result<_, _>>()?;
        let sample = ClipSample::new(video.to_string(), clip, targets, space, k_max)?;
        samples.insert(video.to_string(), sample);
        frame_indices.insert(video.to_string(), list.iter().map(|f| f.frame_index).collect());
    }
    Ok(PreparedData {
        space: space.clone(),
        samples,
        folds,
        grid,
        frame_indices,
    })
}

pub fn prepare_synthetic(data: &SynthDataset, space: &LabelSpace, k_max: usize) -> Result<PreparedData, HarnessError> {
    let resolution = data.meta.resolution.unwrap_or([0, 0]);
    prepare_dataset(&data.frames, &data.features, data.folds.clone(), resolution, space, k_max)
}

/// Loads or synthesizes the experiment's dataset.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData, HarnessError> {
    let space = config.space()?;
    match &config.dataset {
        None => {
            let synth = SynthConfig {
                seed: config.seed,
                ..config.synth.clone()
            };
            let data = generate_synthetic(&synth, &space)?;
            prepare_synthetic(&data, &space, config.model.k_max)
        }
        Some(root) => {
            let loaded = dataset_io::load_dataset(root, &space, LoadOptions { strict: true })?;
            let grid = loaded
                .meta
                .grid
                .ok_or_else(|| HarnessError::Data("meta.json declares no feature grid".into()))?;
            let resolution = loaded
                .meta
                .resolution
                .ok_or_else(|| HarnessError::Data("dataset has no mask resolution".into()))?;
            let mut features = BTreeMap::new();
            for video in loaded.stats.videos.iter() {
                features.insert(video.clone(), dataset_io::read_features(root, video, grid)?);
            }
            let folds = FoldSplit::load(&root.join(dataset_io::FOLDS_FILE))?;
            prepare_dataset(&loaded.frames, &features, folds, resolution, &space, config.model.k_max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub parts: LossParts,
}

/// Reproducible record of one training run. Wall-clock time is kept out of
/// the manifest so that reruns compare bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub ablation: Ablation,
    pub fold: u32,
    pub seed: u64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub config: ExperimentConfig,
    /// Loss weights after the ablation is applied.
    pub weights: LossWeights,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
    pub parameters: usize,
    pub loss_history: Vec<LossRecord>,
    pub final_loss: LossRecord,
    pub metrics: MetricReport,
    pub parameter_digest: String,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub model: ToyModel,
    pub predictions: Vec<(String, ClipPrediction)>,
    pub seconds: f64,
}

/// Metrics of `model` on `samples`.
pub fn evaluate(
    model: &ToyModel,
    samples: &[ClipSample],
    space: &LabelSpace,
    ablation: Ablation,
) -> Result<(MetricReport, Vec<(String, ClipPrediction)>), HarnessError> {
    let predictions: Vec<(String, ClipPrediction)> = samples
        .iter()
        .map(|s| Ok((s.video_id.clone(), predict(model, s, space, ablation)?)))
        .collect::<Result<_, HarnessError>>()?;
    let mut report = MetricReport::default();
    if samples.is_empty() {
        return Ok((report, predictions));
    }
    let pairs: Vec<PhaseSequencePair> = samples
        .iter()
        .zip(&predictions)
        .map(|(s, (_, p))| PhaseSequencePair {
            gt: s.frames.iter().map(|f| f.phase).collect(),
            pred: p.phases.clone(),
        })
        .collect();
    report.set_phase(phase_metrics(&pairs, space.phases().len())?);
    let mut scores = TripletScoreSet::default();
    for (s, (_, p)) in samples.iter().zip(&predictions) {
        for (f, sc) in s.frames.iter().zip(&p.scores) {
            scores.push(sc.clone(), f.triplets.clone());
        }
    }
    report.set_triplet(&triplet_ap_suite(&scores, space)?);
    if ablation.grounding() {
        let frames: Vec<_> = predictions.iter().flat_map(|(_, p)| p.masks.iter().cloned()).collect();
        report.set_segmentation(&segmentation_metrics(&frames)?);
    }
    Ok((report, predictions))
}

fn is_non_finite(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::NonFinite | ModelError::Loss(LossError::NonFinite(_)) | ModelError::Fusion(FusionError::NonFinite)
    )
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains on every fold except `config.train.test_fold` and evaluates on it.
pub fn train_prepared(
    config: &ExperimentConfig,
    data: &PreparedData,
    ablation: Ablation,
) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let videos: Vec<String> = data.samples.keys().cloned().collect();
    let assignment = dataset_io::split_folds(&videos, &data.folds)?
        .into_iter()
        .find(|a| a.fold == config.train.test_fold)
        .ok_or(HarnessError::NoSuchFold(config.train.test_fold))?;
    let train = data.select(&assignment.train);
    let test = data.select(&assignment.test);

    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed());
    let shape = ModelShape::new(data.grid[2], &data.space);
    let mut model = ToyModel::init(&mut rng, shape, config.model);
    let vocab = TemplateVocab::new(&data.space, config.model.k_max);
    let objective = Objective {
        space: &data.space,
        vocab: &vocab,
        weights: config.weights,
        ablation,
    };

    let tc = &config.train;
    let mut history = Vec::new();
    let mut adam = Adam {
        m: vec![0.0; model.num_params()],
        v: vec![0.0; model.num_params()],
        t: 0,
    };
    let mut last = None;
    let batch = objective.batch(&train)?;
    for step in 0..=tc.steps {
        let (total, parts, grads) = if train.is_empty() {
            (0.0, LossParts::default(), model.zeros_like())
        } else {
            match objective.evaluate_batch(&model, &train, &batch) {
                Ok(v) => v,
                Err(e) if is_non_finite(&e) => return Err(HarnessError::Diverged { step }),
                Err(e) => return Err(e.into()),
            }
        };
        if !total.is_finite() || !grads.all_finite() {
            return Err(HarnessError::Diverged { step });
        }
        let record = LossRecord { step, total, parts };
        if step % tc.log_every == 0 || step == tc.steps {
            history.push(record);
        }
        last = Some(record);
        if step == tc.steps {
            break;
        }
        match tc.optimizer {
            Optimizer::Gd => model.add_scaled(-tc.lr, &grads),
            Optimizer::Adam => {
                adam.t += 1;
                let g = grads.flatten();
                let mut flat = model.flatten();
                let (c1, c2) = (1.0 - tc.beta1.powi(adam.t), 1.0 - tc.beta2.powi(adam.t));
                for i in 0..flat.len() {
                    adam.m[i] = tc.beta1 * adam.m[i] + (1.0 - tc.beta1) * g[i];
                    adam.v[i] = tc.beta2 * adam.v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                    flat[i] -= tc.lr * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + tc.adam_eps);
                }
                model.load_flat(&flat);
            }
        }
    }

    let (metrics, predictions) = evaluate(&model, &test, &data.space, ablation)?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        ablation,
        fold: config.train.test_fold,
        seed: config.seed,
        data_seed: config.seed,
        init_seed: config.init_seed(),
        config: config.clone(),
        weights: ablation.weights(config.weights),
        train_videos: assignment.train,
        test_videos: assignment.test,
        parameters: model.num_params(),
        loss_history: history,
        final_loss: last.expect("at least one step"),
        metrics,
        parameter_digest: parameter_digest(&model),
    };
    Ok(RunOutcome {
        manifest,
        model,
        predictions,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn train(config: &ExperimentConfig, ablation: Ablation) -> Result<RunOutcome, HarnessError> {
    let data = prepare(config)?;
    train_prepared(config, &data, ablation)
}

/// Metric(s) an ablation is expected not to improve.
pub fn affected_metrics(ablation: Ablation) -> &'static [&'static str] {
    match ablation {
        Ablation::Full => &[],
        Ablation::NoResidualFusion | Ablation::NoPerFrameToken | Ablation::NoGrounding => &["miou"],
        Ablation::NoPhase => &["accuracy"],
        Ablation::NoTriplet => &["ap_ivt"],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub ablation: Ablation,
    pub metrics: MetricReport,
    pub parameter_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub ablation: Ablation,
    pub metric: String,
    /// Per seed: `(full, ablated)`; an absent ablated value counts as not higher.
    pub values: Vec<(u64, Option<f64>, Option<f64>)>,
    pub seeds_not_higher: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub checks: Vec<DirectionCheck>,
}

impl AblationStudy {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, seed: u64, ablation: Ablation) -> Option<&MetricReport> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.ablation == ablation)
            .map(|r| &r.metrics)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<20} {:>6} {:>9} {:>8} {:>8} {:>8}\n",
            "variant", "seed", "accuracy", "ap_ivt", "miou", "iou_i"
        );
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
        for r in &self.runs {
            out += &format!(
                "{:<20} {:>6} {:>9} {:>8} {:>8} {:>8}\n",
                r.ablation.name(),
                r.seed,
                pct(r.metrics.accuracy),
                pct(r.metrics.ap_ivt),
                pct(r.metrics.miou),
                pct(r.metrics.iou_i)
            );
        }
        for c in &self.checks {
            out += &format!(
                "{} {} <= full on {}/{} seeds: {}\n",
                c.ablation,
                c.metric,
                c.seeds_not_higher,
                c.values.len(),
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

/// Trains every `(seed, ablation)` pair in parallel and checks that no
/// ablation beats the full model on its affected metrics for a majority of seeds.
pub fn ablation_study(
    config: &ExperimentConfig,
    seeds: &[u64],
    ablations: &[Ablation],
) -> Result<AblationStudy, HarnessError> {
    let mut variants = vec![Ablation::Full];
    variants.extend(ablations.iter().copied().filter(|a| *a != Ablation::Full));
    let prepared: Vec<(u64, PreparedData)> = seeds
        .par_iter()
        .map(|&s| Ok((s, prepare(&config.with_seed(s))?)))
        .collect::<Result<_, HarnessError>>()?;
    let jobs: Vec<(usize, Ablation)> = (0..seeds.len())
        .flat_map(|i| variants.iter().map(move |&a| (i, a)))
        .collect();
    let runs: Vec<AblationRun> = jobs
        .par_iter()
        .map(|&(i, a)| {
            let (seed, data) = &prepared[i];
            let out = train_prepared(&config.with_seed(*seed), data, a)?;
            Ok(AblationRun {
                seed: *seed,
                ablation: a,
                metrics: out.manifest.metrics,
                parameter_digest: out.manifest.parameter_digest,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut study = AblationStudy {
        seeds: seeds.to_vec(),
        runs,
        checks: Vec::new(),
    };
    for &a in variants.iter().skip(1) {
        for &metric in affected_metrics(a) {
            let values: Vec<(u64, Option<f64>, Option<f64>)> = seeds
                .iter()
                .map(|&s| {
                    let full = study.get(s, Ablation::Full).and_then(|m| m.get(metric));
                    let abl = study.get(s, a).and_then(|m| m.get(metric));
                    (s, full, abl)
                })
                .collect();
            let not_higher = values
                .iter()
                .filter(|(_, f, x)| match (f, x) {
                    (_, None) => true,
                    (Some(f), Some(x)) => x <= f,
                    (None, Some(_)) => false,
                })
                .count();
            study.checks.push(DirectionCheck {
                ablation: a,
                metric: metric.to_string(),
                passed: 2 * not_higher > values.len(),
                seeds_not_higher: not_higher,
                values,
            });
        }
    }
    Ok(study)
}
