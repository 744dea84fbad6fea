//! Seeded finite-difference audit of every analytic gradient in the crate.

use std::fmt;

use ndarray::{array, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{central_differences, max_relative_error, FD_STEP, FD_TOLERANCE};
use crate::fusion::{
    group_occurrences, project_hidden, project_hidden_backward, residual_fuse, residual_fuse_backward, FusionMode,
    ProjectionParams, PromptBatch,
};
use crate::grammar::{EntityKind, SegMarker};
use crate::losses::{
    bce_grad, bce_loss, dice_from_logits, dice_grad, dice_loss, reweight_coefficients, term_coefficients, token_ce,
    EntMode, LossWeights, TokenTargets,
};
use crate::mask::BinaryMask;
use crate::nn::{random_matrix, sigmoid, Activation, Mlp, Params};
use crate::toy_model::{
    decode_backward, decode_cells, downsample_sum, reason, reason_backward, upsample, Ablation, ClipSample,
    FrameTarget, ModelConfig, ModelShape, Objective, ReasonerGrads, TemplateVocab, ToyDecoderParams, ToyModel,
    ToyReasonerParams, VideoClip,
};
use crate::vocab::LabelSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModule {
    Nn,
    Fusion,
    Losses,
    ToyModel,
}

impl GradModule {
    pub const ALL: [GradModule; 4] = [GradModule::Nn, GradModule::Fusion, GradModule::Losses, GradModule::ToyModel];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Nn => "nn",
            GradModule::Fusion => "fusion",
            GradModule::Losses => "losses",
            GradModule::ToyModel => "toy_model",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Worst relative error of one operation's gradient over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub module: GradModule,
    pub op: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

impl fmt::Display for OpCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}::{:<22} seeds {:>3}  max rel err {:.3e}  {}",
            self.module.name(),
            self.op,
            self.seeds,
            self.max_rel_err,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

struct Tally {
    module: GradModule,
    seeds: u64,
    ops: Vec<(&'static str, f64)>,
}

impl Tally {
    fn record(&mut self, op: &'static str, analytic: &[f64], numeric: &[f64]) {
        let err = max_relative_error(analytic, numeric);
        match self.ops.iter_mut().find(|(name, _)| *name == op) {
            Some((_, worst)) => *worst = worst.max(err),
            None => self.ops.push((op, err)),
        }
    }

    fn finish(self) -> Vec<OpCheck> {
        self.ops
            .into_iter()
            .map(|(op, max_rel_err)| OpCheck {
                module: self.module,
                op,
                seeds: self.seeds,
                max_rel_err,
            })
            .collect()
    }
}

/// Checks every gradient of `module` on `seeds` random instances each.
pub fn check_module(module: GradModule, seeds: u64) -> Vec<OpCheck> {
    let mut tally = Tally {
        module,
        seeds,
        ops: Vec::new(),
    };
    for seed in 0..seeds {
        match module {
            GradModule::Nn => check_mlp(seed, &mut tally),
            GradModule::Fusion => check_fusion(seed, &mut tally),
            GradModule::Losses => check_losses(seed, &mut tally),
            GradModule::ToyModel => check_toy_model(seed, &mut tally),
        }
    }
    tally.finish()
}

pub fn check_all(seeds: u64) -> Vec<OpCheck> {
    GradModule::ALL.into_iter().flat_map(|m| check_module(m, seeds)).collect()
}

fn matrix(shape: (usize, usize), flat: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, flat.to_vec()).expect("sized buffer")
}

fn check_mlp(seed: u64, tally: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mlp = Mlp::random(&mut rng, (4, 5, 3), (0.7, 0.7), Activation::Tanh);
    let x = random_matrix(&mut rng, 6, 4, 1.0);
    let probe = random_matrix(&mut rng, 6, 3, 1.0);
    let loss = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()).0 * &probe).sum();
    let (_, cache) = mlp.forward(x.view());
    let (grads, dx) = mlp.backward(&cache, probe.view());
    let numeric = central_differences(&mlp.flatten(), FD_STEP, |flat| {
        let mut m = mlp.clone();
        m.load_flat(flat);
        loss(&m, &x)
    });
    tally.record("mlp/params", &grads.flatten(), &numeric);
    let numeric = central_differences(x.as_slice().unwrap(), FD_STEP, |flat| loss(&mlp, &matrix((6, 4), flat)));
    tally.record("mlp/input", dx.as_slice().unwrap(), &numeric);
}

fn marker(kind: EntityKind, label_id: usize, frame_index: usize) -> SegMarker {
    SegMarker {
        entity_kind: kind,
        triplet_index: 0,
        frame_index,
        label_id,
        token_position: frame_index,
    }
}

fn random_markers(rng: &mut ChaCha8Rng, n: usize) -> Vec<SegMarker> {
    (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.5) {
                EntityKind::Instrument
            } else {
                EntityKind::Target
            };
            marker(kind, rng.random_range(0..3), i)
        })
        .collect()
}

fn check_fusion(seed: u64, tally: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let markers = vec![
        marker(EntityKind::Instrument, 0, 0),
        marker(EntityKind::Target, 1, 0),
        marker(EntityKind::Instrument, 0, 1),
        marker(EntityKind::Target, 2, 1),
    ];
    let groups = group_occurrences(&markers);
    let fusion = Mlp::random(&mut rng, (3, 4, 3), (0.8, 0.8), Activation::Tanh);
    let z = random_matrix(&mut rng, 4, 3, 1.0);
    let probe = random_matrix(&mut rng, 4, 3, 1.0);
    let loss = |z: &Array2<f64>, f: &Mlp| {
        let batch = PromptBatch {
            embeddings: z.clone(),
            markers: markers.clone(),
        };
        let (out, _) = residual_fuse(&batch, &groups, f, FusionMode::Full).unwrap();
        (out.embeddings * &probe).sum()
    };
    let batch = PromptBatch {
        embeddings: z.clone(),
        markers: markers.clone(),
    };
    let (_, cache) = residual_fuse(&batch, &groups, &fusion, FusionMode::Full).unwrap();
    let (dz, grads) = residual_fuse_backward(&fusion, &cache, probe.view()).unwrap();
    let numeric = central_differences(z.as_slice().unwrap(), FD_STEP, |flat| loss(&matrix((4, 3), flat), &fusion));
    tally.record("residual_fuse/prompts", dz.as_slice().unwrap(), &numeric);
    let numeric = central_differences(&fusion.flatten(), FD_STEP, |flat| {
        let mut f = fusion.clone();
        f.load_flat(flat);
        loss(&z, &f)
    });
    tally.record("residual_fuse/params", &grads.flatten(), &numeric);

    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let params = ProjectionParams::init(&mut rng, 5, 3, 4, Activation::Tanh);
    let markers = random_markers(&mut rng, 4);
    let h = random_matrix(&mut rng, 4, 5, 1.0);
    let probe = random_matrix(&mut rng, 4, 3, 1.0);
    let loss = |p: &ProjectionParams, h: &Array2<f64>| {
        let (batch, _) = project_hidden(h.view(), &markers, p).unwrap();
        (batch.embeddings * &probe).sum()
    };
    let (_, cache) = project_hidden(h.view(), &markers, &params).unwrap();
    let (grads, dh) = project_hidden_backward(&params, &cache, probe.view()).unwrap();
    let numeric = central_differences(&params.hidden.flatten(), FD_STEP, |flat| {
        let mut p = params.clone();
        p.hidden.load_flat(flat);
        loss(&p, &h)
    });
    tally.record("projection/params", &grads.flatten(), &numeric);
    let numeric = central_differences(h.as_slice().unwrap(), FD_STEP, |flat| loss(&params, &matrix((4, 5), flat)));
    tally.record("projection/hidden", dh.as_slice().unwrap(), &numeric);
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.4))
}

fn check_losses(seed: u64, tally: &mut Tally) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (len, vocab) = (5, 4);
    let logits = random_matrix(&mut rng, len, vocab, 1.5);
    let targets = TokenTargets {
        targets: (0..len).map(|_| rng.random_range(0..vocab)).collect(),
        entity_positions: vec![0, 3],
    };
    let (a, b, w) = (1.0, 0.7, 2.5);
    let ce = token_ce(logits.view(), &targets).unwrap();
    let mut coeffs = term_coefficients(len, &targets, a, b);
    for (c, r) in coeffs.iter_mut().zip(reweight_coefficients(len, &targets, w)) {
        *c += r;
    }
    let analytic = ce.backward(&targets, &coeffs);
    let numeric = central_differences(logits.as_slice().unwrap(), FD_STEP, |flat| {
        let ce = token_ce(matrix((len, vocab), flat).view(), &targets).unwrap();
        a * ce.llm + b * ce.ent + ce.reweighted(&targets, w)
    });
    tally.record("token_ce", analytic.as_slice().unwrap(), &numeric);

    let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
    let (h, w) = (3, 4);
    let mask = random_mask(&mut rng, h, w);
    let logits = random_matrix(&mut rng, h, w, 1.5);
    let x = logits.as_slice().unwrap();
    let numeric = central_differences(x, FD_STEP, |f| bce_loss(matrix((h, w), f).view(), &mask).unwrap());
    tally.record("bce", bce_grad(logits.view(), &mask).unwrap().as_slice().unwrap(), &numeric);

    let probs = logits.mapv(sigmoid);
    let numeric = central_differences(probs.as_slice().unwrap(), FD_STEP, |f| {
        dice_loss(matrix((h, w), f).view(), &mask, 1.0).unwrap()
    });
    tally.record("dice", dice_grad(probs.view(), &mask, 1.0).unwrap().as_slice().unwrap(), &numeric);

    let numeric = central_differences(x, FD_STEP, |f| dice_from_logits(matrix((h, w), f).view(), &mask, 1.0).unwrap().0);
    let (_, analytic) = dice_from_logits(logits.view(), &mask, 1.0).unwrap();
    tally.record("dice/logits", analytic.as_slice().unwrap(), &numeric);
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_enc: 3,
        d_llm: 4,
        d_sam: 3,
        proj_hidden: 3,
        k_max: 3,
        instruction_tokens: 2,
        ..ModelConfig::default()
    }
}

fn random_clip(rng: &mut ChaCha8Rng, frames: usize, grid: (usize, usize, usize), res: (usize, usize)) -> VideoClip {
    VideoClip {
        frames: (0..frames)
            .map(|_| {
                random_matrix(rng, grid.0 * grid.1, grid.2, 1.0)
                    .into_shape_with_order(grid)
                    .unwrap()
            })
            .collect(),
        resolution: res,
    }
}

fn tiny_sample(rng: &mut ChaCha8Rng, space: &LabelSpace) -> ClipSample {
    let clip = random_clip(rng, 3, (2, 2, 3), (4, 4));
    let frames = [vec![0usize, 3], vec![], vec![3]]
        .into_iter()
        .enumerate()
        .map(|(t, triplets)| FrameTarget {
            phase: t % 3,
            masks: triplets.iter().map(|_| (random_mask(rng, 4, 4), random_mask(rng, 4, 4))).collect(),
            triplets,
        })
        .collect();
    ClipSample::new("V".into(), clip, frames, space, 3).unwrap()
}

fn check_toy_model(seed: u64, tally: &mut Tally) {
    let space = LabelSpace::toy();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyModel::init(&mut rng, ModelShape::new(3, &space), tiny_config());
    model.reasoner.w_tp = random_matrix(&mut rng, 6, 3, 0.5);
    model.reasoner.w_pb = random_matrix(&mut rng, 3, 6, 0.5);
    // Halved features keep the third-order truncation error of the step well below tolerance.
    let mut clip = random_clip(&mut rng, 3, (2, 2, 3), (2, 2));
    clip.frames.iter_mut().for_each(|f| *f *= 0.5);
    let cond = vec![Some(1), None, Some(2)];
    let out = reason(&clip, &model.reasoner, &cond).unwrap();
    let probe = ReasonerGrads {
        phase_logits: random_matrix(&mut rng, 3, 3, 1.0),
        triplet_logits: random_matrix(&mut rng, 3, 6, 1.0),
        count_logits: random_matrix(&mut rng, 3, 4, 1.0),
        hidden: random_matrix(&mut rng, 3, 4, 1.0),
    };
    let scalar = |p: &ToyReasonerParams, c: &VideoClip| {
        let o = reason(c, p, &cond).unwrap();
        (&o.phase_logits * &probe.phase_logits).sum()
            + (&o.triplet_logits * &probe.triplet_logits).sum()
            + (&o.count_logits * &probe.count_logits).sum()
            + (&o.hidden * &probe.hidden).sum()
    };
    let mut grads = model.reasoner.clone();
    grads.fill(0.0);
    let dfeat = reason_backward(&clip, &model.reasoner, &out, &probe, &mut grads);
    let numeric = central_differences(&model.reasoner.flatten(), FD_STEP, |flat| {
        let mut p = model.reasoner.clone();
        p.load_flat(flat);
        scalar(&p, &clip)
    });
    tally.record("reasoner/params", &grads.flatten(), &numeric);
    let flat_feat: Vec<f64> = clip.frames.iter().flat_map(|f| f.iter().copied()).collect();
    let numeric = central_differences(&flat_feat, FD_STEP, |flat| {
        let frames = flat
            .chunks(12)
            .map(|c| Array3::from_shape_vec((2, 2, 3), c.to_vec()).unwrap())
            .collect();
        scalar(&model.reasoner, &VideoClip { frames, resolution: (2, 2) })
    });
    let analytic: Vec<f64> = dfeat.iter().flat_map(|f| f.iter().copied()).collect();
    tally.record("reasoner/features", &analytic, &numeric);

    let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
    let params = ToyDecoderParams {
        w_d: random_matrix(&mut rng, 3, 2, 1.0),
        a_d: random_matrix(&mut rng, 1, 3, 1.0).remove_axis(Axis(0)),
        v_d: random_matrix(&mut rng, 1, 2, 1.0).remove_axis(Axis(0)),
        b_d: array![0.3],
    };
    let cells = random_matrix(&mut rng, 4, 3, 1.0);
    let prompt = random_matrix(&mut rng, 1, 2, 1.0).remove_axis(Axis(0));
    let probe = random_matrix(&mut rng, 4, 4, 1.0);
    let scalar = |p: &ToyDecoderParams, cells: &Array2<f64>, z: &Array1<f64>| {
        (upsample(decode_cells(cells.view(), z.view(), p).view(), (2, 2), (4, 4)) * &probe).sum()
    };
    let mut grads = ToyDecoderParams::zeros(3, 2);
    let dcell = downsample_sum(probe.view(), (2, 2));
    let (dz, dcells) = decode_backward(cells.view(), prompt.view(), &params, dcell.view(), &mut grads);
    let numeric = central_differences(&params.flatten(), FD_STEP, |flat| {
        let mut p = params.clone();
        p.load_flat(flat);
        scalar(&p, &cells, &prompt)
    });
    tally.record("decoder/params", &grads.flatten(), &numeric);
    let numeric = central_differences(prompt.as_slice().unwrap(), FD_STEP, |flat| {
        scalar(&params, &cells, &Array1::from(flat.to_vec()))
    });
    tally.record("decoder/prompt", dz.as_slice().unwrap(), &numeric);
    let numeric = central_differences(cells.as_slice().unwrap(), FD_STEP, |flat| {
        scalar(&params, &matrix((4, 3), flat), &prompt)
    });
    tally.record("decoder/features", dcells.as_slice().unwrap(), &numeric);

    // The whole objective, cycling through every ablation and entity-loss mode.
    let vocab = TemplateVocab::new(&space, 3);
    let ablation = Ablation::ALL[seed as usize % Ablation::ALL.len()];
    let ent_mode = if (seed as usize / Ablation::ALL.len()) % 2 == 0 {
        EntMode::ExtraTerm
    } else {
        EntMode::Reweight
    };
    let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
    let mut model = ToyModel::init(&mut rng, ModelShape::new(3, &space), tiny_config());
    model.projection.fusion.w2 = random_matrix(&mut rng, 3, 3, 0.5);
    model.reasoner.w_pb = random_matrix(&mut rng, 3, 6, 0.5);
    let samples = vec![tiny_sample(&mut rng, &space), tiny_sample(&mut rng, &space)];
    let objective = Objective {
        space: &space,
        vocab: &vocab,
        weights: LossWeights {
            ent_mode,
            ..LossWeights::default()
        },
        ablation,
    };
    let (_, _, grads) = objective.evaluate(&model, &samples).unwrap();
    let numeric = central_differences(&model.flatten(), FD_STEP, |flat| {
        let mut m = model.clone();
        m.load_flat(flat);
        objective.evaluate(&m, &samples).unwrap().0
    });
    tally.record("objective", &grads.flatten(), &numeric);
}
