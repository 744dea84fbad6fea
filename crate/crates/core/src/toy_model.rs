//! Small differentiable stand-ins for the multimodal reasoner and the
//! promptable mask decoder.
//!
//! Reasoner, per frame `t` with cell features `F_c`:
//!
//! ```text
//! e_c  = tanh(F_c Wg + bg)                      x_t = mean_c e_c
//! h_t  = tanh(x_t Wv + pos_t wpos + mean(Q) + bh)
//! b0_t = h_t Wr + br                            triplet logits  b_t = b0_t + Wpb[phase_t]
//! a_t  = h_t Wp + sigmoid(b0_t) Wtp + bp        phase logits
//! c_t  = h_t Wc + bc                            count logits over 0..=k_max
//! s_n  = tanh(h_t Wsh + E_kind[label] + Gph[phase_t] + bs)   hidden state at each [SEG]
//! ```
//!
//! Decoder, per prompt `z` and cell `c`: `l_c = F_c . (Wd z + ad) + z . vd + bd`,
//! replicated over each cell's pixel block.
//!
//! The language loss is token cross-entropy over the answer template with
//! teacher forcing. Positions fixed by the grammar get a single admissible
//! token; the phase and count positions read the phase and count heads; item
//! positions score the remaining triplets through log-sum-exp, with a fixed
//! stop logit of 0 at every enumerator or close position.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{
    group_occurrences, project_hidden, project_hidden_backward, residual_fuse, residual_fuse_backward, FusionError,
    FusionMode, ProjectionParams,
};
use crate::grammar::{self, AnswerToken, EntityKind, FrameSemantics, SegMarker, Slot, StructuredOutput};
use crate::losses::{self, block_mask_losses, token_ce, BlockMask, EntMode, LossError, LossParts, LossWeights, TokenTargets};
use crate::mask::BinaryMask;
use crate::metrics::EntityMaskPair;
use crate::nn::{
    nested, nested_mut, random_matrix, sigmoid, visit1, Mlp, visit1_mut, visit2, visit2_mut, Activation, Params,
};
use crate::vocab::LabelSpace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("clip has no frames")]
    EmptyClip,
    #[error("features are not finite")]
    NonFinite,
    #[error("frame {frame} declares {n} triplets, more than k_max = {k_max}")]
    TooManyTriplets { frame: usize, n: usize, k_max: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("grammar: {0}")]
    Grammar(String),
}

/// Frames of per-cell features (`h x w x d` each) and the mask resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Array3<f64>>,
    pub resolution: (usize, usize),
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(h, w, d)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        self.frames.first().map_or((0, 0, 0), |f| f.dim())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.frames.is_empty() {
            return Err(ModelError::EmptyClip);
        }
        let grid = self.grid();
        for f in &self.frames {
            if f.dim() != grid {
                return Err(ModelError::Dimension {
                    what: "frame grid",
                    expected: grid.0 * grid.1 * grid.2,
                    found: f.len(),
                });
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite);
            }
        }
        let (hh, ww) = self.resolution;
        for (what, full, cells) in [("mask height", hh, grid.0), ("mask width", ww, grid.1)] {
            if cells == 0 || full == 0 || full % cells != 0 {
                return Err(ModelError::Dimension {
                    what,
                    expected: cells,
                    found: full,
                });
            }
        }
        Ok(())
    }

    /// Frame `t` as a `cells x d` matrix, row-major over the grid.
    pub fn cells(&self, t: usize) -> ArrayView2<'_, f64> {
        let (h, w, d) = self.grid();
        self.frames[t]
            .view()
            .into_shape_with_order((h * w, d))
            .expect("standard layout")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Cell encoder width.
    pub d_enc: usize,
    pub d_llm: usize,
    pub d_sam: usize,
    /// Hidden width of both projection MLPs.
    pub proj_hidden: usize,
    pub activation: Activation,
    /// Largest triplet count the template vocabulary can express.
    pub k_max: usize,
    /// Length of the fixed instruction prefix.
    pub instruction_tokens: usize,
    /// Mask logits above this value are foreground.
    pub mask_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_enc: 16,
            d_llm: 24,
            d_sam: 8,
            proj_hidden: 16,
            activation: Activation::Tanh,
            k_max: 4,
            instruction_tokens: 4,
            mask_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReasonerParams {
    pub w_g: Array2<f64>,
    pub b_g: Array1<f64>,
    pub q_emb: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_pos: Array1<f64>,
    pub b_h: Array1<f64>,
    pub w_p: Array2<f64>,
    pub w_tp: Array2<f64>,
    pub b_p: Array1<f64>,
    pub w_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_pb: Array2<f64>,
    pub w_cnt: Array2<f64>,
    pub b_cnt: Array1<f64>,
    pub w_sh: Array2<f64>,
    pub e_inst: Array2<f64>,
    pub e_tgt: Array2<f64>,
    pub g_phase: Array2<f64>,
    pub b_s: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoderParams {
    pub w_d: Array2<f64>,
    pub a_d: Array1<f64>,
    pub v_d: Array1<f64>,
    pub b_d: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub reasoner: ToyReasonerParams,
    pub projection: ProjectionParams,
    pub decoder: ToyDecoderParams,
}

/// Sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_feat: usize,
    pub phases: usize,
    pub instruments: usize,
    pub targets: usize,
    pub triplets: usize,
}

impl ModelShape {
    pub fn new(d_feat: usize, space: &LabelSpace) -> Self {
        Self {
            d_feat,
            phases: space.phases().len(),
            instruments: space.instruments().len(),
            targets: space.targets().len(),
            triplets: space.num_triplets(),
        }
    }
}

impl ToyReasonerParams {
    fn build(shape: ModelShape, cfg: &ModelConfig, mut m: impl FnMut(usize, usize, f64) -> Array2<f64>) -> Self {
        let (d, de, dl) = (shape.d_feat, cfg.d_enc, cfg.d_llm);
        let (p, k, nc) = (shape.phases, shape.triplets, cfg.k_max + 1);
        let inv = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
        Self {
            w_g: m(d, de, 2.0 * inv(d)),
            b_g: Array1::zeros(de),
            q_emb: m(cfg.instruction_tokens, dl, 0.1),
            w_v: m(de, dl, 2.0 * inv(de)),
            w_pos: m(1, dl, 0.5).remove_axis(Axis(0)),
            b_h: Array1::zeros(dl),
            w_p: m(dl, p, inv(dl)),
            w_tp: Array2::zeros((k, p)),
            b_p: Array1::zeros(p),
            w_r: m(dl, k, inv(dl)),
            b_r: Array1::zeros(k),
            w_pb: Array2::zeros((p, k)),
            w_cnt: m(dl, nc, inv(dl)),
            b_cnt: Array1::zeros(nc),
            w_sh: m(dl, dl, inv(dl)),
            e_inst: m(shape.instruments, dl, 0.5),
            e_tgt: m(shape.targets, dl, 0.5),
            g_phase: m(p, dl, 0.1),
            b_s: Array1::zeros(dl),
        }
    }

    pub fn d_llm(&self) -> usize {
        self.b_h.len()
    }

    pub fn d_feat(&self) -> usize {
        self.w_g.nrows()
    }

    pub fn num_phases(&self) -> usize {
        self.b_p.len()
    }

    pub fn num_triplets(&self) -> usize {
        self.b_r.len()
    }

    pub fn num_counts(&self) -> usize {
        self.b_cnt.len()
    }
}

impl ToyDecoderParams {
    pub fn zeros(d_feat: usize, d_sam: usize) -> Self {
        Self {
            w_d: Array2::zeros((d_feat, d_sam)),
            a_d: Array1::zeros(d_feat),
            v_d: Array1::zeros(d_sam),
            b_d: Array1::zeros(1),
        }
    }
}

impl ToyModel {
    pub fn init(rng: &mut impl Rng, shape: ModelShape, config: ModelConfig) -> Self {
        let reasoner = ToyReasonerParams::build(shape, &config, |r, c, std| random_matrix(rng, r, c, std));
        let projection = ProjectionParams::init(rng, config.d_llm, config.d_sam, config.proj_hidden, config.activation);
        let mut decoder = ToyDecoderParams::zeros(shape.d_feat, config.d_sam);
        decoder.w_d = random_matrix(rng, shape.d_feat, config.d_sam, 1.0 / (config.d_sam as f64).sqrt());
        Self {
            config,
            reasoner,
            projection,
            decoder,
        }
    }

    pub fn zeros(shape: ModelShape, config: ModelConfig) -> Self {
        Self {
            config,
            reasoner: ToyReasonerParams::build(shape, &config, |r, c, _| Array2::zeros((r, c))),
            projection: ProjectionParams {
                hidden: Mlp::zeros(config.d_llm, config.proj_hidden, config.d_sam, config.activation),
                fusion: Mlp::zeros(config.d_sam, config.proj_hidden, config.d_sam, config.activation),
            },
            decoder: ToyDecoderParams::zeros(shape.d_feat, config.d_sam),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }

    pub fn check_space(&self, space: &LabelSpace) -> Result<(), ModelError> {
        let r = &self.reasoner;
        for (what, expected, found) in [
            ("phase head", space.phases().len(), r.num_phases()),
            ("triplet head", space.num_triplets(), r.num_triplets()),
            ("instrument embeddings", space.instruments().len(), r.e_inst.nrows()),
            ("target embeddings", space.targets().len(), r.e_tgt.nrows()),
        ] {
            if expected != found {
                return Err(ModelError::Dimension { what, expected, found });
            }
        }
        Ok(())
    }
}

impl Params for ToyReasonerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, "w_g", &self.w_g);
        visit1(f, "b_g", &self.b_g);
        visit2(f, "q_emb", &self.q_emb);
        visit2(f, "w_v", &self.w_v);
        visit1(f, "w_pos", &self.w_pos);
        visit1(f, "b_h", &self.b_h);
        visit2(f, "w_p", &self.w_p);
        visit2(f, "w_tp", &self.w_tp);
        visit1(f, "b_p", &self.b_p);
        visit2(f, "w_r", &self.w_r);
        visit1(f, "b_r", &self.b_r);
        visit2(f, "w_pb", &self.w_pb);
        visit2(f, "w_cnt", &self.w_cnt);
        visit1(f, "b_cnt", &self.b_cnt);
        visit2(f, "w_sh", &self.w_sh);
        visit2(f, "e_inst", &self.e_inst);
        visit2(f, "e_tgt", &self.e_tgt);
        visit2(f, "g_phase", &self.g_phase);
        visit1(f, "b_s", &self.b_s);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit2_mut(f, "w_g", &mut self.w_g);
        visit1_mut(f, "b_g", &mut self.b_g);
        visit2_mut(f, "q_emb", &mut self.q_emb);
        visit2_mut(f, "w_v", &mut self.w_v);
        visit1_mut(f, "w_pos", &mut self.w_pos);
        visit1_mut(f, "b_h", &mut self.b_h);
        visit2_mut(f, "w_p", &mut self.w_p);
        visit2_mut(f, "w_tp", &mut self.w_tp);
        visit1_mut(f, "b_p", &mut self.b_p);
        visit2_mut(f, "w_r", &mut self.w_r);
        visit1_mut(f, "b_r", &mut self.b_r);
        visit2_mut(f, "w_pb", &mut self.w_pb);
        visit2_mut(f, "w_cnt", &mut self.w_cnt);
        visit1_mut(f, "b_cnt", &mut self.b_cnt);
        visit2_mut(f, "w_sh", &mut self.w_sh);
        visit2_mut(f, "e_inst", &mut self.e_inst);
        visit2_mut(f, "e_tgt", &mut self.e_tgt);
        visit2_mut(f, "g_phase", &mut self.g_phase);
        visit1_mut(f, "b_s", &mut self.b_s);
    }
}

impl Params for ToyDecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, "w_d", &self.w_d);
        visit1(f, "a_d", &self.a_d);
        visit1(f, "v_d", &self.v_d);
        visit1(f, "b_d", &self.b_d);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit2_mut(f, "w_d", &mut self.w_d);
        visit1_mut(f, "a_d", &mut self.a_d);
        visit1_mut(f, "v_d", &mut self.v_d);
        visit1_mut(f, "b_d", &mut self.b_d);
    }
}

impl Params for ToyModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.reasoner.visit(&mut nested("reasoner", f));
        self.projection.visit(&mut nested("projection", f));
        self.decoder.visit(&mut nested("decoder", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.reasoner.visit_mut(&mut nested_mut("reasoner", f));
        self.projection.visit_mut(&mut nested_mut("projection", f));
        self.decoder.visit_mut(&mut nested_mut("decoder", f));
    }
}

/// Frame position in `[0, 1]`.
fn position(t: usize, frames: usize) -> f64 {
    if frames > 1 {
        t as f64 / (frames - 1) as f64
    } else {
        0.0
    }
}

fn outer_add(acc: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            acc.row_mut(i).scaled_add(ai, &b);
        }
    }
}

#[derive(Debug, Clone)]
struct ReasonerCache {
    enc: Vec<Array2<f64>>,
    pooled: Array2<f64>,
    sig0: Array2<f64>,
}

/// Per-frame reasoner outputs for one clip.
#[derive(Debug, Clone)]
pub struct ReasonerOutput {
    /// `T x P`.
    pub phase_logits: Array2<f64>,
    /// `T x K`, including the phase-conditioned term.
    pub triplet_logits: Array2<f64>,
    /// `T x (k_max + 1)`.
    pub count_logits: Array2<f64>,
    /// `T x D_llm`.
    pub hidden: Array2<f64>,
    /// Phase each frame's triplet logits were conditioned on.
    pub condition: Vec<Option<usize>>,
    cache: ReasonerCache,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_clip(clip: &VideoClip, params: &ToyReasonerParams) -> Result<(), ModelError> {
    clip.validate()?;
    let d = clip.grid().2;
    if d != params.d_feat() {
        return Err(ModelError::Dimension {
            what: "feature channels",
            expected: params.d_feat(),
            found: d,
        });
    }
    Ok(())
}

/// Forward pass; `condition[t]` selects the phase row added to frame `t`'s
/// triplet logits (`None` adds nothing).
pub fn reason(
    clip: &VideoClip,
    params: &ToyReasonerParams,
    condition: &[Option<usize>],
) -> Result<ReasonerOutput, ModelError> {
    check_clip(clip, params)?;
    let frames = clip.len();
    if condition.len() != frames {
        return Err(ModelError::Dimension {
            what: "phase conditions",
            expected: frames,
            found: condition.len(),
        });
    }
    if let Some(p) = condition.iter().flatten().find(|&&p| p >= params.num_phases()) {
        return Err(ModelError::Dimension {
            what: "phase condition",
            expected: params.num_phases(),
            found: *p,
        });
    }
    let mut enc = Vec::with_capacity(frames);
    let mut pooled = Array2::zeros((frames, params.b_g.len()));
    for t in 0..frames {
        let e = (clip.cells(t).dot(&params.w_g) + &params.b_g).mapv(f64::tanh);
        pooled.row_mut(t).assign(&e.mean_axis(Axis(0)).expect("non-empty grid"));
        enc.push(e);
    }
    let q_mean = params
        .q_emb
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(params.d_llm()));
    let mut pre_h = pooled.dot(&params.w_v) + &params.b_h + &q_mean;
    for t in 0..frames {
        pre_h.row_mut(t).scaled_add(position(t, frames), &params.w_pos);
    }
    let hidden = pre_h.mapv(f64::tanh);
    let b0 = hidden.dot(&params.w_r) + &params.b_r;
    let sig0 = b0.mapv(sigmoid);
    let phase_logits = hidden.dot(&params.w_p) + sig0.dot(&params.w_tp) + &params.b_p;
    let mut triplet_logits = b0;
    for (t, c) in condition.iter().enumerate() {
        if let Some(p) = c {
            let mut row = triplet_logits.row_mut(t);
            row += &params.w_pb.row(*p);
        }
    }
    let count_logits = hidden.dot(&params.w_cnt) + &params.b_cnt;
    Ok(ReasonerOutput {
        phase_logits,
        triplet_logits,
        count_logits,
        hidden,
        condition: condition.to_vec(),
        cache: ReasonerCache { enc, pooled, sig0 },
    })
}

/// Forward pass conditioned on the arg-max phase of each frame.
pub fn reason_eval(
    clip: &VideoClip,
    params: &ToyReasonerParams,
    use_phase: bool,
) -> Result<ReasonerOutput, ModelError> {
    let free = reason(clip, params, &vec![None; clip.len()])?;
    if !use_phase {
        return Ok(free);
    }
    let cond: Vec<Option<usize>> = free.phase_logits.rows().into_iter().map(|r| Some(argmax(r))).collect();
    reason(clip, params, &cond)
}

/// Upstream gradients into the reasoner outputs.
#[derive(Debug, Clone)]
pub struct ReasonerGrads {
    pub phase_logits: Array2<f64>,
    pub triplet_logits: Array2<f64>,
    pub count_logits: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl ReasonerGrads {
    pub fn zeros(out: &ReasonerOutput) -> Self {
        Self {
            phase_logits: Array2::zeros(out.phase_logits.dim()),
            triplet_logits: Array2::zeros(out.triplet_logits.dim()),
            count_logits: Array2::zeros(out.count_logits.dim()),
            hidden: Array2::zeros(out.hidden.dim()),
        }
    }
}

/// Accumulates parameter gradients into `grads`; returns feature gradients per frame (`cells x d`).
pub fn reason_backward(
    clip: &VideoClip,
    params: &ToyReasonerParams,
    out: &ReasonerOutput,
    up: &ReasonerGrads,
    grads: &mut ToyReasonerParams,
) -> Vec<Array2<f64>> {
    let frames = clip.len();
    let da = &up.phase_logits;
    let db = &up.triplet_logits;
    let sig0 = &out.cache.sig0;
    let h = &out.hidden;

    grads.w_p += &h.t().dot(da);
    grads.w_tp += &sig0.t().dot(da);
    grads.b_p += &da.sum_axis(Axis(0));
    let db0 = db + &(da.dot(&params.w_tp.t()) * sig0.mapv(|s| s * (1.0 - s)));
    for (t, c) in out.condition.iter().enumerate() {
        if let Some(p) = c {
            let mut row = grads.w_pb.row_mut(*p);
            row += &db.row(t);
        }
    }
    grads.w_r += &h.t().dot(&db0);
    grads.b_r += &db0.sum_axis(Axis(0));
    grads.w_cnt += &h.t().dot(&up.count_logits);
    grads.b_cnt += &up.count_logits.sum_axis(Axis(0));

    let dh = da.dot(&params.w_p.t()) + db0.dot(&params.w_r.t()) + up.count_logits.dot(&params.w_cnt.t()) + &up.hidden;
    let dpre_h = dh * h.mapv(|v| 1.0 - v * v);
    grads.w_v += &out.cache.pooled.t().dot(&dpre_h);
    grads.b_h += &dpre_h.sum_axis(Axis(0));
    for t in 0..frames {
        grads.w_pos.scaled_add(position(t, frames), &dpre_h.row(t));
    }
    let nq = params.q_emb.nrows();
    if nq > 0 {
        let share = dpre_h.sum_axis(Axis(0)) / nq as f64;
        for mut row in grads.q_emb.rows_mut() {
            row += &share;
        }
    }
    let dpooled = dpre_h.dot(&params.w_v.t());
    let mut dfeatures = Vec::with_capacity(frames);
    for t in 0..frames {
        let e = &out.cache.enc[t];
        let cells = e.nrows() as f64;
        let de = dpooled.row(t).to_owned() / cells;
        let dpre_e = e.mapv(|v| 1.0 - v * v) * &de;
        let f = clip.cells(t);
        grads.w_g += &f.t().dot(&dpre_e);
        grads.b_g += &dpre_e.sum_axis(Axis(0));
        dfeatures.push(dpre_e.dot(&params.w_g.t()));
    }
    dfeatures
}

/// One prompt row: an entity and the frames whose hidden states it pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegRow {
    pub kind: EntityKind,
    pub label: usize,
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SegCache {
    s: Array2<f64>,
}

fn entity_embedding(params: &ToyReasonerParams, kind: EntityKind, label: usize) -> ArrayView1<'_, f64> {
    match kind {
        EntityKind::Instrument => params.e_inst.row(label),
        EntityKind::Target => params.e_tgt.row(label),
    }
}

fn check_rows(params: &ToyReasonerParams, out: &ReasonerOutput, rows: &[SegRow]) -> Result<(), ModelError> {
    for r in rows {
        let table = match r.kind {
            EntityKind::Instrument => params.e_inst.nrows(),
            EntityKind::Target => params.e_tgt.nrows(),
        };
        if r.label >= table {
            return Err(ModelError::Dimension {
                what: "entity label",
                expected: table,
                found: r.label,
            });
        }
        if r.frames.is_empty() || r.frames.iter().any(|&t| t >= out.hidden.nrows()) {
            return Err(ModelError::Dimension {
                what: "prompt row frames",
                expected: out.hidden.nrows(),
                found: r.frames.len(),
            });
        }
    }
    Ok(())
}

/// Hidden states at the [SEG] positions: `rows x D_llm`.
pub fn seg_hidden(
    params: &ToyReasonerParams,
    out: &ReasonerOutput,
    rows: &[SegRow],
) -> Result<(Array2<f64>, SegCache), ModelError> {
    check_rows(params, out, rows)?;
    let dl = params.d_llm();
    let mut pre = Array2::zeros((rows.len(), dl));
    for (n, r) in rows.iter().enumerate() {
        let inv = 1.0 / r.frames.len() as f64;
        let mut hbar = Array1::zeros(dl);
        let mut gbar = Array1::zeros(dl);
        for &t in &r.frames {
            hbar.scaled_add(inv, &out.hidden.row(t));
            if let Some(p) = out.condition[t] {
                gbar.scaled_add(inv, &params.g_phase.row(p));
            }
        }
        let v = hbar.dot(&params.w_sh) + entity_embedding(params, r.kind, r.label) + gbar + &params.b_s;
        pre.row_mut(n).assign(&v);
    }
    let s = pre.mapv(f64::tanh);
    Ok((s.clone(), SegCache { s }))
}

/// Accumulates parameter gradients; adds the hidden-state gradient into `dhidden`.
pub fn seg_hidden_backward(
    params: &ToyReasonerParams,
    out: &ReasonerOutput,
    rows: &[SegRow],
    cache: &SegCache,
    ds: ArrayView2<f64>,
    grads: &mut ToyReasonerParams,
    dhidden: &mut Array2<f64>,
) {
    let dpre = &ds * &cache.s.mapv(|v| 1.0 - v * v);
    grads.b_s += &dpre.sum_axis(Axis(0));
    for (n, r) in rows.iter().enumerate() {
        let g = dpre.row(n);
        let mut de = match r.kind {
            EntityKind::Instrument => grads.e_inst.row_mut(r.label),
            EntityKind::Target => grads.e_tgt.row_mut(r.label),
        };
        de += &g;
        let inv = 1.0 / r.frames.len() as f64;
        let dh = params.w_sh.dot(&g) * inv;
        let mut hbar = Array1::zeros(params.d_llm());
        for &t in &r.frames {
            hbar.scaled_add(inv, &out.hidden.row(t));
            dhidden.row_mut(t).scaled_add(1.0, &dh);
            if let Some(p) = out.condition[t] {
                grads.g_phase.row_mut(p).scaled_add(inv, &g);
            }
        }
        outer_add(&mut grads.w_sh, hbar.view(), g);
    }
}

/// Cell logits for one prompt: `cells` entries.
pub fn decode_cells(cells: ArrayView2<f64>, prompt: ArrayView1<f64>, params: &ToyDecoderParams) -> Array1<f64> {
    let u = params.w_d.dot(&prompt) + &params.a_d;
    cells.dot(&u) + (prompt.dot(&params.v_d) + params.b_d[0])
}

/// Nearest-neighbour upsampling of `h x w` cell values to `H x W`.
pub fn upsample(cells: ArrayView1<f64>, grid: (usize, usize), resolution: (usize, usize)) -> Array2<f64> {
    let (h, w) = grid;
    let (sh, sw) = (resolution.0 / h, resolution.1 / w);
    Array2::from_shape_fn(resolution, |(r, c)| cells[(r / sh) * w + c / sw])
}

/// Sums each cell's pixel block.
pub fn downsample_sum(pixels: ArrayView2<f64>, grid: (usize, usize)) -> Array1<f64> {
    let (h, w) = grid;
    let (sh, sw) = (pixels.nrows() / h, pixels.ncols() / w);
    let mut out = Array1::zeros(h * w);
    for ((r, c), &v) in pixels.indexed_iter() {
        out[(r / sh) * w + c / sw] += v;
    }
    out
}

fn check_decoder(grid: &Array3<f64>, prompt: ArrayView1<f64>, params: &ToyDecoderParams) -> Result<(), ModelError> {
    if grid.dim().2 != params.a_d.len() {
        return Err(ModelError::Dimension {
            what: "decoder feature channels",
            expected: params.a_d.len(),
            found: grid.dim().2,
        });
    }
    if prompt.len() != params.v_d.len() {
        return Err(ModelError::Dimension {
            what: "prompt width",
            expected: params.v_d.len(),
            found: prompt.len(),
        });
    }
    Ok(())
}

/// Mask logits `H x W` for one frame and one fused prompt.
pub fn decode_mask(
    grid: &Array3<f64>,
    prompt: ArrayView1<f64>,
    params: &ToyDecoderParams,
    resolution: (usize, usize),
) -> Result<Array2<f64>, ModelError> {
    check_decoder(grid, prompt, params)?;
    let (h, w, d) = grid.dim();
    if h == 0 || w == 0 || resolution.0 % h != 0 || resolution.1 % w != 0 {
        return Err(ModelError::Dimension {
            what: "mask resolution",
            expected: h,
            found: resolution.0,
        });
    }
    let cells = grid.view().into_shape_with_order((h * w, d)).expect("standard layout");
    Ok(upsample(decode_cells(cells, prompt, params).view(), (h, w), resolution))
}

/// Accumulates decoder gradients; returns gradients w.r.t. the prompt and the cell features.
pub fn decode_backward(
    cells: ArrayView2<f64>,
    prompt: ArrayView1<f64>,
    params: &ToyDecoderParams,
    dcell: ArrayView1<f64>,
    grads: &mut ToyDecoderParams,
) -> (Array1<f64>, Array2<f64>) {
    let u = params.w_d.dot(&prompt) + &params.a_d;
    let total: f64 = dcell.sum();
    let du = cells.t().dot(&dcell);
    outer_add(&mut grads.w_d, du.view(), prompt);
    grads.a_d += &du;
    grads.v_d.scaled_add(total, &prompt);
    grads.b_d[0] += total;
    let dprompt = params.w_d.t().dot(&du) + &params.v_d * total;
    let mut dcells = Array2::zeros(cells.dim());
    for (c, mut row) in dcells.rows_mut().into_iter().enumerate() {
        row.scaled_add(dcell[c], &u);
    }
    (dprompt, dcells)
}

/// Closed token vocabulary of the answer template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    k_max: usize,
}

impl TemplateVocab {
    pub fn new(space: &LabelSpace, k_max: usize) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            k_max,
        };
        let fixed = [
            "<answer>",
            "During",
            "phase,",
            "surgical",
            "triplet(s)",
            "is",
            "are",
            "identified:",
            "instrument",
            "target",
            "action",
            grammar::SEG_TOKEN,
            "</answer>",
        ];
        for t in fixed {
            v.add(t);
        }
        for n in 0..=k_max {
            v.add(&n.to_string());
        }
        for n in 0..k_max {
            v.add(&grammar::enumerator_token(n));
        }
        for name in space.phases().iter().chain(space.instruments()).chain(space.targets()) {
            v.add(name);
        }
        for name in space.verbs() {
            v.add(&grammar::verb_token(name));
        }
        v
    }

    fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }
}

/// Where a candidate token's logit comes from, within one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Source {
    /// Constant 0.
    Fixed,
    Phase(usize),
    Count(usize),
    /// Log-sum-exp of these triplet logits.
    Triplets(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PositionSpec {
    frame: usize,
    target: usize,
    entity: bool,
    candidates: Vec<(usize, Source)>,
}

/// Which answer positions enter the language loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSupervision {
    pub phase: bool,
    pub triplets: bool,
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn frame_positions(
    frame: usize,
    tokens: &[AnswerToken],
    triplets: &[usize],
    space: &LabelSpace,
    vocab: &TemplateVocab,
    supervision: TokenSupervision,
) -> Result<Vec<PositionSpec>, ModelError> {
    let id = |t: &str| {
        vocab
            .id(t)
            .ok_or_else(|| ModelError::Grammar(format!("token {t:?} outside the template vocabulary")))
    };
    let valid = space.valid_triplets();
    let all: Vec<usize> = (0..valid.len()).collect();
    let mut specs = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let target = id(&tok.text)?;
        let fixed = || vec![(target, Source::Fixed)];
        let remaining = |k: usize| -> Vec<usize> { all.iter().copied().filter(|c| !triplets[..k].contains(c)).collect() };
        let triplet_slot = matches!(
            tok.slot,
            Slot::Enumerator(_) | Slot::Close | Slot::Instrument(_) | Slot::Target(_) | Slot::Verb(_)
        );
        if triplet_slot && !supervision.triplets {
            continue;
        }
        let candidates = match tok.slot {
            Slot::Keyword | Slot::Agreement | Slot::Seg(..) => fixed(),
            Slot::Phase => {
                if !supervision.phase {
                    continue;
                }
                space
                    .phases()
                    .iter()
                    .enumerate()
                    .map(|(p, name)| Ok((id(name)?, Source::Phase(p))))
                    .collect::<Result<_, ModelError>>()?
            }
            Slot::Count => {
                if !supervision.triplets {
                    continue;
                }
                (0..=vocab.k_max())
                    .map(|n| Ok((id(&n.to_string())?, Source::Count(n))))
                    .collect::<Result<_, ModelError>>()?
            }
            Slot::Enumerator(k) => stop_candidates(k, &remaining(k), vocab)?,
            Slot::Close => {
                let k = triplets.len();
                stop_candidates(k, &remaining(k), vocab)?
            }
            Slot::Instrument(k) => {
                let rem = remaining(k);
                let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for c in rem {
                    by.entry(valid[c].instrument).or_default().push(c);
                }
                by.into_iter()
                    .map(|(i, cs)| Ok((id(&space.instruments()[i])?, Source::Triplets(cs))))
                    .collect::<Result<_, ModelError>>()?
            }
            Slot::Target(k) => {
                let inst = valid[triplets[k]].instrument;
                let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for c in remaining(k).into_iter().filter(|&c| valid[c].instrument == inst) {
                    by.entry(valid[c].target).or_default().push(c);
                }
                by.into_iter()
                    .map(|(o, cs)| Ok((id(&space.targets()[o])?, Source::Triplets(cs))))
                    .collect::<Result<_, ModelError>>()?
            }
            Slot::Verb(k) => {
                let cur = valid[triplets[k]];
                remaining(k)
                    .into_iter()
                    .filter(|&c| valid[c].instrument == cur.instrument && valid[c].target == cur.target)
                    .map(|c| Ok((id(&grammar::verb_token(&space.verbs()[valid[c].verb]))?, Source::Triplets(vec![c]))))
                    .collect::<Result<_, ModelError>>()?
            }
        };
        specs.push(PositionSpec {
            frame,
            target,
            entity: tok.slot.is_entity(),
            candidates,
        });
    }
    Ok(specs)
}

fn stop_candidates(k: usize, remaining: &[usize], vocab: &TemplateVocab) -> Result<Vec<(usize, Source)>, ModelError> {
    let close = vocab.id("</answer>").expect("close token");
    let mut c = vec![(close, Source::Fixed)];
    if k < vocab.k_max() && !remaining.is_empty() {
        let tok = vocab
            .id(&grammar::enumerator_token(k))
            .ok_or_else(|| ModelError::Grammar("enumerator outside vocabulary".into()))?;
        c.push((tok, Source::Triplets(remaining.to_vec())));
    }
    Ok(c)
}

fn source_value(src: &Source, out: &ReasonerOutput, t: usize) -> f64 {
    match src {
        Source::Fixed => 0.0,
        Source::Phase(p) => out.phase_logits[[t, *p]],
        Source::Count(n) => out.count_logits[[t, *n]],
        Source::Triplets(ks) => lse(ks.iter().map(|&k| out.triplet_logits[[t, k]])),
    }
}

fn source_backward(src: &Source, out: &ReasonerOutput, t: usize, g: f64, up: &mut ReasonerGrads) {
    if g == 0.0 {
        return;
    }
    match src {
        Source::Fixed => {}
        Source::Phase(p) => up.phase_logits[[t, *p]] += g,
        Source::Count(n) => up.count_logits[[t, *n]] += g,
        Source::Triplets(ks) => {
            let value = lse(ks.iter().map(|&k| out.triplet_logits[[t, k]]));
            for &k in ks {
                up.triplet_logits[[t, k]] += g * (out.triplet_logits[[t, k]] - value).exp();
            }
        }
    }
}

/// Ground truth for one frame of a training clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget {
    pub phase: usize,
    /// Distinct triplet ids in annotation order.
    pub triplets: Vec<usize>,
    /// Instrument and target masks per triplet.
    pub masks: Vec<(BinaryMask, BinaryMask)>,
}

/// A clip with its targets and the [SEG] markers of its rendered answers.
#[derive(Debug, Clone)]
pub struct ClipSample {
    pub video_id: String,
    pub clip: VideoClip,
    pub frames: Vec<FrameTarget>,
    pub answers: Vec<Vec<AnswerToken>>,
    pub markers: Vec<SegMarker>,
    /// Ground-truth mask of each marker, summarized per grid cell.
    pub blocks: Vec<BlockMask>,
}

impl ClipSample {
    pub fn new(
        video_id: String,
        clip: VideoClip,
        frames: Vec<FrameTarget>,
        space: &LabelSpace,
        k_max: usize,
    ) -> Result<Self, ModelError> {
        clip.validate()?;
        if frames.len() != clip.len() {
            return Err(ModelError::Dimension {
                what: "frame targets",
                expected: clip.len(),
                found: frames.len(),
            });
        }
        let mut answers = Vec::with_capacity(frames.len());
        let mut outputs = Vec::with_capacity(frames.len());
        for (t, f) in frames.iter().enumerate() {
            if f.triplets.len() > k_max {
                return Err(ModelError::TooManyTriplets {
                    frame: t,
                    n: f.triplets.len(),
                    k_max,
                });
            }
            let sem = semantics(t, f.phase, &f.triplets, space)?;
            answers.push(grammar::answer_tokens(&sem, space).map_err(|e| ModelError::Grammar(e.to_string()))?);
            let text = grammar::render(&sem, "", space).map_err(|e| ModelError::Grammar(e.to_string()))?;
            outputs.push(grammar::parse_frame(&text, t, space).map_err(|e| ModelError::Grammar(e.to_string()))?);
            for (hh, ww) in f.masks.iter().flat_map(|(a, b)| [a.shape(), b.shape()]).map(|s| (s.0, s.1)) {
                if (hh, ww) != clip.resolution {
                    return Err(ModelError::Dimension {
                        what: "mask resolution",
                        expected: clip.resolution.0,
                        found: hh,
                    });
                }
            }
        }
        let markers = grammar::extract_seg_markers(&outputs);
        let (h, w, _) = clip.grid();
        let mut sample = Self {
            video_id,
            clip,
            frames,
            answers,
            markers,
            blocks: Vec::new(),
        };
        sample.blocks = sample.markers.iter().map(|m| BlockMask::from_mask(sample.gt_mask(m), (h, w))).collect();
        Ok(sample)
    }

    pub fn phase_condition(&self) -> Vec<Option<usize>> {
        self.frames.iter().map(|f| Some(f.phase)).collect()
    }

    pub fn gt_mask(&self, m: &SegMarker) -> &BinaryMask {
        let (i, o) = &self.frames[m.frame_index].masks[m.triplet_index];
        match m.entity_kind {
            EntityKind::Instrument => i,
            EntityKind::Target => o,
        }
    }
}

pub fn semantics(frame: usize, phase: usize, triplets: &[usize], space: &LabelSpace) -> Result<FrameSemantics, ModelError> {
    let triplets = triplets
        .iter()
        .map(|&k| space.triplet_components(k).map_err(|e| ModelError::Grammar(e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(FrameSemantics {
        frame_index: frame,
        phase,
        triplets,
    })
}

/// Configuration switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoResidualFusion,
    NoPerFrameToken,
    NoPhase,
    NoTriplet,
    NoGrounding,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoResidualFusion,
        Ablation::NoPerFrameToken,
        Ablation::NoPhase,
        Ablation::NoTriplet,
        Ablation::NoGrounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoResidualFusion => "no_residual_fusion",
            Ablation::NoPerFrameToken => "no_per_frame_token",
            Ablation::NoPhase => "no_phase",
            Ablation::NoTriplet => "no_triplet",
            Ablation::NoGrounding => "no_grounding",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn uses_phase(self) -> bool {
        self != Ablation::NoPhase
    }

    pub fn supervision(self) -> TokenSupervision {
        TokenSupervision {
            phase: self != Ablation::NoPhase,
            triplets: self != Ablation::NoTriplet,
        }
    }

    pub fn fusion_mode(self) -> FusionMode {
        if self == Ablation::NoResidualFusion {
            FusionMode::NoFusion
        } else {
            FusionMode::Full
        }
    }

    pub fn grounding(self) -> bool {
        self != Ablation::NoGrounding
    }

    /// Loss weights with the removed terms zeroed.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        if self.grounding() {
            base
        } else {
            LossWeights {
                lambda_bce: 0.0,
                lambda_dice: 0.0,
                ..base
            }
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Prompt rows for a clip: per-frame markers, or one shared row per entity.
pub fn prompt_rows(markers: &[SegMarker], per_frame: bool) -> (Vec<SegRow>, Vec<SegMarker>, Vec<usize>) {
    if per_frame {
        let rows = markers
            .iter()
            .map(|m| SegRow {
                kind: m.entity_kind,
                label: m.label_id,
                frames: vec![m.frame_index],
            })
            .collect();
        return (rows, markers.to_vec(), (0..markers.len()).collect());
    }
    let groups = group_occurrences(markers);
    let mut rows = Vec::with_capacity(groups.len());
    let mut reps = Vec::with_capacity(groups.len());
    for (key, members) in groups.iter() {
        let mut frames: Vec<usize> = members.iter().map(|&r| markers[r].frame_index).collect();
        frames.sort_unstable();
        frames.dedup();
        rows.push(SegRow {
            kind: key.kind,
            label: key.label_id,
            frames,
        });
        reps.push(markers[members[0]]);
    }
    (rows, reps, groups.row_group().to_vec())
}

/// Batch-level normalizers so that per-clip contributions sum to batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub positions: usize,
    pub entity_positions: usize,
    /// Sum over all positions of their reweighting weight.
    pub weighted_positions: f64,
    pub masks: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    specs: Vec<Vec<PositionSpec>>,
    pub norm: Normalizers,
}

/// Loss terms of one clip, already divided by the batch normalizers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClipTerms {
    pub parts: LossParts,
    /// Reweighted language loss (used in place of `llm` in reweight mode).
    pub llm_weighted: f64,
}

pub struct Objective<'a> {
    pub space: &'a LabelSpace,
    pub vocab: &'a TemplateVocab,
    pub weights: LossWeights,
    pub ablation: Ablation,
}

impl Objective<'_> {
    fn clip_positions(&self, sample: &ClipSample) -> Result<Vec<PositionSpec>, ModelError> {
        let mut specs = Vec::new();
        for (t, f) in sample.frames.iter().enumerate() {
            specs.extend(frame_positions(
                t,
                &sample.answers[t],
                &f.triplets,
                self.space,
                self.vocab,
                self.ablation.supervision(),
            )?);
        }
        Ok(specs)
    }

    /// Teacher-forcing positions and normalizers of a fixed batch.
    pub fn batch(&self, samples: &[ClipSample]) -> Result<Batch, ModelError> {
        let mut norm = Normalizers {
            positions: 0,
            entity_positions: 0,
            weighted_positions: 0.0,
            masks: 0,
        };
        let mut specs = Vec::with_capacity(samples.len());
        for s in samples {
            let clip_specs = self.clip_positions(s)?;
            for p in &clip_specs {
                norm.positions += 1;
                norm.entity_positions += p.entity as usize;
                norm.weighted_positions += if p.entity { self.weights.w_ent } else { 1.0 };
            }
            norm.masks += s.markers.len();
            specs.push(clip_specs);
        }
        Ok(Batch { specs, norm })
    }

    fn clip(
        &self,
        model: &ToyModel,
        sample: &ClipSample,
        specs: &[PositionSpec],
        norm: &Normalizers,
        grads: &mut ToyModel,
    ) -> Result<ClipTerms, ModelError> {
        let cond = if self.ablation.uses_phase() {
            sample.phase_condition()
        } else {
            vec![None; sample.clip.len()]
        };
        let out = reason(&sample.clip, &model.reasoner, &cond)?;
        let mut up = ReasonerGrads::zeros(&out);
        let mut terms = ClipTerms::default();

        if !specs.is_empty() {
            let mut logits = Array2::from_elem((specs.len(), self.vocab.len()), f64::NEG_INFINITY);
            let mut targets = TokenTargets::default();
            for (p, spec) in specs.iter().enumerate() {
                for (tok, src) in &spec.candidates {
                    logits[[p, *tok]] = source_value(src, &out, spec.frame);
                }
                targets.targets.push(spec.target);
                if spec.entity {
                    targets.entity_positions.push(p);
                }
            }
            let ce = token_ce(logits.view(), &targets)?;
            let w = &self.weights;
            let mut coeffs = Vec::with_capacity(specs.len());
            for (p, spec) in specs.iter().enumerate() {
                let l = ce.per_position[p];
                let plain = 1.0 / norm.positions as f64;
                let ent = if spec.entity { 1.0 / norm.entity_positions as f64 } else { 0.0 };
                let rw = if spec.entity { w.w_ent } else { 1.0 } / norm.weighted_positions;
                terms.parts.llm += plain * l;
                terms.parts.ent += ent * l;
                terms.llm_weighted += rw * l;
                coeffs.push(match w.ent_mode {
                    EntMode::ExtraTerm => plain + w.lambda_ent * ent,
                    EntMode::Reweight => rw,
                });
            }
            let dlogits = ce.backward(&targets, &coeffs);
            for (p, spec) in specs.iter().enumerate() {
                for (tok, src) in &spec.candidates {
                    source_backward(src, &out, spec.frame, dlogits[[p, *tok]], &mut up);
                }
            }
        }

        let w = self.weights;
        if self.ablation.grounding() && (w.lambda_bce > 0.0 || w.lambda_dice > 0.0) && !sample.markers.is_empty() {
            let per_frame = self.ablation != Ablation::NoPerFrameToken;
            let (rows, reps, row_of) = prompt_rows(&sample.markers, per_frame);
            let (s, seg_cache) = seg_hidden(&model.reasoner, &out, &rows)?;
            let (batch, proj_cache) = project_hidden(s.view(), &reps, &model.projection)?;
            let groups = group_occurrences(&batch.markers);
            let (fused, fuse_cache) =
                residual_fuse(&batch, &groups, &model.projection.fusion, self.ablation.fusion_mode())?;
            let mut dfused = Array2::zeros(fused.embeddings.dim());
            let inv_masks = 1.0 / norm.masks as f64;
            for (m, marker) in sample.markers.iter().enumerate() {
                let row = row_of[m];
                let prompt = fused.embeddings.row(row);
                let cells = sample.clip.cells(marker.frame_index);
                let cell_logits = decode_cells(cells, prompt, &model.decoder);
                let l = block_mask_losses(cell_logits.as_slice().expect("contiguous"), &sample.blocks[m], w.dice_eps)?;
                terms.parts.bce += inv_masks * l.bce;
                terms.parts.dice += inv_masks * l.dice;
                let (cb, cd) = (w.lambda_bce * inv_masks, w.lambda_dice * inv_masks);
                let dcell: Array1<f64> = l.d_bce.iter().zip(&l.d_dice).map(|(a, b)| cb * a + cd * b).collect();
                let (dprompt, _) = decode_backward(cells, prompt, &model.decoder, dcell.view(), &mut grads.decoder);
                dfused.row_mut(row).scaled_add(1.0, &dprompt);
            }
            let (dz, dfusion) = residual_fuse_backward(&model.projection.fusion, &fuse_cache, dfused.view())?;
            grads.projection.fusion.add_scaled(1.0, &dfusion);
            let (dhidden_proj, ds) = project_hidden_backward(&model.projection, &proj_cache, dz.view())?;
            grads.projection.hidden.add_scaled(1.0, &dhidden_proj);
            seg_hidden_backward(&model.reasoner, &out, &rows, &seg_cache, ds.view(), &mut grads.reasoner, &mut up.hidden);
        }

        reason_backward(&sample.clip, &model.reasoner, &out, &up, &mut grads.reasoner);
        Ok(terms)
    }

    /// Batch loss and gradient over all samples, reduced in sample order.
    pub fn evaluate(&self, model: &ToyModel, samples: &[ClipSample]) -> Result<(f64, LossParts, ToyModel), ModelError> {
        let batch = self.batch(samples)?;
        self.evaluate_batch(model, samples, &batch)
    }

    /// [`Objective::evaluate`] with precomputed positions; `batch` must come from `samples`.
    pub fn evaluate_batch(
        &self,
        model: &ToyModel,
        samples: &[ClipSample],
        batch: &Batch,
    ) -> Result<(f64, LossParts, ToyModel), ModelError> {
        let mut grads = model.zeros_like();
        let mut parts = LossParts::default();
        let mut weighted = 0.0;
        for (s, specs) in samples.iter().zip(&batch.specs) {
            let t = self.clip(model, s, specs, &batch.norm, &mut grads)?;
            parts.llm += t.parts.llm;
            parts.ent += t.parts.ent;
            parts.bce += t.parts.bce;
            parts.dice += t.parts.dice;
            weighted += t.llm_weighted;
        }
        let mut weights = self.ablation.weights(self.weights);
        let objective_parts = match weights.ent_mode {
            EntMode::ExtraTerm => parts,
            EntMode::Reweight => LossParts { llm: weighted, ..parts },
        };
        if !self.ablation.grounding() {
            weights.lambda_bce = 0.0;
            weights.lambda_dice = 0.0;
        }
        let total = losses::total_loss(&objective_parts, &weights)?;
        Ok((total, parts, grads))
    }
}

/// Predictions for one clip.
#[derive(Debug, Clone)]
pub struct ClipPrediction {
    pub phases: Vec<usize>,
    /// `sigmoid` of the triplet logits, per frame.
    pub scores: Vec<Vec<f64>>,
    /// Triplets with positive logit, by descending logit.
    pub triplets: Vec<Vec<usize>>,
    pub outputs: Vec<StructuredOutput>,
    /// Ground-truth-prompted masks per frame (empty without grounding).
    pub masks: Vec<Vec<EntityMaskPair>>,
}

/// Inference on one clip; grounding is prompted with the ground-truth entities.
pub fn predict(
    model: &ToyModel,
    sample: &ClipSample,
    space: &LabelSpace,
    ablation: Ablation,
) -> Result<ClipPrediction, ModelError> {
    let out = reason_eval(&sample.clip, &model.reasoner, ablation.uses_phase())?;
    let k_max = model.config.k_max;
    let phases: Vec<usize> = out.phase_logits.rows().into_iter().map(argmax).collect();
    let mut scores = Vec::with_capacity(sample.clip.len());
    let mut triplets = Vec::with_capacity(sample.clip.len());
    let mut outputs = Vec::with_capacity(sample.clip.len());
    for (t, row) in out.triplet_logits.rows().into_iter().enumerate() {
        scores.push(row.iter().map(|&b| sigmoid(b)).collect());
        let mut present: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
        present.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        present.truncate(k_max);
        let sem = semantics(t, phases[t], &present, space)?;
        let text = grammar::render(&sem, "", space).map_err(|e| ModelError::Grammar(e.to_string()))?;
        outputs.push(grammar::parse_frame(&text, t, space).map_err(|e| ModelError::Grammar(e.to_string()))?);
        triplets.push(present);
    }

    let mut masks = vec![Vec::new(); sample.clip.len()];
    if ablation.grounding() && !sample.markers.is_empty() {
        let (rows, reps, row_of) = prompt_rows(&sample.markers, ablation != Ablation::NoPerFrameToken);
        let (s, _) = seg_hidden(&model.reasoner, &out, &rows)?;
        let (batch, _) = project_hidden(s.view(), &reps, &model.projection)?;
        let groups = group_occurrences(&batch.markers);
        let (fused, _) = residual_fuse(&batch, &groups, &model.projection.fusion, ablation.fusion_mode())?;
        for (m, marker) in sample.markers.iter().enumerate() {
            let t = marker.frame_index;
            let logits = decode_mask(
                &sample.clip.frames[t],
                fused.embeddings.row(row_of[m]),
                &model.decoder,
                sample.clip.resolution,
            )?;
            let (hh, ww) = logits.dim();
            let thr = model.config.mask_threshold;
            masks[t].push(EntityMaskPair {
                kind: marker.entity_kind,
                label: marker.label_id,
                pred: BinaryMask::from_fn(hh, ww, |r, c| logits[[r, c]] > thr),
                gt: sample.gt_mask(marker).clone(),
            });
        }
    }
    Ok(ClipPrediction {
        phases,
        scores,
        triplets,
        outputs,
        masks,
    })
}

/// Rows `0..n` of `m` as a view.
pub fn head_rows(m: &Array2<f64>, n: usize) -> ArrayView2<'_, f64> {
    m.slice(s![..n, ..])
}
