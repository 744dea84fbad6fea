//! Projection of [SEG] hidden states into prompt space and entity-grouped
//! residual fusion.
//!
//! Every prompt row `n` belonging to entity `u` is updated as
//! `z~_n = z_n + Proj(mean_{k in S(u)} z_k)`, where `S(u)` holds all rows of
//! the clip that name the same entity kind and label.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::{EntityKind, SegMarker};
use crate::nn::{nested, nested_mut, Activation, Mlp, MlpCache, Params};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FusionError {
    #[error("dimension mismatch: expected {expected}, found {found} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("entity group {0:?} is empty")]
    EmptyGroup(EntityKey),
    #[error("entity groups do not match the prompt batch: {0}")]
    InconsistentGroups(String),
    #[error("prompt embeddings contain non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Full,
    NoFusion,
}

/// Hidden-state projection (`D_llm -> D_sam`) and the fusion projection
/// (`D_sam -> D_sam`); the two never share weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub hidden: Mlp,
    pub fusion: Mlp,
}

impl ProjectionParams {
    /// Fusion starts at the residual identity: random first layer, zero second layer.
    pub fn init(rng: &mut impl Rng, d_llm: usize, d_sam: usize, hidden: usize, act: Activation) -> Self {
        let hidden_proj = Mlp::random(
            rng,
            (d_llm, hidden, d_sam),
            ((1.0 / d_llm as f64).sqrt(), (1.0 / hidden as f64).sqrt()),
            act,
        );
        let fusion = Mlp::random(
            rng,
            (d_sam, hidden, d_sam),
            (0.1 / (d_sam as f64).sqrt(), 0.0),
            act,
        );
        Self {
            hidden: hidden_proj,
            fusion,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            fusion: self.fusion.zeros_like(),
        }
    }

    pub fn d_llm(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn d_sam(&self) -> usize {
        self.hidden.output_dim()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let d_sam = self.d_sam();
        for (what, expected, found) in [
            ("fusion input", d_sam, self.fusion.input_dim()),
            ("fusion output", d_sam, self.fusion.output_dim()),
        ] {
            if expected != found {
                return Err(FusionError::DimensionMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        if !self.hidden.consistent() || !self.fusion.consistent() {
            return Err(FusionError::InconsistentGroups(
                "projection layer shapes disagree".into(),
            ));
        }
        if !self.all_finite() {
            return Err(FusionError::NonFinite);
        }
        Ok(())
    }
}

impl Params for ProjectionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.hidden.visit(&mut nested("hidden", f));
        self.fusion.visit(&mut nested("fusion", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_mut(&mut nested_mut("hidden", f));
        self.fusion.visit_mut(&mut nested_mut("fusion", f));
    }
}

/// Prompt rows aligned with their markers.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBatch {
    pub embeddings: Array2<f64>,
    pub markers: Vec<SegMarker>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrompts {
    pub embeddings: Array2<f64>,
}

/// Grouping key: entity kind and label identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub kind: EntityKind,
    pub label_id: usize,
}

impl EntityKey {
    pub fn of(marker: &SegMarker) -> Self {
        Self {
            kind: marker.entity_kind,
            label_id: marker.label_id,
        }
    }
}

/// Partition of prompt rows by entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityGroups {
    keys: Vec<EntityKey>,
    members: Vec<Vec<usize>>,
    row_group: Vec<usize>,
}

impl EntityGroups {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn num_rows(&self) -> usize {
        self.row_group.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityKey, &[usize])> {
        self.keys
            .iter()
            .copied()
            .zip(self.members.iter().map(Vec::as_slice))
    }

    pub fn get(&self, key: &EntityKey) -> Option<&[usize]> {
        self.keys
            .binary_search(key)
            .ok()
            .map(|i| self.members[i].as_slice())
    }

    /// Group index of each row.
    pub fn row_group(&self) -> &[usize] {
        &self.row_group
    }
}

/// Groups rows by `(entity_kind, label_id)` across all frames.
pub fn group_occurrences(markers: &[SegMarker]) -> EntityGroups {
    let mut map: BTreeMap<EntityKey, Vec<usize>> = BTreeMap::new();
    for (row, m) in markers.iter().enumerate() {
        map.entry(EntityKey::of(m)).or_default().push(row);
    }
    let mut row_group = vec![0; markers.len()];
    let (keys, members): (Vec<_>, Vec<_>) = map.into_iter().unzip();
    for (g, rows) in members.iter().enumerate() {
        for &r in rows {
            row_group[r] = g;
        }
    }
    EntityGroups {
        keys,
        members,
        row_group,
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionCache(MlpCache);

/// `z = layer2(act(layer1(h)))` row-wise.
pub fn project_hidden(
    hidden: ArrayView2<f64>,
    markers: &[SegMarker],
    params: &ProjectionParams,
) -> Result<(PromptBatch, ProjectionCache), FusionError> {
    if hidden.ncols() != params.d_llm() {
        return Err(FusionError::DimensionMismatch {
            what: "hidden state width",
            expected: params.d_llm(),
            found: hidden.ncols(),
        });
    }
    if hidden.nrows() != markers.len() {
        return Err(FusionError::DimensionMismatch {
            what: "hidden state rows",
            expected: markers.len(),
            found: hidden.nrows(),
        });
    }
    let (z, cache) = params.hidden.forward(hidden);
    Ok((
        PromptBatch {
            embeddings: z,
            markers: markers.to_vec(),
        },
        ProjectionCache(cache),
    ))
}

/// Returns gradients of the hidden projection and w.r.t. the hidden states.
pub fn project_hidden_backward(
    params: &ProjectionParams,
    cache: &ProjectionCache,
    dz: ArrayView2<f64>,
) -> Result<(Mlp, Array2<f64>), FusionError> {
    if dz.ncols() != params.d_sam() {
        return Err(FusionError::DimensionMismatch {
            what: "prompt gradient width",
            expected: params.d_sam(),
            found: dz.ncols(),
        });
    }
    Ok(params.hidden.backward(&cache.0, dz))
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    mode: FusionMode,
    rows: usize,
    dim: usize,
    members: Vec<Vec<usize>>,
    row_group: Vec<usize>,
    proj: Option<MlpCache>,
}

/// Group means summed in sorted order so they do not depend on row order.
fn group_means(z: &Array2<f64>, members: &[Vec<usize>]) -> Array2<f64> {
    let mut means = Array2::zeros((members.len(), z.ncols()));
    let mut column = Vec::new();
    for (g, rows) in members.iter().enumerate() {
        for j in 0..z.ncols() {
            column.clear();
            column.extend(rows.iter().map(|&r| z[[r, j]]));
            column.sort_by(f64::total_cmp);
            means[[g, j]] = column.iter().sum::<f64>() / rows.len() as f64;
        }
    }
    means
}

pub fn residual_fuse(
    batch: &PromptBatch,
    groups: &EntityGroups,
    fusion: &Mlp,
    mode: FusionMode,
) -> Result<(FusedPrompts, FusionCache), FusionError> {
    let z = &batch.embeddings;
    if z.nrows() != batch.markers.len() {
        return Err(FusionError::DimensionMismatch {
            what: "prompt rows vs markers",
            expected: batch.markers.len(),
            found: z.nrows(),
        });
    }
    if groups.num_rows() != z.nrows() {
        return Err(FusionError::InconsistentGroups(format!(
            "{} grouped rows for {} prompts",
            groups.num_rows(),
            z.nrows()
        )));
    }
    for (g, (key, rows)) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(FusionError::EmptyGroup(key));
        }
        if let Some(&r) = rows.iter().find(|&&r| EntityKey::of(&batch.markers[r]) != key) {
            return Err(FusionError::InconsistentGroups(format!(
                "row {r} assigned to group {g} ({key:?})"
            )));
        }
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    let mut cache = FusionCache {
        mode,
        rows: z.nrows(),
        dim: z.ncols(),
        members: groups.members.clone(),
        row_group: groups.row_group.clone(),
        proj: None,
    };
    if mode == FusionMode::NoFusion {
        return Ok((
            FusedPrompts {
                embeddings: z.clone(),
            },
            cache,
        ));
    }
    if fusion.input_dim() != z.ncols() || fusion.output_dim() != z.ncols() {
        return Err(FusionError::DimensionMismatch {
            what: "fusion projection width",
            expected: z.ncols(),
            found: fusion.input_dim(),
        });
    }
    let means = group_means(z, &groups.members);
    let (projected, proj_cache) = fusion.forward(means.view());
    let mut fused = z.clone();
    for (r, mut row) in fused.rows_mut().into_iter().enumerate() {
        row += &projected.row(groups.row_group[r]);
    }
    cache.proj = Some(proj_cache);
    Ok((FusedPrompts { embeddings: fused }, cache))
}

/// Gradients w.r.t. the unfused prompts and the fusion projection.
pub fn residual_fuse_backward(
    fusion: &Mlp,
    cache: &FusionCache,
    d_fused: ArrayView2<f64>,
) -> Result<(Array2<f64>, Mlp), FusionError> {
    if d_fused.dim() != (cache.rows, cache.dim) {
        return Err(FusionError::DimensionMismatch {
            what: "fused prompt gradient rows",
            expected: cache.rows,
            found: d_fused.nrows(),
        });
    }
    let mut dz = d_fused.to_owned();
    let Some(proj_cache) = &cache.proj else {
        debug_assert_eq!(cache.mode, FusionMode::NoFusion);
        return Ok((dz, fusion.zeros_like()));
    };
    let mut d_proj = Array2::zeros((cache.members.len(), cache.dim));
    for (r, row) in d_fused.rows().into_iter().enumerate() {
        let mut acc = d_proj.row_mut(cache.row_group[r]);
        acc += &row;
    }
    let (grads, d_means) = fusion.backward(proj_cache, d_proj.view());
    for (g, rows) in cache.members.iter().enumerate() {
        let share = d_means.row(g).mapv(|v| v / rows.len() as f64);
        for &r in rows {
            let mut row = dz.row_mut(r);
            row += &share;
        }
    }
    Ok((dz, grads))
}
