//! Composite reasoning and grounding loss
//! `L = L_llm + lambda_bce * L_bce + lambda_dice * L_dice + lambda_ent * L_ent`
//! with closed-form gradients.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::nn::sigmoid;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("entity position {position} out of range for {len} positions")]
    EntityPositionOutOfRange { position: usize, len: usize },
    #[error("target id {target} at position {position} outside vocabulary of {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid loss weight {name} = {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("loss term {0} is not finite")]
    NonFinite(&'static str),
}

/// How the entity emphasis enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntMode {
    /// Separate `lambda_ent * L_ent` term.
    #[default]
    ExtraTerm,
    /// Entity positions carry weight `w_ent` inside `L_llm`; no separate term.
    Reweight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_ent: f64,
    pub w_ent: f64,
    pub dice_eps: f64,
    pub ent_mode: EntMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            lambda_ent: 1.0,
            w_ent: 2.0,
            dice_eps: 1.0,
            ent_mode: EntMode::ExtraTerm,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
            ("lambda_ent", self.lambda_ent),
            ("dice_eps", self.dice_eps),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        if !self.w_ent.is_finite() || self.w_ent < 1.0 {
            return Err(LossError::InvalidWeight {
                name: "w_ent",
                value: self.w_ent,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenTargets {
    pub targets: Vec<usize>,
    /// Sorted, distinct positions naming phase, instrument, verb or target.
    pub entity_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCe {
    pub llm: f64,
    pub ent: f64,
    pub per_position: Vec<f64>,
    /// Softmax rows, kept for the backward pass.
    probs: Array2<f64>,
}

fn check_targets(logits: &ArrayView2<f64>, targets: &TokenTargets) -> Result<(), LossError> {
    let (len, vocab) = logits.dim();
    if len == 0 {
        return Err(LossError::EmptySequence);
    }
    if targets.targets.len() != len {
        return Err(LossError::ShapeMismatch {
            left: (len, vocab),
            right: (targets.targets.len(), vocab),
        });
    }
    for (position, &target) in targets.targets.iter().enumerate() {
        if target >= vocab {
            return Err(LossError::TargetOutOfRange {
                position,
                target,
                vocab,
            });
        }
    }
    if let Some(&position) = targets.entity_positions.iter().find(|&&p| p >= len) {
        return Err(LossError::EntityPositionOutOfRange { position, len });
    }
    Ok(())
}

/// Per-position cross-entropy; `L_llm` is the mean over all positions and
/// `L_ent` the mean over entity positions (0 when there are none).
/// Entries equal to `-inf` are excluded from the softmax.
pub fn token_ce(logits: ArrayView2<f64>, targets: &TokenTargets) -> Result<TokenCe, LossError> {
    check_targets(&logits, targets)?;
    let mut probs = Array2::zeros(logits.dim());
    let mut per_position = Vec::with_capacity(logits.nrows());
    for (p, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - max).exp();
            probs[[p, j]] = e;
            denom += e;
        }
        probs.row_mut(p).mapv_inplace(|e| e / denom);
        per_position.push(max + denom.ln() - row[targets.targets[p]]);
    }
    let llm = per_position.iter().sum::<f64>() / per_position.len() as f64;
    let ent = if targets.entity_positions.is_empty() {
        0.0
    } else {
        targets
            .entity_positions
            .iter()
            .map(|&p| per_position[p])
            .sum::<f64>()
            / targets.entity_positions.len() as f64
    };
    Ok(TokenCe {
        llm,
        ent,
        per_position,
        probs,
    })
}

impl TokenCe {
    pub fn len(&self) -> usize {
        self.per_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_position.is_empty()
    }

    /// `sum_p w_p l_p / sum_p w_p` with weight `w_ent` on entity positions.
    pub fn reweighted(&self, targets: &TokenTargets, w_ent: f64) -> f64 {
        let coeffs = reweight_coefficients(self.len(), targets, w_ent);
        coeffs
            .iter()
            .zip(&self.per_position)
            .map(|(c, l)| c * l)
            .sum()
    }

    /// Gradient w.r.t. the logits of `sum_p coeffs[p] * l_p`.
    pub fn backward(&self, targets: &TokenTargets, coeffs: &[f64]) -> Array2<f64> {
        assert_eq!(coeffs.len(), self.len(), "coefficient length mismatch");
        let mut grad = self.probs.clone();
        for (p, mut row) in grad.rows_mut().into_iter().enumerate() {
            row[targets.targets[p]] -= 1.0;
            row *= coeffs[p];
        }
        grad
    }

    /// Gradient of `d_llm * L_llm + d_ent * L_ent`.
    pub fn backward_terms(&self, targets: &TokenTargets, d_llm: f64, d_ent: f64) -> Array2<f64> {
        self.backward(targets, &term_coefficients(self.len(), targets, d_llm, d_ent))
    }
}

/// Per-position coefficients of `d_llm * L_llm + d_ent * L_ent`.
pub fn term_coefficients(len: usize, targets: &TokenTargets, d_llm: f64, d_ent: f64) -> Vec<f64> {
    let mut coeffs = vec![d_llm / len as f64; len];
    if !targets.entity_positions.is_empty() {
        let share = d_ent / targets.entity_positions.len() as f64;
        for &p in &targets.entity_positions {
            coeffs[p] += share;
        }
    }
    coeffs
}

/// Per-position coefficients of the reweighted mean.
pub fn reweight_coefficients(len: usize, targets: &TokenTargets, w_ent: f64) -> Vec<f64> {
    let mut weights = vec![1.0; len];
    for &p in &targets.entity_positions {
        weights[p] = w_ent;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

fn check_shape(logits: &ArrayView2<f64>, mask: &BinaryMask) -> Result<(), LossError> {
    if logits.dim() != mask.shape() {
        return Err(LossError::ShapeMismatch {
            left: logits.dim(),
            right: mask.shape(),
        });
    }
    Ok(())
}

/// `-[m log s(x) + (1 - m) log(1 - s(x))]` without overflow.
fn bce_pixel(x: f64, m: f64) -> f64 {
    x.max(0.0) - x * m + (-x.abs()).exp().ln_1p()
}

/// Mean pixel-wise binary cross-entropy of mask logits.
pub fn bce_loss(logits: ArrayView2<f64>, mask: &BinaryMask) -> Result<f64, LossError> {
    check_shape(&logits, mask)?;
    let n = mask.data.len().max(1) as f64;
    Ok(logits
        .iter()
        .zip(&mask.data)
        .map(|(&x, &m)| bce_pixel(x, if m { 1.0 } else { 0.0 }))
        .sum::<f64>()
        / n)
}

/// `(s(x) - m) / HW` per pixel.
pub fn bce_grad(logits: ArrayView2<f64>, mask: &BinaryMask) -> Result<Array2<f64>, LossError> {
    check_shape(&logits, mask)?;
    let n = mask.data.len().max(1) as f64;
    let w = mask.width;
    Ok(Array2::from_shape_fn(logits.dim(), |(r, c)| {
        let m = if mask.data[r * w + c] { 1.0 } else { 0.0 };
        (sigmoid(logits[[r, c]]) - m) / n
    }))
}

struct DiceSums {
    inter: f64,
    total: f64,
}

fn dice_sums(probs: &ArrayView2<f64>, mask: &BinaryMask) -> DiceSums {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &m) in probs.iter().zip(&mask.data) {
        total += p;
        if m {
            inter += p;
            total += 1.0;
        }
    }
    DiceSums { inter, total }
}

/// `1 - (2 sum(p m) + eps) / (sum(p) + sum(m) + eps)`; defined as 0 when
/// both masks are empty and `eps = 0`.
pub fn dice_loss(probs: ArrayView2<f64>, mask: &BinaryMask, eps: f64) -> Result<f64, LossError> {
    check_shape(&probs, mask)?;
    if !eps.is_finite() || eps < 0.0 {
        return Err(LossError::InvalidWeight {
            name: "dice_eps",
            value: eps,
        });
    }
    let s = dice_sums(&probs, mask);
    if s.total + eps == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - (2.0 * s.inter + eps) / (s.total + eps))
}

/// Gradient of [`dice_loss`] w.r.t. the probabilities.
pub fn dice_grad(probs: ArrayView2<f64>, mask: &BinaryMask, eps: f64) -> Result<Array2<f64>, LossError> {
    dice_loss(probs, mask, eps)?;
    let s = dice_sums(&probs, mask);
    let denom = s.total + eps;
    if denom == 0.0 {
        return Ok(Array2::zeros(probs.dim()));
    }
    let numer = 2.0 * s.inter + eps;
    let w = mask.width;
    Ok(Array2::from_shape_fn(probs.dim(), |(r, c)| {
        let m = if mask.data[r * w + c] { 1.0 } else { 0.0 };
        -(2.0 * m * denom - numer) / (denom * denom)
    }))
}

/// Dice loss of `sigmoid(logits)` and its gradient w.r.t. the logits.
pub fn dice_from_logits(
    logits: ArrayView2<f64>,
    mask: &BinaryMask,
    eps: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    let probs = logits.mapv(sigmoid);
    let loss = dice_loss(probs.view(), mask, eps)?;
    let dprobs = dice_grad(probs.view(), mask, eps)?;
    Ok((loss, dprobs * probs.mapv(|p| p * (1.0 - p))))
}

/// A ground-truth mask summarized per block of a coarse grid, for logits
/// that are constant over each block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    /// Pixels per block.
    pub block: usize,
    /// Foreground pixels per block, row-major over the grid.
    pub fg: Vec<f64>,
    pub total_fg: f64,
}

impl BlockMask {
    pub fn from_mask(mask: &BinaryMask, grid: (usize, usize)) -> Self {
        let (hh, ww) = mask.shape();
        let (sh, sw) = (hh / grid.0.max(1), ww / grid.1.max(1));
        let mut fg = vec![0.0; grid.0 * grid.1];
        for r in 0..hh {
            for c in 0..ww {
                if mask.get(r, c) {
                    fg[(r / sh) * grid.1 + c / sw] += 1.0;
                }
            }
        }
        Self {
            block: sh * sw,
            total_fg: mask.count() as f64,
            fg,
        }
    }

    pub fn pixels(&self) -> usize {
        self.block * self.fg.len()
    }
}

/// BCE and Dice of block-constant logits, with gradients w.r.t. the block logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLosses {
    pub bce: f64,
    pub dice: f64,
    pub d_bce: Vec<f64>,
    pub d_dice: Vec<f64>,
}

/// Same values as [`bce_loss`] and [`dice_from_logits`] on the upsampled
/// logits, at the cost of one evaluation per block.
pub fn block_mask_losses(logits: &[f64], mask: &BlockMask, eps: f64) -> Result<BlockLosses, LossError> {
    if logits.len() != mask.fg.len() {
        return Err(LossError::ShapeMismatch {
            left: (logits.len(), 1),
            right: (mask.fg.len(), 1),
        });
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(LossError::InvalidWeight {
            name: "dice_eps",
            value: eps,
        });
    }
    let n = mask.block as f64;
    let pixels = mask.pixels().max(1) as f64;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut total = mask.total_fg;
    for ((&x, &p), &y) in logits.iter().zip(&probs).zip(&mask.fg) {
        bce += n * (x.max(0.0) + (-x.abs()).exp().ln_1p()) - x * y;
        inter += p * y;
        total += n * p;
    }
    let d_bce = probs.iter().zip(&mask.fg).map(|(&p, &y)| (n * p - y) / pixels).collect();
    let denom = total + eps;
    let (dice, d_dice) = if denom == 0.0 {
        (0.0, vec![0.0; logits.len()])
    } else {
        let numer = 2.0 * inter + eps;
        let d = probs
            .iter()
            .zip(&mask.fg)
            .map(|(&p, &y)| -(2.0 * y * denom - n * numer) / (denom * denom) * p * (1.0 - p))
            .collect();
        (1.0 - numer / denom, d)
    };
    Ok(BlockLosses {
        bce: bce / pixels,
        dice,
        d_bce,
        d_dice,
    })
}

/// Loss terms before weighting; mask terms are means over all masks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub llm: f64,
    pub bce: f64,
    pub dice: f64,
    pub ent: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    for (name, v) in [
        ("llm", parts.llm),
        ("bce", parts.bce),
        ("dice", parts.dice),
        ("ent", parts.ent),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let ent = match weights.ent_mode {
        EntMode::ExtraTerm => weights.lambda_ent * parts.ent,
        EntMode::Reweight => 0.0,
    };
    Ok(parts.llm + weights.lambda_bce * parts.bce + weights.lambda_dice * parts.dice + ent)
}
