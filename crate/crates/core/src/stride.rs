//! Learnable patch–label relevance mask and budgeted patch selection.
//!
//! Each patch gets a score `r_i = max_j R[i][j]` where
//! `R = ep·elᵀ / (√d·τ) + M`. Selection keeps a budget of `k` patches:
//! softly through a capped softmax whose weights sum to `k`, or as a hard
//! top-k with straight-through gradients. The pooled latent vector is the
//! weight-normalized sum of patch embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    Soft,
    HardStraightThrough,
    /// Fixed every-n-th-patch baseline; no gradient reaches the mask.
    StridedGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideConfig {
    pub k: usize,
    pub tau: f64,
    pub mode: SelectMode,
}

impl StrideConfig {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.k == 0 || self.k > num_patches {
            return Err(Error::Config(format!("selection budget k = {} outside 1..={num_patches}", self.k)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Registers the `P × L` mask logits, initialized to zero.
pub fn init_mask(num_patches: usize, num_labels: usize, store: &mut ParamStore) {
    store.insert("mask.m", Tensor::zeros(&[num_patches, num_labels]));
}

/// `R[.., i, j] = (ep_i · el_j) / (√d · τ) + M[i][j]`.
///
/// `ep` is `[P, d]` or `[B, P, d]`, `el` is `[L, d]`, `m` is `[P, L]`.
pub fn relevance_scores(tape: &mut Tape, ep: Var, el: Var, m: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let d = *tape.shape(el).last().ok_or_else(|| Error::shape("relevance_scores", &[], &[]))?;
    let elt = tape.transpose(el)?;
    let sim = tape.matmul(ep, elt)?;
    let sim = tape.scale(sim, 1.0 / ((d as f64).sqrt() * tau))?;
    let ep_shape = tape.shape(ep).to_vec();
    let m_shape = tape.shape(m).to_vec();
    let p = ep_shape[ep_shape.len() - 2];
    if m_shape.len() != 2 || m_shape[0] != p || m_shape[1] != tape.shape(el)[0] {
        return Err(Error::shape("relevance_scores", &ep_shape, &m_shape));
    }
    tape.add(sim, m)
}

/// Output of [`stride_select`].
#[derive(Debug, Clone)]
pub struct LatentZ {
    /// Selection weights `[B, P]`.
    pub weights: Var,
    /// Weight-normalized pooled embedding `[B, d]`.
    pub pooled: Var,
    /// Chosen patch indices per sample (hard and strided modes).
    pub selected: Option<Vec<Vec<usize>>>,
}

/// Selects `k` patches from `ep[B, P, d]` using scores `r[B, P, L]`.
pub fn stride_select(tape: &mut Tape, ep: Var, r: Var, k: usize, mode: SelectMode) -> Result<LatentZ> {
    let shape = tape.shape(ep).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("stride_select", &shape, tape.shape(r)));
    }
    let (b, p, d) = (shape[0], shape[1], shape[2]);
    if k == 0 || k > p {
        return Err(Error::Config(format!("selection budget k = {k} outside 1..={p}")));
    }
    let scores = tape.max_last(r)?;
    let scores = tape.reshape(scores, &[b, p])?;
    let (weights, selected) = match mode {
        SelectMode::Soft => (capped_softmax(tape, scores, k)?, None),
        SelectMode::HardStraightThrough => {
            let soft = capped_softmax(tape, scores, k)?;
            let mut hard = Tensor::zeros(&[b, p]);
            let mut chosen = Vec::with_capacity(b);
            for (i, row) in tape.value(scores).data().chunks(p).enumerate() {
                let idx = top_k_indices(row, k);
                for &j in &idx {
                    hard.data_mut()[i * p + j] = 1.0;
                }
                chosen.push(idx);
            }
            (tape.straight_through(soft, hard)?, Some(chosen))
        }
        SelectMode::StridedGrid => {
            let idx = strided_indices(p, k);
            let mut w = Tensor::zeros(&[b, p]);
            for i in 0..b {
                for &j in &idx {
                    w.data_mut()[i * p + j] = 1.0;
                }
            }
            (tape.constant(w), Some(vec![idx; b]))
        }
    };
    let w3 = tape.reshape(weights, &[b, 1, p])?;
    let summed = tape.batch_matmul(w3, ep)?;
    let summed = tape.reshape(summed, &[b, d])?;
    let total = tape.sum_axis(weights, 1)?;
    let pooled = tape.div(summed, total)?;
    Ok(LatentZ {
        weights,
        pooled,
        selected,
    })
}

/// `k` largest entries, ties resolved toward the lower index, returned in
/// ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = order[..k.min(scores.len())].to_vec();
    out.sort_unstable();
    out
}

/// Every `⌊P/k⌋`-th patch starting at 0, `k` of them.
pub fn strided_indices(p: usize, k: usize) -> Vec<usize> {
    let step = (p / k).max(1);
    (0..k).map(|i| i * step).collect()
}

/// Which entries of `k · softmax` saturate at 1 once the remaining mass is
/// redistributed over the unsaturated ones.
pub fn saturated_mask(probs: &[f64], k: usize) -> Vec<bool> {
    let mut clipped = vec![false; probs.len()];
    loop {
        let n_clipped = clipped.iter().filter(|c| **c).count();
        let free: f64 = probs.iter().zip(&clipped).filter(|(_, c)| !**c).map(|(p, _)| p).sum();
        if free <= 0.0 {
            return clipped;
        }
        let scale = (k - n_clipped) as f64 / free;
        let mut changed = false;
        for (i, p) in probs.iter().enumerate() {
            if !clipped[i] && scale * p >= 1.0 {
                clipped[i] = true;
                changed = true;
            }
        }
        if !changed {
            return clipped;
        }
    }
}

/// Soft weights in `[0, 1]` summing to `k`: softmax rescaled to total `k`,
/// with saturated entries pinned at 1 and the rest renormalized.
fn capped_softmax(tape: &mut Tape, scores: Var, k: usize) -> Result<Var> {
    let (b, p) = (tape.shape(scores)[0], tape.shape(scores)[1]);
    let probs = tape.softmax(scores)?;
    let mut pinned = Tensor::zeros(&[b, p]);
    let mut free = Tensor::zeros(&[b, p]);
    let mut budget = Tensor::zeros(&[b, 1]);
    let mut fully_pinned = Tensor::zeros(&[b, 1]);
    for (i, row) in tape.value(probs).data().chunks(p).enumerate() {
        let mask = saturated_mask(row, k);
        let n_pinned = mask.iter().filter(|c| **c).count();
        for (j, &c) in mask.iter().enumerate() {
            pinned.data_mut()[i * p + j] = if c { 1.0 } else { 0.0 };
            free.data_mut()[i * p + j] = if c { 0.0 } else { 1.0 };
        }
        budget.data_mut()[i] = (k - n_pinned) as f64;
        fully_pinned.data_mut()[i] = if n_pinned == p { 1.0 } else { 0.0 };
    }
    let free = tape.constant(free);
    let pinned = tape.constant(pinned);
    let budget = tape.constant(budget);
    let fully_pinned = tape.constant(fully_pinned);
    let free_probs = tape.mul(probs, free)?;
    let mass = tape.sum_axis(free_probs, 1)?;
    let mass = tape.add(mass, fully_pinned)?;
    let share = tape.div(free_probs, mass)?;
    let share = tape.mul(share, budget)?;
    tape.add(share, pinned)
}

/// Mean over rows of the entropy of `w / Σw`. Zero exactly for one-hot rows.
pub fn mask_sparsity_penalty(tape: &mut Tape, w: Var) -> Result<Var> {
    let values = tape.value(w);
    let p = *values.shape().last().ok_or_else(|| Error::shape("mask_sparsity_penalty", &[], &[]))?;
    if values.data().iter().any(|v| *v < 0.0) {
        return Err(Error::Domain {
            op: "mask_sparsity_penalty",
            msg: "weights must be non-negative".into(),
        });
    }
    if values.data().chunks(p).any(|row| row.iter().all(|v| *v == 0.0)) {
        return Err(Error::Domain {
            op: "mask_sparsity_penalty",
            msg: "all-zero weight row".into(),
        });
    }
    let rank = values.rank();
    let total = tape.sum_axis(w, rank - 1)?;
    let probs = tape.div(w, total)?;
    let tiny = tape.constant(Tensor::scalar(1e-300));
    let shifted = tape.add(probs, tiny)?;
    let logs = tape.log(shifted)?;
    let plogp = tape.mul(probs, logs)?;
    let per_row = tape.sum_axis(plogp, rank - 1)?;
    let mean = tape.mean(per_row)?;
    tape.neg(mean)
}

/// Mask parameter handle.
pub fn mask_var(bound: &Bound) -> Result<Var> {
    bound.var("mask.m")
}
