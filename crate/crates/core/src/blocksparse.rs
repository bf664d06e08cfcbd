//! Block grids, block importance scoring, top-p (nucleus) selection and the
//! mask similarity statistics used by the reuse controller and the stability
//! analysis.
//!
//! Block index `r * blocks_per_side + c` addresses the interaction between
//! query block `r` and key block `c`.

use serde::{Deserialize, Serialize};

use crate::bitset::Bitset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    tokens: usize,
    block_size: usize,
}

impl BlockGrid {
    pub fn new(tokens: usize, block_size: usize) -> Result<Self> {
        if tokens == 0 || block_size == 0 {
            return Err(Error::Config("tokens and block size must be positive".into()));
        }
        if !tokens.is_multiple_of(block_size) {
            return Err(Error::Config(format!("token count {tokens} is not divisible by block size {block_size}")));
        }
        Ok(Self { tokens, block_size })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn blocks_per_side(&self) -> usize {
        self.tokens / self.block_size
    }

    /// Total number of candidate blocks, `(N / B)^2`.
    pub fn num_blocks(&self) -> usize {
        self.blocks_per_side() * self.blocks_per_side()
    }

    pub fn index(&self, query_block: usize, key_block: usize) -> usize {
        debug_assert!(query_block < self.blocks_per_side() && key_block < self.blocks_per_side());
        query_block * self.blocks_per_side() + key_block
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.blocks_per_side(), index % self.blocks_per_side())
    }

    pub fn block_of_token(&self, token: usize) -> usize {
        token / self.block_size
    }
}

/// Nonnegative per-block importance, indexed like [`BlockGrid::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockScores {
    values: Vec<f64>,
    normalized: bool,
}

impl BlockScores {
    /// Wraps an already-normalized score vector. Entries must be nonnegative
    /// and sum to 1 within 1e-9.
    pub fn from_normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty score vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("block scores must be finite and nonnegative".into()));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("block scores sum to {total}, expected 1")));
        }
        Ok(Self { values, normalized: true })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Retained block set of one head, with where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMask {
    pub blocks: Bitset,
    pub origin_step: Option<usize>,
    pub origin_tau: Option<f64>,
}

impl BlockMask {
    pub fn full(num_blocks: usize) -> Self {
        Self { blocks: Bitset::full(num_blocks), origin_step: None, origin_tau: None }
    }

    pub fn from_blocks(blocks: Bitset) -> Self {
        Self { blocks, origin_step: None, origin_tau: None }
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.origin_step = Some(step);
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.universe()
    }

    pub fn retained(&self) -> usize {
        self.blocks.count()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.blocks.contains(block)
    }
}

/// Mean-pools `rows` (row-major `tokens x dim`) within each block of `grid`.
pub(crate) fn pool_blocks(rows: &[f32], dim: usize, grid: &BlockGrid) -> Vec<f64> {
    let nb = grid.blocks_per_side();
    let bs = grid.block_size();
    let mut pooled = vec![0.0f64; nb * dim];
    for b in 0..nb {
        let acc = &mut pooled[b * dim..(b + 1) * dim];
        for t in b * bs..(b + 1) * bs {
            for (a, &x) in acc.iter_mut().zip(&rows[t * dim..(t + 1) * dim]) {
                *a += f64::from(x);
            }
        }
        for a in acc.iter_mut() {
            *a /= bs as f64;
        }
    }
    pooled
}

/// Softmax over all blocks of the scaled dot products between block-pooled
/// query and key summaries.
pub fn block_scores(q: &[f32], k: &[f32], head_dim: usize, grid: &BlockGrid) -> Result<BlockScores> {
    let expected = grid.tokens() * head_dim;
    if head_dim == 0 || q.len() != expected || k.len() != expected {
        return Err(Error::Shape(format!(
            "expected Q and K of {} x {head_dim} = {expected} entries, got {} and {}",
            grid.tokens(),
            q.len(),
            k.len()
        )));
    }
    let nb = grid.blocks_per_side();
    let u = pool_blocks(q, head_dim, grid);
    let v = pool_blocks(k, head_dim, grid);
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut logits = Vec::with_capacity(nb * nb);
    for r in 0..nb {
        let ur = &u[r * head_dim..(r + 1) * head_dim];
        for c in 0..nb {
            let vc = &v[c * head_dim..(c + 1) * head_dim];
            let dot: f64 = ur.iter().zip(vc).map(|(a, b)| a * b).sum();
            logits.push(dot * scale);
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in &mut logits {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in &mut logits {
        *l /= total;
    }
    Ok(BlockScores { values: logits, normalized: true })
}

/// Indices in descending value order, ties broken by ascending index.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Minimal descending prefix whose running mass reaches `p` of the total.
///
/// The total is accumulated in the same order as the running sum, so `p = 1`
/// stops exactly at the last positive entry; `p >= 1` is short-circuited to
/// "every positive entry" since tiny tails can vanish in floating point.
fn nucleus(values: &[f64], p: f64) -> Vec<usize> {
    let order = descending_order(values);
    if p >= 1.0 {
        let positive: Vec<usize> = order.iter().copied().filter(|&i| values[i] > 0.0).collect();
        if !positive.is_empty() {
            return positive;
        }
    }
    let total: f64 = order.iter().map(|&i| values[i]).sum();
    let target = p * total;
    let mut cum = 0.0;
    let mut picked = Vec::new();
    for &i in &order {
        picked.push(i);
        cum += values[i];
        if cum >= target {
            break;
        }
    }
    picked
}

fn check_threshold(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("threshold {p} outside (0, 1]")));
    }
    Ok(())
}

/// Top-p block selection at cumulative-mass threshold `tau`.
pub fn top_p_select(scores: &BlockScores, tau: f64) -> Result<BlockMask> {
    check_threshold(tau)?;
    if !scores.is_normalized() {
        return Err(Error::Precondition("top-p selection needs normalized scores".into()));
    }
    let picked = nucleus(scores.values(), tau);
    Ok(BlockMask { blocks: Bitset::from_indices(scores.len(), picked), origin_step: None, origin_tau: Some(tau) })
}

/// Fraction of candidate blocks skipped by `mask`.
pub fn realized_sparsity(mask: &BlockMask, grid: &BlockGrid) -> f64 {
    debug_assert_eq!(mask.num_blocks(), grid.num_blocks());
    1.0 - mask.retained() as f64 / grid.num_blocks() as f64
}

/// Minimal key set whose attention mass reaches `p` (the token-level mask of
/// one query row).
pub fn token_mask(row: &[f64], p: f64) -> Result<Bitset> {
    check_threshold(p)?;
    if row.is_empty() {
        return Err(Error::Shape("empty attention row".into()));
    }
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain("attention probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("attention row sums to {total}, expected 1")));
    }
    Ok(Bitset::from_indices(row.len(), nucleus(row, p)))
}

/// Intersection over union; two empty sets count as identical.
pub fn mask_iou(a: &Bitset, b: &Bitset) -> Result<f64> {
    if a.universe() != b.universe() {
        return Err(Error::Shape(format!("mask universes differ: {} vs {}", a.universe(), b.universe())));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// `|a xor b| / m`.
pub fn changed_block_ratio(a: &Bitset, b: &Bitset, m: usize) -> Result<f64> {
    if a.universe() != m || b.universe() != m || m == 0 {
        return Err(Error::Shape(format!("masks over {} and {} blocks, expected {m}", a.universe(), b.universe())));
    }
    Ok(a.symmetric_difference_count(b) as f64 / m as f64)
}
