//! Temporal stability of attention masks along a denoising trace.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitset::Bitset;
use crate::blocksparse::{block_scores, changed_block_ratio, mask_iou, token_mask, top_p_select, BlockMask};
use crate::error::{Error, Result};
use crate::tmr::{full_token_drift, mean_pool, mean_pool_drift};
use crate::trace::{attention_probs, DenoiseTrace};

/// Cumulative mass used for token-level masks.
pub const TOKEN_MASS: f64 = 0.95;

/// Statistics of one head between steps `step - 1` and `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacentSample {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    /// Per-query-row token-mask IoU, averaged over rows.
    pub token_iou: f64,
    pub block_iou: f64,
    pub full_drift: f64,
    pub pooled_drift: f64,
    pub changed_ratio: f64,
}

/// One mean IoU per `(group, step)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub prompt: usize,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub step: usize,
    pub token_iou: f64,
    pub block_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub samples: Vec<AdjacentSample>,
    pub prompt_rows: Vec<GroupRow>,
    pub layer_rows: Vec<GroupRow>,
    pub head_rows: Vec<GroupRow>,
}

fn token_masks(trace: &DenoiseTrace, step: usize, head: usize) -> Result<Vec<Bitset>> {
    let c = trace.config();
    let probs = attention_probs(trace.q(step, head), trace.k(step, head), c.head_dim)?;
    probs.chunks(c.tokens).map(|row| token_mask(row, TOKEN_MASS)).collect()
}

fn block_mask(trace: &DenoiseTrace, step: usize, head: usize, tau: f64) -> Result<BlockMask> {
    let c = trace.config();
    top_p_select(&block_scores(trace.q(step, head), trace.k(step, head), c.head_dim, &c.grid()?)?, tau)
}

fn head_samples(trace: &DenoiseTrace, head: usize, tau: f64) -> Result<Vec<AdjacentSample>> {
    let c = trace.config();
    let (layer, h) = c.head_coords(head);
    let m = c.grid()?.num_blocks();
    let mut prev_tokens = token_masks(trace, 0, head)?;
    let mut prev_block = block_mask(trace, 0, head, tau)?;
    let mut out = Vec::with_capacity(c.steps.saturating_sub(1));
    for t in 1..c.steps {
        let tokens = token_masks(trace, t, head)?;
        let block = block_mask(trace, t, head, tau)?;
        let mut iou = 0.0;
        for (a, b) in prev_tokens.iter().zip(&tokens) {
            iou += mask_iou(a, b)?;
        }
        let (q0, q1, k0, k1) = (trace.q(t - 1, head), trace.q(t, head), trace.k(t - 1, head), trace.k(t, head));
        out.push(AdjacentSample {
            layer,
            head: h,
            step: t,
            token_iou: iou / tokens.len() as f64,
            block_iou: mask_iou(&prev_block.blocks, &block.blocks)?,
            full_drift: full_token_drift(q0, q1, k0, k1, c.head_dim)?,
            pooled_drift: mean_pool_drift(
                &mean_pool(q0, c.head_dim),
                &mean_pool(q1, c.head_dim),
                &mean_pool(k0, c.head_dim),
                &mean_pool(k1, c.head_dim),
            )?,
            changed_ratio: changed_block_ratio(&prev_block.blocks, &block.blocks, m)?,
        });
        prev_tokens = tokens;
        prev_block = block;
    }
    Ok(out)
}

/// Adjacent-step samples for every head, in head then step order.
pub fn adjacent_samples(trace: &DenoiseTrace, tau: f64) -> Result<Vec<AdjacentSample>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("threshold {tau} outside (0, 1]")));
    }
    let c = trace.config();
    let per_head: Vec<Vec<AdjacentSample>> =
        (0..c.num_heads()).into_par_iter().map(|h| head_samples(trace, h, tau)).collect::<Result<_>>()?;
    Ok(per_head.into_iter().flatten().collect())
}

fn group_means<K: Ord + Copy>(
    samples: &[AdjacentSample],
    key: impl Fn(&AdjacentSample) -> K,
    row: impl Fn(K, usize, f64, f64) -> GroupRow,
) -> Vec<GroupRow> {
    let mut acc: std::collections::BTreeMap<(K, usize), (f64, f64, usize)> = Default::default();
    for s in samples {
        let e = acc.entry((key(s), s.step)).or_default();
        e.0 += s.token_iou;
        e.1 += s.block_iou;
        e.2 += 1;
    }
    acc.into_iter().map(|((k, step), (t, b, n))| row(k, step, t / n as f64, b / n as f64)).collect()
}

/// Adjacent-step IoU for each trace of a prompt pool at prompt, layer and
/// head granularity. Each granularity yields `(T - 1) * groups` rows per
/// trace.
pub fn analyze_stability(pool: &[DenoiseTrace], tau: f64) -> Result<StabilityReport> {
    let mut report =
        StabilityReport { samples: Vec::new(), prompt_rows: Vec::new(), layer_rows: Vec::new(), head_rows: Vec::new() };
    for (p, trace) in pool.iter().enumerate() {
        let samples = adjacent_samples(trace, tau)?;
        report.prompt_rows.extend(group_means(
            &samples,
            |_| (),
            |_, step, t, b| GroupRow { prompt: p, layer: None, head: None, step, token_iou: t, block_iou: b },
        ));
        report.layer_rows.extend(group_means(
            &samples,
            |s| s.layer,
            |l, step, t, b| GroupRow { prompt: p, layer: Some(l), head: None, step, token_iou: t, block_iou: b },
        ));
        report.head_rows.extend(group_means(
            &samples,
            |s| (s.layer, s.head),
            |(l, h), step, t, b| GroupRow {
                prompt: p,
                layer: Some(l),
                head: Some(h),
                step,
                token_iou: t,
                block_iou: b,
            },
        ));
        report.samples.extend(samples);
    }
    Ok(report)
}

/// Drift against mask change between steps `a < b` of one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub head: usize,
    pub a: usize,
    pub b: usize,
    pub full_drift: f64,
    pub changed_ratio: f64,
}

/// `(full drift, changed-block ratio)` for every head and every step pair
/// `(t, t + g)` with `g` in `gaps`.
pub fn drift_change_samples(trace: &DenoiseTrace, tau: f64, gaps: &[usize]) -> Result<Vec<DriftSample>> {
    if gaps.contains(&0) {
        return Err(Error::Domain("step gaps must be positive".into()));
    }
    let c = trace.config();
    let m = c.grid()?.num_blocks();
    let per_head: Vec<Vec<DriftSample>> = (0..c.num_heads())
        .into_par_iter()
        .map(|h| {
            let masks: Vec<BlockMask> = (0..c.steps).map(|t| block_mask(trace, t, h, tau)).collect::<Result<_>>()?;
            let mut out = Vec::new();
            for &g in gaps {
                for a in 0..c.steps.saturating_sub(g) {
                    let b = a + g;
                    out.push(DriftSample {
                        head: h,
                        a,
                        b,
                        full_drift: full_token_drift(
                            trace.q(a, h),
                            trace.q(b, h),
                            trace.k(a, h),
                            trace.k(b, h),
                            c.head_dim,
                        )?,
                        changed_ratio: changed_block_ratio(&masks[a].blocks, &masks[b].blocks, m)?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_head.into_iter().flatten().collect())
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("rank correlation of {} and {} values", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Domain("rank correlation input contains NaN".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("rank correlation of a constant sequence".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
