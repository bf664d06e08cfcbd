//! Full-trajectory simulation of temporal mask reuse on top of per-head
//! top-p thresholds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocksparse::{block_scores, changed_block_ratio, realized_sparsity, top_p_select, BlockMask};
use crate::error::{Error, Result};
use crate::tmr::{assess, commit, layer_gate, Decision, DriftCache, TmrConfig};
use crate::trace::ForwardEngine;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub decision: Decision,
    /// Pooled drift to the anchor; `None` on cold start.
    pub drift: Option<f64>,
    pub realized_sparsity: f64,
    /// Blocks that differ between the mask used and a fresh prediction.
    pub changed_block_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub records: Vec<StepRecord>,
    /// Fraction of head-steps that reused the anchor mask.
    pub reuse_rate: f64,
    pub mean_sparsity: f64,
    pub mask_predictions: usize,
    /// Mean over steps of the velocity MSE against the dense forward.
    pub mean_velocity_mse: f64,
    /// Mean over steps of `||y - y_dense|| / ||y_dense||`.
    pub mean_velocity_rel_l2: f64,
    pub final_masks: Vec<BlockMask>,
}

/// Runs the controller over every step, layer by layer, with the given
/// per-head thresholds. Within a layer all heads vote before the gate is
/// applied and any mask is predicted.
pub fn simulate(engine: &ForwardEngine<'_>, taus: &[f64], config: &TmrConfig) -> Result<OnlineReport> {
    config.validate()?;
    let trace = engine.trace();
    let c = trace.config();
    let n = c.num_heads();
    if taus.len() != n {
        return Err(Error::Shape(format!("{} thresholds for {n} heads", taus.len())));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Domain(format!("threshold {t} outside (0, 1]")));
    }
    let grid = engine.grid();
    let fresh = |h: usize, t: usize| -> Result<BlockMask> {
        Ok(top_p_select(&block_scores(trace.q(t, h), trace.k(t, h), c.head_dim, grid)?, taus[h])?.with_step(t))
    };

    let mut cache = DriftCache::new(n);
    let mut records = Vec::with_capacity(c.steps * n);
    let mut used: Vec<Vec<Option<BlockMask>>> = Vec::with_capacity(c.steps);
    for t in 0..c.steps {
        let mut step_masks = vec![None; n];
        for l in 0..c.layers {
            let heads: Vec<usize> = (0..c.heads).map(|h| c.head_index(l, h)).collect();
            let votes = heads
                .iter()
                .map(|&h| assess(&cache, h, trace.q(t, h), trace.k(t, h), c.head_dim, config.delta))
                .collect::<Result<Vec<_>>>()?;
            let flags: Vec<bool> = votes.iter().map(|a| a.wants_refresh).collect();
            let flags = if config.gate { layer_gate(&flags, config.gate_lo, config.gate_hi)? } else { flags };
            for (a, refresh) in votes.into_iter().zip(flags) {
                let h = a.head;
                let drift = a.drift;
                let (mask, decision) = commit(&mut cache, a, t, refresh, fresh)?;
                let reference = if decision.predicted() { mask.clone() } else { fresh(h, t)? };
                records.push(StepRecord {
                    step: t,
                    layer: l,
                    head: h % c.heads,
                    decision,
                    drift,
                    realized_sparsity: realized_sparsity(&mask, grid),
                    changed_block_ratio: changed_block_ratio(&mask.blocks, &reference.blocks, grid.num_blocks())?,
                });
                step_masks[h] = Some(mask);
            }
        }
        used.push(step_masks);
    }

    let errors: Vec<(f64, f64)> = used
        .par_iter()
        .enumerate()
        .map(|(t, masks)| {
            let dense = engine.dense_forward(t)?;
            let sparse = engine.sparse_forward(t, masks)?;
            let diff = sparse.sub(dense.velocity())?;
            let dn = dense.velocity().norm();
            Ok((sparse.mse(dense.velocity())?, if dn > 0.0 { diff.norm() / dn } else { diff.norm() }))
        })
        .collect::<Result<_>>()?;

    let total = records.len() as f64;
    let steps = errors.len() as f64;
    Ok(OnlineReport {
        reuse_rate: records.iter().filter(|r| r.decision == Decision::Reuse).count() as f64 / total,
        mean_sparsity: records.iter().map(|r| r.realized_sparsity).sum::<f64>() / total,
        mask_predictions: records.iter().filter(|r| r.decision.predicted()).count(),
        mean_velocity_mse: errors.iter().map(|e| e.0).sum::<f64>() / steps,
        mean_velocity_rel_l2: errors.iter().map(|e| e.1).sum::<f64>() / steps,
        final_masks: used
            .pop()
            .unwrap_or_default()
            .into_iter()
            .map(|m| m.ok_or_else(|| Error::Internal("head without a mask".into())))
            .collect::<Result<_>>()?,
        records,
    })
}
