use serde::{Deserialize, Serialize};

use super::ErrorMetric;
use crate::blocksparse::{block_scores, top_p_select, BlockMask};
use crate::error::{Error, Result};
use crate::trace::ForwardEngine;

/// Joint versus summed single-head error for a set of sparsified heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub joint: f64,
    pub singles: Vec<f64>,
    pub sum_singles: f64,
    /// `|joint - sum_singles|`.
    pub abs_gap: f64,
    /// `abs_gap / joint`, zero when both vanish.
    pub rel_gap: f64,
}

impl GapReport {
    fn new(joint: f64, singles: Vec<f64>) -> Self {
        let sum_singles: f64 = singles.iter().sum();
        let abs_gap = (joint - sum_singles).abs();
        let rel_gap = if joint > 0.0 {
            abs_gap / joint
        } else if abs_gap > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Self { joint, singles, sum_singles, abs_gap, rel_gap }
    }
}

fn check_heads(engine: &ForwardEngine<'_>, heads: &[usize]) -> Result<()> {
    let n = engine.trace().config().num_heads();
    for (i, &h) in heads.iter().enumerate() {
        if h >= n {
            return Err(Error::Domain(format!("head {h} outside {n} heads")));
        }
        if heads[..i].contains(&h) {
            return Err(Error::Config(format!("head {h} listed twice")));
        }
    }
    Ok(())
}

/// Error with all listed heads sparsified together against the sum of the
/// errors with each sparsified alone.
pub fn additive_surrogate_gap(
    engine: &ForwardEngine<'_>,
    heads: &[(usize, f64)],
    step: usize,
    metric: &ErrorMetric,
) -> Result<GapReport> {
    if heads.is_empty() {
        return Err(Error::Domain("no heads listed".into()));
    }
    check_heads(engine, &heads.iter().map(|h| h.0).collect::<Vec<_>>())?;
    let trace = engine.trace();
    let c = trace.config();
    let dense = engine.dense_forward(step)?;
    let masks: Vec<(usize, BlockMask)> = heads
        .iter()
        .map(|&(h, tau)| {
            let scores = block_scores(trace.q(step, h), trace.k(step, h), c.head_dim, engine.grid())?;
            Ok((h, top_p_select(&scores, tau)?))
        })
        .collect::<Result<_>>()?;

    let mut all: Vec<Option<BlockMask>> = vec![None; c.num_heads()];
    for (h, m) in &masks {
        all[*h] = Some(m.clone());
    }
    let joint = metric.evaluate(&engine.sparse_forward(step, &all)?, dense.velocity())?;
    let singles = masks
        .iter()
        .map(|(h, m)| {
            let mut one: Vec<Option<BlockMask>> = vec![None; c.num_heads()];
            one[*h] = Some(m.clone());
            metric.evaluate(&engine.sparse_forward(step, &one)?, dense.velocity())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GapReport::new(joint, singles))
}

/// Errors at one perturbation scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub scale: f64,
    pub joint: f64,
    pub singles: Vec<f64>,
}

/// Injects `o_dense + base * s * (o_sparse - o_dense)` into the listed heads
/// for each scale `s` and reports joint and single-head errors. For small
/// `base` the errors scale as `s^2`.
pub fn quadratic_scaling_probe(
    engine: &ForwardEngine<'_>,
    heads: &[(usize, f64)],
    step: usize,
    metric: &ErrorMetric,
    base: f64,
    scales: &[f64],
) -> Result<Vec<ScalingPoint>> {
    if heads.is_empty() {
        return Err(Error::Domain("no heads listed".into()));
    }
    check_heads(engine, &heads.iter().map(|h| h.0).collect::<Vec<_>>())?;
    let trace = engine.trace();
    let c = trace.config();
    let dense = engine.dense_forward(step)?;
    let directions: Vec<(usize, Vec<f64>)> = heads
        .iter()
        .map(|&(h, tau)| {
            let scores = block_scores(trace.q(step, h), trace.k(step, h), c.head_dim, engine.grid())?;
            let mask = top_p_select(&scores, tau)?;
            let sparse = engine.head_attention(step, h, Some(&mask))?;
            let d = sparse.iter().zip(&dense.step.head_outputs[h]).map(|(s, o)| s - o).collect();
            Ok((h, d))
        })
        .collect::<Result<_>>()?;

    let inject = |h: usize, dir: &[f64], s: f64| -> (usize, Vec<f64>) {
        let o = &dense.step.head_outputs[h];
        (h, o.iter().zip(dir).map(|(o, d)| o + base * s * d).collect())
    };
    scales
        .iter()
        .map(|&s| {
            let all: Vec<(usize, Vec<f64>)> = directions.iter().map(|(h, d)| inject(*h, d, s)).collect();
            let joint = metric.evaluate(&engine.forward_with_outputs(step, &all)?, dense.velocity())?;
            let singles = directions
                .iter()
                .map(|(h, d)| {
                    let one = [inject(*h, d, s)];
                    metric.evaluate(&engine.forward_with_outputs(step, &one)?, dense.velocity())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScalingPoint { scale: s, joint, singles })
        })
        .collect()
}
