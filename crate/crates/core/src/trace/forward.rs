use std::sync::{Arc, OnceLock};

use super::{DenoiseTrace, SurrogateModel, VelocityField};
use crate::blocksparse::{BlockGrid, BlockMask};
use crate::error::{Error, Result};

/// One entry per head in flat order; `None` keeps that head dense.
pub type HeadMasks = [Option<BlockMask>];

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

/// Softmax attention `softmax(Q K^T / sqrt(D)) V` for one head, optionally
/// restricted to the blocks retained by `mask`.
///
/// Disallowed entries are dropped before the max-subtraction and the
/// normalization, so a full mask reproduces the dense result bit for bit. A
/// query row with no retained block produces a zero output row.
pub fn attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    head_dim: usize,
    mask: Option<(&BlockMask, &BlockGrid)>,
) -> Result<Vec<f64>> {
    let d = head_dim;
    if d == 0 || !q.len().is_multiple_of(d) || q.len() != k.len() || q.len() != v.len() {
        return Err(Error::Shape("Q, K, V must share a tokens x head_dim shape".into()));
    }
    let n = q.len() / d;
    if let Some((m, grid)) = mask {
        if grid.tokens() != n || m.num_blocks() != grid.num_blocks() {
            return Err(Error::Shape(format!(
                "mask over {} blocks does not fit grid of {} blocks for {n} tokens",
                m.num_blocks(),
                grid.num_blocks()
            )));
        }
    }
    let (q, k, v) = (widen(q), widen(k), widen(v));
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; n * d];
    let mut logits = vec![0.0f64; n];
    let mut allowed = vec![true; n];
    for i in 0..n {
        if let Some((m, grid)) = mask {
            let r = grid.block_of_token(i);
            for (j, a) in allowed.iter_mut().enumerate() {
                *a = m.contains(grid.index(r, grid.block_of_token(j)));
            }
        }
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if allowed[j] {
                let kj = &k[j * d..(j + 1) * d];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                logits[j] = s;
                max = max.max(s);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in 0..n {
            if allowed[j] {
                logits[j] = (logits[j] - max).exp();
                total += logits[j];
            }
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            if allowed[j] {
                let p = logits[j] / total;
                for (o, x) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o += p * x;
                }
            }
        }
    }
    Ok(out)
}

/// Dense attention probabilities, row-major `tokens x tokens`.
pub fn attention_probs(q: &[f32], k: &[f32], head_dim: usize) -> Result<Vec<f64>> {
    let d = head_dim;
    if d == 0 || !q.len().is_multiple_of(d) || q.len() != k.len() {
        return Err(Error::Shape("Q and K must share a tokens x head_dim shape".into()));
    }
    let n = q.len() / d;
    let (q, k) = (widen(q), widen(k));
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0f64; n * n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut probs[i * n..(i + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            *r = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        for r in row.iter_mut() {
            *r /= total;
        }
    }
    Ok(probs)
}

/// Dense reference for one step: every head's attention output and the
/// resulting velocity.
#[derive(Debug)]
pub struct DenseStep {
    pub head_outputs: Vec<Vec<f64>>,
    pub velocity: VelocityField,
}

#[derive(Clone, Debug)]
pub struct DenseOutput {
    pub step: Arc<DenseStep>,
    /// False when the result came from the cache.
    pub recomputed: bool,
}

impl DenseOutput {
    pub fn velocity(&self) -> &VelocityField {
        &self.step.velocity
    }
}

/// Runs dense and masked forwards of a trace through a surrogate model,
/// caching the dense result of each step (write once per step).
pub struct ForwardEngine<'a> {
    trace: &'a DenoiseTrace,
    model: &'a SurrogateModel,
    grid: BlockGrid,
    dense: Vec<OnceLock<Arc<DenseStep>>>,
}

impl<'a> ForwardEngine<'a> {
    pub fn new(trace: &'a DenoiseTrace, model: &'a SurrogateModel) -> Result<Self> {
        let c = trace.config();
        if model.shape() != c.velocity_shape {
            return Err(Error::Shape(format!("model emits {:?}, trace expects {:?}", model.shape(), c.velocity_shape)));
        }
        Ok(Self { trace, model, grid: c.grid()?, dense: (0..c.steps).map(|_| OnceLock::new()).collect() })
    }

    pub fn trace(&self) -> &'a DenoiseTrace {
        self.trace
    }

    pub fn model(&self) -> &'a SurrogateModel {
        self.model
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.trace.config().steps {
            return Err(Error::Domain(format!(
                "step {step} outside trajectory of {} steps",
                self.trace.config().steps
            )));
        }
        Ok(())
    }

    /// Attention output of one head at one step.
    pub fn head_attention(&self, step: usize, head: usize, mask: Option<&BlockMask>) -> Result<Vec<f64>> {
        self.check_step(step)?;
        let c = self.trace.config();
        if head >= c.num_heads() {
            return Err(Error::Domain(format!("head {head} outside {} heads", c.num_heads())));
        }
        attention(
            self.trace.q(step, head),
            self.trace.k(step, head),
            self.trace.v(step, head),
            c.head_dim,
            mask.map(|m| (m, &self.grid)),
        )
    }

    pub fn dense_forward(&self, step: usize) -> Result<DenseOutput> {
        self.check_step(step)?;
        if let Some(hit) = self.dense[step].get() {
            return Ok(DenseOutput { step: Arc::clone(hit), recomputed: false });
        }
        let heads = self.trace.config().num_heads();
        let head_outputs = (0..heads).map(|h| self.head_attention(step, h, None)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = head_outputs.iter().map(Vec::as_slice).collect();
        let velocity = self.model.project(&refs)?;
        let computed = Arc::new(DenseStep { head_outputs, velocity });
        let stored = self.dense[step].get_or_init(|| Arc::clone(&computed));
        Ok(DenseOutput { step: Arc::clone(stored), recomputed: true })
    }

    pub fn cached_dense(&self, step: usize) -> Option<Arc<DenseStep>> {
        self.dense.get(step).and_then(|c| c.get().cloned())
    }

    /// Forward with the given heads sparsified. Dense heads reuse the cached
    /// dense outputs when present.
    pub fn sparse_forward(&self, step: usize, masks: &HeadMasks) -> Result<VelocityField> {
        self.check_step(step)?;
        let c = self.trace.config();
        if masks.len() != c.num_heads() {
            return Err(Error::Shape(format!("{} masks for {} heads", masks.len(), c.num_heads())));
        }
        for m in masks.iter().flatten() {
            if m.num_blocks() != self.grid.num_blocks() {
                return Err(Error::Shape(format!(
                    "mask over {} blocks, grid has {}",
                    m.num_blocks(),
                    self.grid.num_blocks()
                )));
            }
        }
        let cached = self.cached_dense(step);
        let mut owned: Vec<Option<Vec<f64>>> = vec![None; masks.len()];
        for (h, m) in masks.iter().enumerate() {
            match (m, &cached) {
                (Some(mask), _) => owned[h] = Some(self.head_attention(step, h, Some(mask))?),
                (None, None) => owned[h] = Some(self.head_attention(step, h, None)?),
                (None, Some(_)) => {}
            }
        }
        let refs: Vec<&[f64]> = owned
            .iter()
            .enumerate()
            .map(|(h, o)| match o {
                Some(v) => v.as_slice(),
                None => cached.as_ref().expect("cached dense step").head_outputs[h].as_slice(),
            })
            .collect();
        self.model.project(&refs)
    }

    /// Velocity when the listed heads' attention outputs are replaced.
    pub fn forward_with_outputs(&self, step: usize, replaced: &[(usize, Vec<f64>)]) -> Result<VelocityField> {
        let dense = self.dense_forward(step)?;
        let mut refs: Vec<&[f64]> = dense.step.head_outputs.iter().map(Vec::as_slice).collect();
        for (h, out) in replaced {
            let slot = refs
                .get_mut(*h)
                .ok_or_else(|| Error::Domain(format!("head {h} outside {} heads", dense.step.head_outputs.len())))?;
            *slot = out.as_slice();
        }
        self.model.project(&refs)
    }
}
