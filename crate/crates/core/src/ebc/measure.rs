use rayon::prelude::*;

use super::{sample_timesteps, CalibrationProblem, OperatingPoint};
use crate::blocksparse::{block_scores, realized_sparsity, top_p_select, BlockMask};
use crate::error::{Error, Result};
use crate::spectral::{band_energy_ratios, weighted_error, BandPartition, BandWeights};
use crate::trace::{mix_seed, ForwardEngine, VelocityField};

/// How a sparse velocity is scored against the dense one.
#[derive(Clone, Debug, PartialEq)]
pub enum ErrorMetric {
    /// Weighted band-energy ratios of the velocity error.
    Spectral { partition: BandPartition, weights: BandWeights, epsilon: f64 },
    /// Plain mean squared velocity error.
    Mse,
}

impl ErrorMetric {
    pub fn evaluate(&self, sparse: &VelocityField, dense: &VelocityField) -> Result<f64> {
        match self {
            ErrorMetric::Spectral { partition, weights, epsilon } => {
                let err = sparse.sub(dense)?;
                weighted_error(&band_energy_ratios(&err, dense, partition, *epsilon)?, weights)
            }
            ErrorMetric::Mse => sparse.mse(dense),
        }
    }
}

/// Measurement settings shared by every head.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureConfig {
    pub taus: Vec<f64>,
    pub intervals: usize,
    pub budget: f64,
    pub metric: ErrorMetric,
    pub seed: u64,
}

impl MeasureConfig {
    fn validate(&self) -> Result<()> {
        if self.taus.is_empty() {
            return Err(Error::Config("at least one candidate threshold is required".into()));
        }
        for (i, &t) in self.taus.iter().enumerate() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Domain(format!("candidate threshold {t} outside (0, 1]")));
            }
            if self.taus[..i].contains(&t) {
                return Err(Error::Config(format!("candidate threshold {t} listed twice")));
            }
        }
        Ok(())
    }
}

/// Mean error and realized sparsity of one head at threshold `tau` over
/// `steps`, with only that head sparsified. Dense outputs for every step
/// must already be cached.
pub fn measure_head(
    engine: &ForwardEngine<'_>,
    head: usize,
    tau: f64,
    steps: &[usize],
    metric: &ErrorMetric,
) -> Result<OperatingPoint> {
    if steps.is_empty() {
        return Err(Error::Domain("no steps to measure".into()));
    }
    let trace = engine.trace();
    let c = trace.config();
    if head >= c.num_heads() {
        return Err(Error::Domain(format!("head {head} outside {} heads", c.num_heads())));
    }
    let mut error = 0.0;
    let mut sparsity = 0.0;
    for &t in steps {
        let dense = engine
            .cached_dense(t)
            .ok_or_else(|| Error::Precondition(format!("dense output for step {t} is not cached")))?;
        let scores = block_scores(trace.q(t, head), trace.k(t, head), c.head_dim, engine.grid())?;
        let mask = top_p_select(&scores, tau)?;
        let mut masks: Vec<Option<BlockMask>> = vec![None; c.num_heads()];
        sparsity += realized_sparsity(&mask, engine.grid());
        masks[head] = Some(mask);
        let sparse = engine.sparse_forward(t, &masks)?;
        error += metric.evaluate(&sparse, &dense.velocity)?;
    }
    let n = steps.len() as f64;
    Ok(OperatingPoint { tau, sparsity: sparsity / n, error: error / n })
}

/// Measures every head at every candidate. Head `i` is assigned trace
/// `i % pool.len()` and its own interval-sampled steps.
pub fn build_problem(pool: &[ForwardEngine<'_>], config: &MeasureConfig) -> Result<CalibrationProblem> {
    config.validate()?;
    let first = pool.first().ok_or_else(|| Error::Config("empty trace pool".into()))?;
    let c0 = first.trace().config();
    for e in pool {
        let c = e.trace().config();
        if (c.layers, c.heads, c.tokens, c.head_dim, c.steps, c.block_size, c.velocity_shape)
            != (c0.layers, c0.heads, c0.tokens, c0.head_dim, c0.steps, c0.block_size, c0.velocity_shape)
        {
            return Err(Error::Shape("traces in the pool have different shapes".into()));
        }
    }
    let n = c0.num_heads();
    let steps: Vec<Vec<usize>> = (0..n)
        .map(|h| sample_timesteps(c0.steps, config.intervals, mix_seed(config.seed, h as u64)))
        .collect::<Result<_>>()?;

    // Warm the dense cache for every (trace, step) that will be read.
    let mut warm: Vec<(usize, usize)> =
        (0..n).flat_map(|h| steps[h].iter().map(move |&t| (h % pool.len(), t))).collect();
    warm.sort_unstable();
    warm.dedup();
    warm.par_iter().try_for_each(|&(p, t)| pool[p].dense_forward(t).map(|_| ()))?;

    let k = config.taus.len();
    let points: Vec<OperatingPoint> = (0..n * k)
        .into_par_iter()
        .map(|i| {
            let (h, j) = (i / k, i % k);
            measure_head(&pool[h % pool.len()], h, config.taus[j], &steps[h], &config.metric)
        })
        .collect::<Result<_>>()?;
    CalibrationProblem::new(
        c0.layers,
        c0.heads,
        config.taus.clone(),
        points.iter().map(|p| p.sparsity).collect(),
        points.iter().map(|p| p.error).collect(),
        config.budget,
    )
}
