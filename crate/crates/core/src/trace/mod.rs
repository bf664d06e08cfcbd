//! Synthetic denoising trajectories.
//!
//! Every head carries an AR(1) feature process
//! `X_t = kappa * X_{t-1} + sqrt(1 - kappa^2) * xi_t`, where `kappa` is the
//! head's smoothness. Innovations are Gaussian with a block-shared component
//! so that block-pooled summaries (and therefore block scores) carry real
//! structure, and query/key features are scaled by a per-head gain that sets
//! how peaked that head's attention is.

mod forward;
mod io;
mod model;

pub use forward::{attention, attention_probs, DenseOutput, DenseStep, ForwardEngine, HeadMasks};
pub use io::{read_trace, read_trace_file, write_trace, write_trace_file, TRACE_MAGIC, TRACE_VERSION};
pub use model::{SurrogateModel, VelocityField};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocksparse::BlockGrid;
use crate::error::{Error, Result};

/// Weight of the block-shared part of each innovation.
const BLOCK_COHERENCE: f64 = 0.8;

const TAG_HEAD_PARAMS: u64 = 0x48_45_41_44;

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tensor {
    Query = 0,
    Key = 1,
    Value = 2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
    pub steps: usize,
    pub block_size: usize,
    /// Velocity field shape `(T_v, H_v, W_v)`.
    pub velocity_shape: [usize; 3],
    /// Range each head's smoothness is drawn from; `1` freezes features.
    pub kappa_range: (f32, f32),
    /// Range each head's query/key gain is drawn from.
    pub gain_range: (f32, f32),
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 6,
            tokens: 256,
            head_dim: 16,
            steps: 50,
            block_size: 16,
            velocity_shape: [4, 8, 8],
            kappa_range: (0.5, 0.999),
            gain_range: (1.0, 3.0),
            seed: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("head_dim", self.head_dim),
            ("steps", self.steps),
            ("block_size", self.block_size),
            ("velocity T", self.velocity_shape[0]),
            ("velocity H", self.velocity_shape[1]),
            ("velocity W", self.velocity_shape[2]),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::Config(format!("{name} = {v} does not fit in u32")));
            }
        }
        BlockGrid::new(self.tokens, self.block_size)?;
        let (klo, khi) = self.kappa_range;
        if !(0.0..=1.0).contains(&klo) || !(0.0..=1.0).contains(&khi) || klo > khi {
            return Err(Error::Config(format!("kappa range ({klo}, {khi}) must satisfy 0 <= lo <= hi <= 1")));
        }
        let (glo, ghi) = self.gain_range;
        if !(glo.is_finite() && ghi.is_finite()) || glo <= 0.0 || glo > ghi {
            return Err(Error::Config(format!("gain range ({glo}, {ghi}) must satisfy 0 < lo <= hi")));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BlockGrid> {
        BlockGrid::new(self.tokens, self.block_size)
    }

    pub fn num_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn head_index(&self, layer: usize, head: usize) -> usize {
        layer * self.heads + head
    }

    pub fn head_coords(&self, index: usize) -> (usize, usize) {
        (index / self.heads, index % self.heads)
    }

    pub fn velocity_len(&self) -> usize {
        self.velocity_shape.iter().product()
    }

    /// Number of f32 values in a serialized payload.
    pub fn payload_len(&self) -> usize {
        self.steps * self.num_heads() * 3 * self.tokens * self.head_dim
    }

    /// Per-head smoothness and gain, drawn from the seeded ranges in flat
    /// head order.
    pub fn head_params(&self) -> Vec<HeadParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, TAG_HEAD_PARAMS));
        let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
        (0..self.num_heads())
            .map(|_| {
                let (klo, khi) = (f64::from(self.kappa_range.0), f64::from(self.kappa_range.1));
                let (glo, ghi) = (f64::from(self.gain_range.0), f64::from(self.gain_range.1));
                let kappa = klo + (khi - klo) * unit.sample(&mut rng);
                let gain = glo + (ghi - glo) * unit.sample(&mut rng);
                HeadParams { kappa, gain }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub kappa: f64,
    pub gain: f64,
}

/// Query/key/value features for every `(step, layer, head)`, stored in the
/// on-disk order `(step, layer, head, tensor, token, dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseTrace {
    config: TraceConfig,
    head_params: Vec<HeadParams>,
    data: Vec<f32>,
}

impl DenoiseTrace {
    pub fn from_parts(config: TraceConfig, data: Vec<f32>) -> Result<Self> {
        config.validate()?;
        if data.len() != config.payload_len() {
            return Err(Error::Shape(format!(
                "payload has {} values, config implies {}",
                data.len(),
                config.payload_len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        let head_params = config.head_params();
        Ok(Self { config, head_params, data })
    }

    pub fn config(&self) -> &TraceConfig {
        &self.config
    }

    pub fn head_params(&self) -> &[HeadParams] {
        &self.head_params
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn offset(&self, step: usize, head_index: usize, tensor: Tensor) -> usize {
        let c = &self.config;
        let nd = c.tokens * c.head_dim;
        ((step * c.num_heads() + head_index) * 3 + tensor as usize) * nd
    }

    /// Row-major `tokens x head_dim` slice. Panics on out-of-range indices.
    pub fn tensor(&self, step: usize, head_index: usize, tensor: Tensor) -> &[f32] {
        assert!(step < self.config.steps && head_index < self.config.num_heads());
        let start = self.offset(step, head_index, tensor);
        &self.data[start..start + self.config.tokens * self.config.head_dim]
    }

    pub fn q(&self, step: usize, head_index: usize) -> &[f32] {
        self.tensor(step, head_index, Tensor::Query)
    }

    pub fn k(&self, step: usize, head_index: usize) -> &[f32] {
        self.tensor(step, head_index, Tensor::Key)
    }

    pub fn v(&self, step: usize, head_index: usize) -> &[f32] {
        self.tensor(step, head_index, Tensor::Value)
    }
}

fn draw_innovation(rng: &mut ChaCha8Rng, tokens: usize, dim: usize, block_size: usize, out: &mut [f64]) {
    let nb = tokens / block_size;
    let shared: Vec<f64> = (0..nb * dim).map(|_| StandardNormal.sample(rng)).collect();
    let own = (1.0 - BLOCK_COHERENCE * BLOCK_COHERENCE).sqrt();
    for t in 0..tokens {
        let b = t / block_size;
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(rng);
            out[t * dim + d] = BLOCK_COHERENCE * shared[b * dim + d] + own * noise;
        }
    }
}

/// Generates every step of one head: `steps * 3 * tokens * dim` values in
/// `(step, tensor, token, dim)` order.
fn generate_head(config: &TraceConfig, head_index: usize, params: HeadParams) -> Vec<f32> {
    let nd = config.tokens * config.head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1 + head_index as u64));
    let mut state = vec![vec![0.0f64; nd]; 3];
    let mut xi = vec![0.0f64; nd];
    let carry = params.kappa;
    let fresh = (1.0 - params.kappa * params.kappa).max(0.0).sqrt();
    let mut out = Vec::with_capacity(config.steps * 3 * nd);
    for step in 0..config.steps {
        for (tensor, z) in state.iter_mut().enumerate() {
            draw_innovation(&mut rng, config.tokens, config.head_dim, config.block_size, &mut xi);
            if step == 0 {
                z.copy_from_slice(&xi);
            } else {
                for (zi, e) in z.iter_mut().zip(&xi) {
                    *zi = carry * *zi + fresh * e;
                }
            }
            let gain = if tensor == Tensor::Value as usize { 1.0 } else { params.gain };
            out.extend(z.iter().map(|v| (gain * v) as f32));
        }
    }
    out
}

/// Deterministic synthetic trace for `config`.
pub fn generate_trace(config: &TraceConfig) -> Result<DenoiseTrace> {
    config.validate()?;
    let head_params = config.head_params();
    let per_head: Vec<Vec<f32>> =
        head_params.par_iter().enumerate().map(|(i, p)| generate_head(config, i, *p)).collect();

    let nd = config.tokens * config.head_dim;
    let mut data = vec![0.0f32; config.payload_len()];
    for (i, values) in per_head.iter().enumerate() {
        for step in 0..config.steps {
            for tensor in 0..3 {
                let src = (step * 3 + tensor) * nd;
                let dst = ((step * config.num_heads() + i) * 3 + tensor) * nd;
                data[dst..dst + nd].copy_from_slice(&values[src..src + nd]);
            }
        }
    }
    Ok(DenoiseTrace { config: config.clone(), head_params, data })
}
