use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, TraceConfig};
use crate::error::{Error, Result};

const TAG_MODEL: u64 = 0x4D_4F_44_45_4C;

/// Real 3D field of shape `(T_v, H_v, W_v)`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        let n = self.data.len() as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("field shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Fixed stand-in for the network downstream of attention.
///
/// Per token `n`, the concatenated head outputs of each layer are projected
/// to one channel and summed over layers:
/// `z[n] = sum_{l,h,d} o_{l,h}[n,d] * w[l,h,d] / sqrt(H*D)`.
/// The velocity is then `y = b + tanh(P z)` with `P` of shape `V x N`
/// (entries `N(0,1)/sqrt(N)`), so zero attention output yields exactly `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    num_heads: usize,
    heads_per_layer: usize,
    head_dim: usize,
    tokens: usize,
    shape: [usize; 3],
    out_weights: Vec<f64>,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

impl SurrogateModel {
    pub fn new(config: &TraceConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let v = config.velocity_len();
        let n = config.tokens;
        let out_weights = (0..config.num_heads() * config.head_dim).map(|_| normal()).collect();
        let p_scale = 1.0 / (n as f64).sqrt();
        let projection = (0..v * n).map(|_| normal() * p_scale).collect();
        let bias = (0..v).map(|_| 0.1 * normal()).collect();
        Ok(Self {
            num_heads: config.num_heads(),
            heads_per_layer: config.heads,
            head_dim: config.head_dim,
            tokens: n,
            shape: config.velocity_shape,
            out_weights,
            projection,
            bias,
        })
    }

    /// Model whose seed is derived from the trace seed.
    pub fn for_trace(config: &TraceConfig) -> Result<Self> {
        Self::new(config, mix_seed(config.seed, TAG_MODEL))
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn out_weights(&self) -> &[f64] {
        &self.out_weights
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn channel_scale(&self) -> f64 {
        1.0 / ((self.heads_per_layer * self.head_dim) as f64).sqrt()
    }

    /// Maps per-head attention outputs (flat head order, each `tokens x
    /// head_dim`) to a velocity field.
    pub fn project(&self, head_outputs: &[&[f64]]) -> Result<VelocityField> {
        let nd = self.tokens * self.head_dim;
        if head_outputs.len() != self.num_heads || head_outputs.iter().any(|o| o.len() != nd) {
            return Err(Error::Shape(format!("expected {} head outputs of {nd} values", self.num_heads)));
        }
        let d = self.head_dim;
        let scale = self.channel_scale();
        let mut z = vec![0.0f64; self.tokens];
        for (i, out) in head_outputs.iter().enumerate() {
            let w = &self.out_weights[i * d..(i + 1) * d];
            for (n, zn) in z.iter_mut().enumerate() {
                let row = &out[n * d..(n + 1) * d];
                *zn += row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for zn in &mut z {
            *zn *= scale;
        }
        let data = self
            .bias
            .iter()
            .enumerate()
            .map(|(v, b)| {
                let row = &self.projection[v * self.tokens..(v + 1) * self.tokens];
                let pre: f64 = row.iter().zip(&z).map(|(p, x)| p * x).sum();
                b + pre.tanh()
            })
            .collect();
        Ok(VelocityField { shape: self.shape, data })
    }

    /// Upper bound on `||dy|| / ||do||` (Frobenius norm over all head
    /// outputs): `||P||_F * ||w||_2 / sqrt(H*D)`, using `|tanh'| <= 1`.
    pub fn lipschitz_bound(&self) -> f64 {
        let p = self.projection.iter().map(|x| x * x).sum::<f64>().sqrt();
        let w = self.out_weights.iter().map(|x| x * x).sum::<f64>().sqrt();
        p * w * self.channel_scale()
    }
}
