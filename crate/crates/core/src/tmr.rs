//! Temporal mask reuse.
//!
//! Each head keeps an anchor: the step of its last fresh mask prediction,
//! the token-averaged query and key features at that step, and the mask
//! itself. At a later step the L1 distance between current and anchor pooled
//! features decides whether the anchor mask is reused (`drift <= delta`) or a
//! new mask is predicted and becomes the anchor.

use serde::{Deserialize, Serialize};

use crate::blocksparse::BlockMask;
use crate::error::{Error, Result};

fn check_features(name: &str, a: &[f32], b: &[f32], head_dim: usize) -> Result<usize> {
    if head_dim == 0 || a.is_empty() || a.len() != b.len() || !a.len().is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "{name} matrices of {} and {} values do not share an N x {head_dim} shape",
            a.len(),
            b.len()
        )));
    }
    Ok(a.len() / head_dim)
}

/// `(1/N) sum_i ||q_a,i - q_b,i||_1 + (1/N) sum_j ||k_a,j - k_b,j||_1`.
pub fn full_token_drift(qa: &[f32], qb: &[f32], ka: &[f32], kb: &[f32], head_dim: usize) -> Result<f64> {
    let nq = check_features("query", qa, qb, head_dim)?;
    let nk = check_features("key", ka, kb, head_dim)?;
    if nq != nk {
        return Err(Error::Shape(format!("{nq} query rows vs {nk} key rows")));
    }
    let l1 = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).sum::<f64>();
    Ok(l1(qa, qb) / nq as f64 + l1(ka, kb) / nk as f64)
}

/// Token average of a row-major `N x head_dim` matrix.
pub fn mean_pool(x: &[f32], head_dim: usize) -> Vec<f64> {
    let n = x.len() / head_dim;
    let mut acc = vec![0.0f64; head_dim];
    for row in x.chunks_exact(head_dim) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += f64::from(*v);
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    acc
}

/// `||qa - qb||_1 + ||ka - kb||_1` on pooled features.
pub fn mean_pool_drift(qa: &[f64], qb: &[f64], ka: &[f64], kb: &[f64]) -> Result<f64> {
    if qa.len() != qb.len() || ka.len() != kb.len() || qa.len() != ka.len() {
        return Err(Error::Shape(format!(
            "pooled feature lengths {}, {}, {}, {} differ",
            qa.len(),
            qb.len(),
            ka.len(),
            kb.len()
        )));
    }
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    Ok(l1(qa, qb) + l1(ka, kb))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    ColdStart,
    Refresh,
    Reuse,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::ColdStart => "cold_start",
            Decision::Refresh => "refresh",
            Decision::Reuse => "reuse",
        }
    }

    /// Whether a fresh mask was predicted.
    pub fn predicted(&self) -> bool {
        !matches!(self, Decision::Reuse)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub step: usize,
    pub q_mean: Vec<f64>,
    pub k_mean: Vec<f64>,
    pub mask: Option<BlockMask>,
}

/// Per-head anchor store; an entry exists once a head has been refreshed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftCache {
    anchors: Vec<Option<Anchor>>,
}

impl DriftCache {
    pub fn new(num_heads: usize) -> Self {
        Self { anchors: vec![None; num_heads] }
    }

    pub fn num_heads(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchor(&self, head: usize) -> Option<&Anchor> {
        self.anchors.get(head).and_then(Option::as_ref)
    }

    /// Direct slot access, mainly for tests that need to corrupt an entry.
    pub fn anchor_mut(&mut self, head: usize) -> Option<&mut Option<Anchor>> {
        self.anchors.get_mut(head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmrConfig {
    /// Raw L1 reuse threshold on the pooled drift.
    pub delta: f64,
    pub gate_lo: f64,
    pub gate_hi: f64,
    pub gate: bool,
}

impl Default for TmrConfig {
    fn default() -> Self {
        Self { delta: 30.0, gate_lo: 0.1, gate_hi: 0.9, gate: true }
    }
}

impl TmrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::Config(format!("reuse threshold {} must be >= 0", self.delta)));
        }
        check_gate(self.gate_lo, self.gate_hi)
    }
}

fn check_gate(lo: f64, hi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("gate bounds ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
    }
    Ok(())
}

/// The read-only half of a controller step: pooled features, drift to the
/// anchor, and the head's own refresh vote.
#[derive(Clone, Debug, PartialEq)]
pub struct Assessment {
    pub head: usize,
    pub q_mean: Vec<f64>,
    pub k_mean: Vec<f64>,
    /// `None` on cold start.
    pub drift: Option<f64>,
    pub wants_refresh: bool,
}

pub fn assess(
    cache: &DriftCache,
    head: usize,
    q: &[f32],
    k: &[f32],
    head_dim: usize,
    delta: f64,
) -> Result<Assessment> {
    if head >= cache.num_heads() {
        return Err(Error::Domain(format!("head {head} outside cache of {} heads", cache.num_heads())));
    }
    check_features("query/key", q, k, head_dim)?;
    let q_mean = mean_pool(q, head_dim);
    let k_mean = mean_pool(k, head_dim);
    let drift = match cache.anchor(head) {
        None => None,
        Some(a) => Some(mean_pool_drift(&a.q_mean, &q_mean, &a.k_mean, &k_mean)?),
    };
    let wants_refresh = drift.is_none_or(|d| d > delta);
    Ok(Assessment { head, q_mean, k_mean, drift, wants_refresh })
}

/// Applies a (possibly gated) refresh decision. A head without an anchor is
/// always predicted, whatever `refresh` says.
pub fn commit<F>(
    cache: &mut DriftCache,
    assessment: Assessment,
    step: usize,
    refresh: bool,
    predict: F,
) -> Result<(BlockMask, Decision)>
where
    F: FnOnce(usize, usize) -> Result<BlockMask>,
{
    let head = assessment.head;
    let slot = cache.anchors.get_mut(head).ok_or_else(|| Error::Domain(format!("head {head} outside cache")))?;
    let decision = match slot {
        None => Decision::ColdStart,
        Some(anchor) => {
            if anchor.step > step {
                return Err(Error::Precondition(format!(
                    "head {head} anchored at step {} after current step {step}",
                    anchor.step
                )));
            }
            if refresh {
                Decision::Refresh
            } else {
                let mask = anchor
                    .mask
                    .clone()
                    .ok_or_else(|| Error::Internal(format!("head {head} has an anchor without a mask")))?;
                return Ok((mask, Decision::Reuse));
            }
        }
    };
    let mask = predict(head, step)?;
    *slot = Some(Anchor { step, q_mean: assessment.q_mean, k_mean: assessment.k_mean, mask: Some(mask.clone()) });
    Ok((mask, decision))
}

/// One ungated controller step for a single head.
#[allow(clippy::too_many_arguments)]
pub fn tmr_step<F>(
    cache: &mut DriftCache,
    head: usize,
    step: usize,
    q: &[f32],
    k: &[f32],
    head_dim: usize,
    delta: f64,
    predict: F,
) -> Result<(BlockMask, Decision)>
where
    F: FnOnce(usize, usize) -> Result<BlockMask>,
{
    let a = assess(cache, head, q, k, head_dim, delta)?;
    let refresh = a.wants_refresh;
    commit(cache, a, step, refresh, predict)
}

/// Layer-level override of per-head refresh votes: below `lo` the whole
/// layer reuses, above `hi` the whole layer refreshes.
pub fn layer_gate(flags: &[bool], lo: f64, hi: f64) -> Result<Vec<bool>> {
    check_gate(lo, hi)?;
    if flags.is_empty() {
        return Err(Error::Domain("layer gate needs at least one head".into()));
    }
    let f = flags.iter().filter(|&&x| x).count() as f64 / flags.len() as f64;
    Ok(if f < lo {
        vec![false; flags.len()]
    } else if f > hi {
        vec![true; flags.len()]
    } else {
        flags.to_vec()
    })
}

/// Smallest `C` with `R <= C * d` on every `(d, R)` sample.
pub fn fit_stability_constant(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("no drift samples".into()));
    }
    let mut c = 0.0f64;
    for &(d, r) in samples {
        if !(d > 0.0 && d.is_finite()) || !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("sample (drift {d}, ratio {r}) needs drift > 0 and ratio >= 0")));
        }
        c = c.max(r / d);
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheMode {
    FullToken,
    MeanPooled,
}

/// Bytes needed to cache query and key features for drift checks.
pub fn cache_footprint(
    layers: u64,
    heads: u64,
    tokens: u64,
    head_dim: u64,
    bytes_per_scalar: u64,
    branches: u64,
    mode: CacheMode,
) -> u64 {
    let per_head = match mode {
        CacheMode::FullToken => tokens * head_dim,
        CacheMode::MeanPooled => head_dim,
    };
    layers * heads * per_head * 2 * bytes_per_scalar * branches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitset::Bitset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
    }

    #[test]
    fn drift_of_identical_inputs_is_zero() {
        let x = [0.5f32, -1.0, 2.0, 0.25];
        assert_eq!(full_token_drift(&x, &x, &x, &x, 2).unwrap(), 0.0);
        let p = mean_pool(&x, 2);
        assert_eq!(mean_pool_drift(&p, &p, &p, &p).unwrap(), 0.0);
    }

    #[test]
    fn constant_shift_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qa = random(&mut rng, 6 * 4);
        let qb: Vec<f32> = qa.iter().map(|v| v + 0.5).collect();
        let k = random(&mut rng, 6 * 4);
        assert!((full_token_drift(&qa, &qb, &k, &k, 4).unwrap() - 2.0).abs() < 1e-6);
        let d = mean_pool_drift(&mean_pool(&qa, 4), &mean_pool(&qb, 4), &mean_pool(&k, 4), &mean_pool(&k, 4)).unwrap();
        assert!((d - 2.0).abs() < 1e-6);
    }

    #[test]
    fn full_drift_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (8, 4);
        let [qa, qb, ka, kb] = [0; 4].map(|_| random(&mut rng, n * d));
        let mut oracle = 0.0f64;
        for i in 0..n {
            let mut rq = 0.0;
            let mut rk = 0.0;
            for j in 0..d {
                rq += (qa[i * d + j] as f64 - qb[i * d + j] as f64).abs();
                rk += (ka[i * d + j] as f64 - kb[i * d + j] as f64).abs();
            }
            oracle += (rq + rk) / n as f64;
        }
        assert!((full_token_drift(&qa, &qb, &ka, &kb, d).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn pooled_drift_never_exceeds_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (n, d) = (rng.random_range(1..10), rng.random_range(1..6));
            let [qa, qb, ka, kb] = [0; 4].map(|_| random(&mut rng, n * d));
            let full = full_token_drift(&qa, &qb, &ka, &kb, d).unwrap();
            let pooled =
                mean_pool_drift(&mean_pool(&qa, d), &mean_pool(&qb, d), &mean_pool(&ka, d), &mean_pool(&kb, d))
                    .unwrap();
            assert!(pooled <= full + 1e-12, "{pooled} > {full}");
        }
    }

    #[test]
    fn drift_shape_errors() {
        assert!(matches!(full_token_drift(&[0.0; 4], &[0.0; 6], &[0.0; 4], &[0.0; 4], 2), Err(Error::Shape(_))));
        assert!(mean_pool_drift(&[0.0; 2], &[0.0; 3], &[0.0; 2], &[0.0; 2]).is_err());
    }

    fn mask(step: usize) -> Result<BlockMask> {
        Ok(BlockMask::from_blocks(Bitset::from_indices(4, [step % 4])).with_step(step))
    }

    #[test]
    fn controller_cold_start_reuse_refresh() {
        let mut cache = DriftCache::new(1);
        let x0 = [1.0f32, 0.0, 0.0, 1.0];
        let (m0, d0) = tmr_step(&mut cache, 0, 0, &x0, &x0, 2, 0.5, |_, s| mask(s)).unwrap();
        assert_eq!(d0, Decision::ColdStart);
        assert_eq!(cache.anchor(0).unwrap().step, 0);

        // Small drift: reuse and leave the cache untouched.
        let x1 = [1.1f32, 0.0, 0.0, 1.0];
        let before = cache.clone();
        let (m1, d1) = tmr_step(&mut cache, 0, 1, &x1, &x1, 2, 0.5, |_, s| mask(s)).unwrap();
        assert_eq!(d1, Decision::Reuse);
        assert_eq!(m1, m0);
        assert_eq!(cache, before);

        // Large drift: refresh and move the anchor.
        let x2 = [3.0f32, 0.0, 0.0, 1.0];
        let (m2, d2) = tmr_step(&mut cache, 0, 2, &x2, &x2, 2, 0.5, |_, s| mask(s)).unwrap();
        assert_eq!(d2, Decision::Refresh);
        assert_eq!(m2.origin_step, Some(2));
        assert_eq!(cache.anchor(0).unwrap().step, 2);
    }

    #[test]
    fn zero_delta_always_refreshes_on_drift() {
        let mut cache = DriftCache::new(1);
        for step in 0..5 {
            let x = [step as f32, 1.0];
            let (_, d) = tmr_step(&mut cache, 0, step, &x, &x, 2, 0.0, |_, s| mask(s)).unwrap();
            assert!(d.predicted());
        }
    }

    #[test]
    fn callback_errors_propagate_and_corruption_is_internal() {
        let mut cache = DriftCache::new(1);
        let x = [1.0f32, 1.0];
        let err = tmr_step(&mut cache, 0, 0, &x, &x, 2, 1.0, |_, _| Err(Error::Domain("boom".into())));
        assert!(matches!(err, Err(Error::Domain(_))));
        assert!(cache.anchor(0).is_none());

        tmr_step(&mut cache, 0, 0, &x, &x, 2, 1.0, |_, s| mask(s)).unwrap();
        cache.anchor_mut(0).unwrap().as_mut().unwrap().mask = None;
        let err = tmr_step(&mut cache, 0, 1, &x, &x, 2, 1.0, |_, s| mask(s));
        assert!(matches!(err, Err(Error::Internal(_))));
    }

    #[test]
    fn gate_examples() {
        assert_eq!(layer_gate(&[false; 6], 0.2, 0.8).unwrap(), vec![false; 6]);
        let five = [true, true, true, true, true, false];
        assert_eq!(layer_gate(&five, 0.1, 0.7).unwrap(), vec![true; 6]);
        let three = [true, false, true, false, true, false];
        assert_eq!(layer_gate(&three, 0.2, 0.8).unwrap(), three.to_vec());
        let one = [true, false, false, false, false, false];
        assert_eq!(layer_gate(&one, 0.2, 0.8).unwrap(), vec![false; 6]);
        assert!(matches!(layer_gate(&three, 0.8, 0.2), Err(Error::Config(_))));
        assert!(layer_gate(&[], 0.1, 0.9).is_err());
    }

    #[test]
    fn stability_constant_examples() {
        assert_eq!(fit_stability_constant(&[(1.0, 0.0), (3.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(fit_stability_constant(&[(1.0, 0.1), (2.0, 0.5)]).unwrap(), 0.25);
        assert!(fit_stability_constant(&[]).is_err());
        assert!(fit_stability_constant(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn footprint_arithmetic() {
        let pooled = cache_footprint(30, 12, 32760, 128, 2, 2, CacheMode::MeanPooled);
        assert_eq!(pooled, 368_640);
        // 30 * 12 * 32760 * 128 * 2 (Q and K) * 2 bytes * 2 branches
        let full = cache_footprint(30, 12, 32760, 128, 2, 2, CacheMode::FullToken);
        assert_eq!(full, 12_076_646_400);
        // ~0.35 MiB and ~11.2 GiB
        assert!((pooled as f64 / (1u64 << 20) as f64 - 0.35).abs() < 0.01);
        assert!((full as f64 / (1u64 << 30) as f64 - 11.25).abs() < 0.01);
        assert_eq!(cache_footprint(30, 12, 32760, 128, 2, 1, CacheMode::MeanPooled) * 2, pooled);
        assert_eq!(cache_footprint(30, 12, 32760, 128, 2, 1, CacheMode::FullToken) * 2, full);
    }
}
