//! Error-guided budgeted calibration.
//!
//! Offline, every head is measured at a few candidate top-p thresholds on
//! interval-sampled steps, with only that head sparsified. The measurements
//! define a multiple-choice knapsack: choose one operating point per head,
//! minimizing summed error subject to a minimum average sparsity.

mod measure;
mod probe;
mod solver;

pub use measure::{build_problem, measure_head, ErrorMetric, MeasureConfig};
pub use probe::{additive_surrogate_gap, quadratic_scaling_probe, GapReport, ScalingPoint};
pub use solver::{brute_force_assignment, lagrangian_bound, solve_budgeted_assignment, LagrangianBound};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measured outcome of one candidate threshold on one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub sparsity: f64,
    pub error: f64,
}

/// Error and sparsity tensors of shape `layers x heads x K`, flattened with
/// the candidate index fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProblem {
    pub layers: usize,
    pub heads: usize,
    pub taus: Vec<f64>,
    pub sparsity: Vec<f64>,
    pub error: Vec<f64>,
    /// Required average sparsity over all heads.
    pub budget: f64,
}

impl CalibrationProblem {
    pub fn new(
        layers: usize,
        heads: usize,
        taus: Vec<f64>,
        sparsity: Vec<f64>,
        error: Vec<f64>,
        budget: f64,
    ) -> Result<Self> {
        let p = Self { layers, heads, taus, sparsity, error, budget };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_heads() * self.num_candidates();
        if self.num_heads() == 0 || self.num_candidates() == 0 {
            return Err(Error::Config("calibration needs at least one head and one candidate".into()));
        }
        if self.sparsity.len() != n || self.error.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} entries, got sparsity {} and error {}",
                self.sparsity.len(),
                self.error.len()
            )));
        }
        if self.sparsity.iter().chain(&self.error).chain(&self.taus).any(|v| !v.is_finite()) {
            return Err(Error::Domain("calibration tensors must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(Error::Domain(format!("budget {} outside [0, 1]", self.budget)));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn num_candidates(&self) -> usize {
        self.taus.len()
    }

    pub fn s(&self, head: usize, k: usize) -> f64 {
        self.sparsity[head * self.num_candidates() + k]
    }

    pub fn e(&self, head: usize, k: usize) -> f64 {
        self.error[head * self.num_candidates() + k]
    }

    pub fn point(&self, head: usize, k: usize) -> OperatingPoint {
        OperatingPoint { tau: self.taus[k], sparsity: self.s(head, k), error: self.e(head, k) }
    }

    /// Objective and average sparsity of `assignment`, summed in head order.
    pub fn evaluate(&self, assignment: &[usize]) -> (f64, f64) {
        let mut obj = 0.0;
        let mut s = 0.0;
        for (h, &k) in assignment.iter().enumerate() {
            obj += self.e(h, k);
            s += self.s(h, k);
        }
        (obj, s / self.num_heads() as f64)
    }

    /// Highest achievable average sparsity.
    pub fn max_average_sparsity(&self) -> f64 {
        let best: Vec<usize> = (0..self.num_heads())
            .map(|h| {
                (0..self.num_candidates())
                    .max_by(|&a, &b| self.s(h, a).total_cmp(&self.s(h, b)).then(b.cmp(&a)))
                    .expect("at least one candidate")
            })
            .collect();
        self.evaluate(&best).1
    }

    pub fn with_budget(&self, budget: f64) -> Result<Self> {
        let mut p = self.clone();
        p.budget = budget;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSetting {
    pub layer: usize,
    pub head: usize,
    pub tau: f64,
    #[serde(rename = "S")]
    pub sparsity: f64,
    #[serde(rename = "E")]
    pub error: f64,
}

/// One selected operating point per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub budget: f64,
    pub objective: f64,
    pub achieved_sparsity: f64,
    pub solver: String,
    pub optimal: bool,
    pub heads: Vec<HeadSetting>,
    /// Candidate index per head; not part of the serialized table.
    #[serde(skip)]
    pub assignment: Vec<usize>,
}

impl CalibrationTable {
    pub fn from_assignment(problem: &CalibrationProblem, assignment: Vec<usize>, solver: &str, optimal: bool) -> Self {
        let (objective, achieved_sparsity) = problem.evaluate(&assignment);
        let heads = assignment
            .iter()
            .enumerate()
            .map(|(i, &k)| HeadSetting {
                layer: i / problem.heads,
                head: i % problem.heads,
                tau: problem.taus[k],
                sparsity: problem.s(i, k),
                error: problem.e(i, k),
            })
            .collect();
        Self {
            budget: problem.budget,
            objective,
            achieved_sparsity,
            solver: solver.to_string(),
            optimal,
            heads,
            assignment,
        }
    }

    /// Per-head thresholds in flat head order.
    pub fn thresholds(&self, layers: usize, heads: usize) -> Result<Vec<f64>> {
        let mut taus = vec![None; layers * heads];
        for s in &self.heads {
            if s.layer >= layers || s.head >= heads {
                return Err(Error::Shape(format!(
                    "table entry ({}, {}) outside {layers} x {heads} heads",
                    s.layer, s.head
                )));
            }
            let slot = &mut taus[s.layer * heads + s.head];
            if slot.is_some() {
                return Err(Error::Shape(format!("duplicate table entry ({}, {})", s.layer, s.head)));
            }
            *slot = Some(s.tau);
        }
        taus.into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| Error::Shape(format!("no table entry for head ({}, {})", i / heads, i % heads)))
            })
            .collect()
    }
}

/// Shared-threshold comparison point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedBaseline {
    pub tau: f64,
    pub objective: f64,
    pub achieved_sparsity: f64,
    pub feasible: bool,
}

/// Every head at the same measured threshold `tau`.
pub fn shared_threshold_baseline(problem: &CalibrationProblem, tau: f64) -> Result<SharedBaseline> {
    let k = problem
        .taus
        .iter()
        .position(|&t| (t - tau).abs() <= 1e-12)
        .ok_or_else(|| Error::Domain(format!("threshold {tau} was not measured")))?;
    let (objective, achieved_sparsity) = problem.evaluate(&vec![k; problem.num_heads()]);
    Ok(SharedBaseline { tau, objective, achieved_sparsity, feasible: achieved_sparsity >= problem.budget })
}

/// One seeded step from each of `intervals` equal slices of `[0, steps)`,
/// ascending; slice `j` is `[floor(j*T/J), floor((j+1)*T/J))`.
pub fn sample_timesteps(steps: usize, intervals: usize, seed: u64) -> Result<Vec<usize>> {
    if intervals == 0 || intervals > steps {
        return Err(Error::Domain(format!("cannot draw {intervals} intervals from {steps} steps")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..intervals)
        .map(|j| {
            let lo = j * steps / intervals;
            let hi = (j + 1) * steps / intervals;
            rng.random_range(lo..hi)
        })
        .collect())
}
