//! Exact multiple-choice knapsack solver and its brute-force oracle.
//!
//! Both solvers rank complete assignments the same way: lower objective,
//! then higher average sparsity, then the lexicographically smallest vector
//! of candidate indices in head order. Objectives and sparsities are always
//! re-evaluated by summing in head order so the two agree bit for bit.

use std::cmp::Ordering;

use super::{CalibrationProblem, CalibrationTable};
use crate::error::{Error, Result};

const OBJ_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const BRUTE_FORCE_LIMIT: f64 = 1e7;

#[derive(Clone, Debug)]
struct Ranked {
    objective: f64,
    sparsity: f64,
    assignment: Vec<usize>,
}

fn rank(a: &Ranked, b: &Ranked) -> Ordering {
    a.objective
        .total_cmp(&b.objective)
        .then(b.sparsity.total_cmp(&a.sparsity))
        .then_with(|| a.assignment.cmp(&b.assignment))
}

fn ensure_feasible(problem: &CalibrationProblem) -> Result<()> {
    problem.validate()?;
    let max = problem.max_average_sparsity();
    if max < problem.budget {
        return Err(Error::Infeasible { requested: problem.budget, max_achievable: max });
    }
    Ok(())
}

/// Exhaustive enumeration; refuses instances with more than 10^7 assignments.
pub fn brute_force_assignment(problem: &CalibrationProblem) -> Result<CalibrationTable> {
    problem.validate()?;
    let n = problem.num_heads();
    let k = problem.num_candidates();
    let size = (k as f64).powi(n as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!("{k}^{n} assignments exceed the 1e7 enumeration limit")));
    }
    ensure_feasible(problem)?;

    let mut assignment = vec![0usize; n];
    let mut best: Option<Ranked> = None;
    loop {
        let (objective, sparsity) = problem.evaluate(&assignment);
        if sparsity >= problem.budget {
            let cand = Ranked { objective, sparsity, assignment: assignment.clone() };
            if best.as_ref().is_none_or(|b| rank(&cand, b) == Ordering::Less) {
                best = Some(cand);
            }
        }
        // odometer, last head fastest
        let mut i = n;
        loop {
            if i == 0 {
                let best = best.ok_or_else(|| Error::Internal("feasible instance without a solution".into()))?;
                return Ok(CalibrationTable::from_assignment(problem, best.assignment, "brute-force", true));
            }
            i -= 1;
            assignment[i] += 1;
            if assignment[i] < k {
                break;
            }
            assignment[i] = 0;
        }
    }
}

/// Candidates of one head that survive dominance pruning, ordered by
/// ascending error, then descending sparsity, then index.
fn undominated(problem: &CalibrationProblem, head: usize) -> Vec<usize> {
    let k = problem.num_candidates();
    let (e, s) = (|j| problem.e(head, j), |j| problem.s(head, j));
    let mut keep: Vec<usize> = (0..k)
        .filter(|&j| !(0..k).any(|i| i != j && e(i) <= e(j) && s(i) >= s(j) && (e(i) < e(j) || s(i) > s(j) || i < j)))
        .collect();
    keep.sort_by(|&a, &b| e(a).total_cmp(&e(b)).then(s(b).total_cmp(&s(a))).then(a.cmp(&b)));
    keep
}

/// Lower convex envelope of one head's undominated points as
/// `(base sparsity, base error, increments (dS, dE))`, starting at the
/// minimum-error point.
fn envelope(problem: &CalibrationProblem, head: usize, items: &[usize]) -> (f64, f64, Vec<(f64, f64)>) {
    let mut pts: Vec<(f64, f64)> = items.iter().map(|&j| (problem.s(head, j), problem.e(head, j))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // drop b if it lies on or above the chord a -> p
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let (s0, e0) = hull[0];
    let incs = hull.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
    (s0, e0, incs)
}

/// Linear-relaxation data for a set of heads: the cheapest starting point and
/// all envelope increments sorted by marginal cost.
#[derive(Clone, Debug)]
struct Relaxation {
    base_sparsity: f64,
    base_error: f64,
    max_sparsity: f64,
    increments: Vec<(f64, f64)>,
}

impl Relaxation {
    fn build(parts: &[HeadEnvelope]) -> Self {
        let mut increments: Vec<(f64, f64)> = parts.iter().flat_map(|p| p.2.iter().copied()).collect();
        increments.sort_by(|a, b| (a.1 / a.0).total_cmp(&(b.1 / b.0)));
        Self {
            base_sparsity: parts.iter().map(|p| p.0).sum(),
            base_error: parts.iter().map(|p| p.1).sum(),
            max_sparsity: parts.iter().map(|p| p.3).sum(),
            increments,
        }
    }

    /// Minimum relaxed error reaching summed sparsity `need`, with the
    /// marginal price of the binding increment; `None` if out of reach.
    fn bound(&self, need: f64) -> Option<(f64, f64)> {
        let mut rem = need - self.base_sparsity;
        let mut value = self.base_error;
        if rem <= 0.0 {
            return Some((value, 0.0));
        }
        for &(ds, de) in &self.increments {
            if ds >= rem {
                return Some((value + de * rem / ds, de / ds));
            }
            value += de;
            rem -= ds;
        }
        if rem <= FEAS_TOL {
            let price = self.increments.last().map_or(0.0, |&(ds, de)| de / ds);
            Some((value, price))
        } else {
            None
        }
    }
}

/// Base sparsity, base error, hull increments and maximum sparsity of one head.
type HeadEnvelope = (f64, f64, Vec<(f64, f64)>, f64);

/// Lagrangian dual of the sparsity constraint at its optimal multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagrangianBound {
    pub lambda: f64,
    /// `sum_h min_k (E - lambda S) + lambda * LH * budget`; a lower bound on
    /// the optimal objective.
    pub value: f64,
}

fn head_parts(problem: &CalibrationProblem) -> Vec<(Vec<usize>, HeadEnvelope)> {
    (0..problem.num_heads())
        .map(|h| {
            let items = undominated(problem, h);
            let (s0, e0, incs) = envelope(problem, h, &items);
            let smax = items.iter().map(|&j| problem.s(h, j)).fold(f64::NEG_INFINITY, f64::max);
            (items, (s0, e0, incs, smax))
        })
        .collect()
}

/// Best Lagrangian lower bound, read off the per-head lower envelopes.
pub fn lagrangian_bound(problem: &CalibrationProblem) -> Result<LagrangianBound> {
    ensure_feasible(problem)?;
    let parts: Vec<_> = head_parts(problem).into_iter().map(|p| p.1).collect();
    let relax = Relaxation::build(&parts);
    let need = problem.budget * problem.num_heads() as f64;
    let (_, lambda) =
        relax.bound(need).ok_or_else(|| Error::Internal("relaxation infeasible on a feasible instance".into()))?;
    let value = (0..problem.num_heads())
        .map(|h| {
            (0..problem.num_candidates())
                .map(|k| problem.e(h, k) - lambda * problem.s(h, k))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        + lambda * need;
    Ok(LagrangianBound { lambda, value })
}

struct Search<'a> {
    problem: &'a CalibrationProblem,
    order: Vec<usize>,
    items: Vec<Vec<usize>>,
    suffix: Vec<Relaxation>,
    need: f64,
    current: Vec<usize>,
    best: Option<Ranked>,
    nodes: u64,
}

impl Search<'_> {
    fn dfs(&mut self, depth: usize, partial_e: f64, partial_s: f64) {
        self.nodes += 1;
        if depth == self.order.len() {
            let (objective, sparsity) = self.problem.evaluate(&self.current);
            if sparsity >= self.problem.budget {
                let cand = Ranked { objective, sparsity, assignment: self.current.clone() };
                if self.best.as_ref().is_none_or(|b| rank(&cand, b) == Ordering::Less) {
                    self.best = Some(cand);
                }
            }
            return;
        }
        let relax = &self.suffix[depth];
        let rest = self.need - partial_s;
        if relax.max_sparsity < rest - FEAS_TOL {
            return;
        }
        let lower = match relax.bound(rest) {
            Some((v, _)) => partial_e + v,
            None => return,
        };
        if let Some(b) = &self.best {
            if lower > b.objective + OBJ_TOL * b.objective.abs().max(1.0) {
                return;
            }
        }
        let head = self.order[depth];
        for idx in 0..self.items[depth].len() {
            let j = self.items[depth][idx];
            self.current[head] = j;
            self.dfs(depth + 1, partial_e + self.problem.e(head, j), partial_s + self.problem.s(head, j));
        }
    }
}

/// Exact optimum by dominance pruning, linear-relaxation (Lagrangian) bounds
/// and depth-first branch and bound over heads in order of decreasing
/// sparsity range.
pub fn solve_budgeted_assignment(problem: &CalibrationProblem) -> Result<CalibrationTable> {
    ensure_feasible(problem)?;
    let n = problem.num_heads();
    let parts = head_parts(problem);
    let range = |h: usize| {
        let s: Vec<f64> = parts[h].0.iter().map(|&j| problem.s(h, j)).collect();
        s.iter().copied().fold(f64::NEG_INFINITY, f64::max) - s.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| range(b).total_cmp(&range(a)).then(a.cmp(&b)));

    let suffix = (0..n)
        .map(|d| {
            let sub: Vec<_> = order[d..].iter().map(|&h| parts[h].1.clone()).collect();
            Relaxation::build(&sub)
        })
        .collect();
    let mut search = Search {
        problem,
        items: order.iter().map(|&h| parts[h].0.clone()).collect(),
        order,
        suffix,
        need: problem.budget * n as f64,
        current: vec![0; n],
        best: None,
        nodes: 0,
    };
    search.dfs(0, 0.0, 0.0);
    let best = search.best.ok_or_else(|| Error::Internal("branch and bound found no feasible assignment".into()))?;
    Ok(CalibrationTable::from_assignment(problem, best.assignment, "mckp-branch-and-bound", true))
}
