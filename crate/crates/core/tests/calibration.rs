use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satool_core::ebc::{
    brute_force_assignment, build_problem, measure_head, sample_timesteps, shared_threshold_baseline,
    solve_budgeted_assignment, CalibrationProblem, ErrorMetric, MeasureConfig,
};
use satool_core::spectral::{band_partition, BandWeights, DEFAULT_EPSILON};
use satool_core::trace::{generate_trace, DenoiseTrace, ForwardEngine, SurrogateModel, TraceConfig};
use satool_core::Error;

fn random_problem(rng: &mut ChaCha8Rng) -> CalibrationProblem {
    let n = rng.random_range(1..=10);
    let k = rng.random_range(1..=3);
    let taus = (0..k).map(|i| 0.95 - 0.05 * i as f64).collect();
    // Coarse values make exact ties common.
    let s = (0..n * k).map(|_| (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
    let e = (0..n * k).map(|_| (rng.random_range(0.0..10.0f64) * 4.0).round() / 4.0).collect();
    let mut p = CalibrationProblem::new(1, n, taus, s, e, 0.0).unwrap();
    p.budget = rng.random_range(0.0..=1.0) * p.max_average_sparsity();
    p
}

#[test]
fn exact_solver_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let p = random_problem(&mut rng);
        let exact = solve_budgeted_assignment(&p).unwrap();
        let oracle = brute_force_assignment(&p).unwrap();
        assert_eq!(exact.objective, oracle.objective);
        assert_eq!(exact.assignment, oracle.assignment);
        assert!(exact.achieved_sparsity >= p.budget);
    }
}

#[test]
fn optimum_is_monotone_in_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let p = random_problem(&mut rng);
        let max = p.max_average_sparsity();
        let mut last = f64::NEG_INFINITY;
        for i in 0..=10 {
            let q = p.with_budget(max * i as f64 / 10.0).unwrap();
            let t = solve_budgeted_assignment(&q).unwrap();
            assert!(t.objective >= last);
            last = t.objective;
        }
    }
}

#[test]
fn solver_dominates_every_feasible_shared_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let p = random_problem(&mut rng);
        let t = solve_budgeted_assignment(&p).unwrap();
        for &tau in &p.taus {
            let b = shared_threshold_baseline(&p, tau).unwrap();
            if b.feasible {
                assert!(t.objective <= b.objective);
            }
        }
    }
}

#[test]
fn identical_heads_reduce_to_a_shared_threshold() {
    let p =
        CalibrationProblem::new(2, 3, vec![0.95, 0.9, 0.85], [0.2, 0.5, 0.7].repeat(6), [1.0, 2.0, 4.0].repeat(6), 0.5)
            .unwrap();
    let t = solve_budgeted_assignment(&p).unwrap();
    let b = shared_threshold_baseline(&p, 0.9).unwrap();
    assert_eq!(t.objective, b.objective);
    assert!(t.heads.iter().all(|h| h.tau == 0.9));
}

#[test]
fn infeasible_verdicts_agree() {
    let p =
        CalibrationProblem::new(1, 3, vec![0.9, 0.8], vec![0.1, 0.2, 0.3, 0.4, 0.2, 0.6], vec![1.0; 6], 0.9).unwrap();
    let a = solve_budgeted_assignment(&p).unwrap_err();
    let b = brute_force_assignment(&p).unwrap_err();
    assert_eq!(a.to_string(), b.to_string());
    assert_eq!(a.code(), "E_INFEASIBLE");
}

fn hand_trace() -> (TraceConfig, DenoiseTrace) {
    let c = TraceConfig {
        layers: 1,
        heads: 1,
        tokens: 4,
        head_dim: 1,
        steps: 1,
        block_size: 2,
        velocity_shape: [1, 1, 2],
        ..TraceConfig::default()
    };
    let data = vec![2.0, 2.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0];
    let t = DenoiseTrace::from_parts(c.clone(), data).unwrap();
    (c, t)
}

#[test]
fn four_token_hand_measurement() {
    let (c, t) = hand_trace();
    let model = SurrogateModel::new(&c, 12).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();

    // Pooled summaries u = (2, 0), v = (1, 0): block logits [[2, 0], [0, 0]],
    // so the top-left block carries e^2 / (e^2 + 3) = 0.711 > 0.7 alone.
    let top = 2f64.exp() / (2f64.exp() + 3.0);
    assert!(top > 0.7);

    let v = [1.0, 2.0, 3.0, 4.0];
    let row = |logits: [f64; 4], keep: &[usize]| -> f64 {
        let w: Vec<f64> = keep.iter().map(|&j| logits[j].exp()).collect();
        let z: f64 = w.iter().sum();
        keep.iter().zip(&w).map(|(&j, x)| v[j] * x / z).sum()
    };
    let all = [0, 1, 2, 3];
    let dense_o = [row([2.0, 2.0, 0.0, 0.0], &all), row([2.0, 2.0, 0.0, 0.0], &all), 2.5, 2.5];
    // Query rows 2 and 3 lose every key block and output zero.
    let sparse_o = [row([2.0, 2.0, 0.0, 0.0], &[0, 1]), row([2.0, 2.0, 0.0, 0.0], &[0, 1]), 0.0, 0.0];
    let y = |o: [f64; 4]| -> Vec<f64> {
        let w = model.out_weights()[0];
        let p = model.projection();
        (0..2).map(|r| model.bias()[r] + (0..4).map(|n| p[r * 4 + n] * o[n] * w).sum::<f64>().tanh()).collect()
    };
    let (yd, ys) = (y(dense_o), y(sparse_o));
    let expect = yd.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;

    assert!(matches!(measure_head(&e, 0, 0.7, &[0], &ErrorMetric::Mse), Err(Error::Precondition(_))));
    e.dense_forward(0).unwrap();
    let point = measure_head(&e, 0, 0.7, &[0], &ErrorMetric::Mse).unwrap();
    assert_eq!(point.sparsity, 0.75);
    assert!((point.error - expect).abs() <= 1e-12 * expect.max(1e-300), "{} vs {expect}", point.error);

    let full = measure_head(&e, 0, 1.0, &[0], &ErrorMetric::Mse).unwrap();
    assert_eq!(full.error, 0.0);
    assert_eq!(full.sparsity, 0.0);
}

fn default_metric(c: &TraceConfig) -> ErrorMetric {
    ErrorMetric::Spectral {
        partition: band_partition(c.velocity_shape, 0.5, 0.5).unwrap(),
        weights: BandWeights::default(),
        epsilon: DEFAULT_EPSILON,
    }
}

#[test]
fn measured_problem_shape_and_monotone_sparsity() {
    let c = TraceConfig { layers: 2, heads: 3, tokens: 64, steps: 12, block_size: 8, ..TraceConfig::default() };
    let t = generate_trace(&c).unwrap();
    let m = SurrogateModel::for_trace(&c).unwrap();
    let config = MeasureConfig {
        taus: vec![0.95, 0.9, 0.85, 1.0],
        intervals: 4,
        budget: 0.2,
        metric: default_metric(&c),
        seed: 3,
    };
    let e = ForwardEngine::new(&t, &m).unwrap();
    let p = build_problem(std::slice::from_ref(&e), &config).unwrap();
    assert_eq!((p.layers, p.heads, p.num_candidates()), (2, 3, 4));
    assert!(p.error.iter().chain(&p.sparsity).all(|x| x.is_finite()));
    for h in 0..p.num_heads() {
        assert!(p.s(h, 0) <= p.s(h, 1) && p.s(h, 1) <= p.s(h, 2));
        assert!(p.s(h, 3) <= p.s(h, 0));
        assert_eq!(p.e(h, 3), 0.0);
    }

    // A single worker reproduces the parallel result bit for bit.
    let e1 = ForwardEngine::new(&t, &m).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| build_problem(std::slice::from_ref(&e1), &config)).unwrap();
    assert_eq!(serial, p);

    let one = MeasureConfig { taus: vec![0.9], ..config.clone() };
    assert_eq!(build_problem(std::slice::from_ref(&e), &one).unwrap().num_candidates(), 1);
    let dup = MeasureConfig { taus: vec![0.9, 0.9], ..config.clone() };
    assert!(build_problem(std::slice::from_ref(&e), &dup).is_err());
    let bad = MeasureConfig { taus: vec![0.0], ..config };
    assert!(build_problem(std::slice::from_ref(&e), &bad).is_err());
}

#[test]
fn zero_budget_picks_minimum_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p = random_problem(&mut rng).with_budget(0.0).unwrap();
        let t = solve_budgeted_assignment(&p).unwrap();
        for (h, setting) in t.heads.iter().enumerate() {
            let min = (0..p.num_candidates()).map(|k| p.e(h, k)).fold(f64::INFINITY, f64::min);
            assert_eq!(setting.error, min);
        }
    }
}

#[test]
fn timesteps_use_every_step_when_intervals_equal_steps() {
    assert_eq!(sample_timesteps(5, 5, 77).unwrap(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn additive_gap_edge_cases() {
    use satool_core::ebc::{additive_surrogate_gap, quadratic_scaling_probe};
    let c = TraceConfig { layers: 2, heads: 2, tokens: 64, steps: 4, block_size: 8, ..TraceConfig::default() };
    let t = generate_trace(&c).unwrap();
    let m = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &m).unwrap();
    let metric = default_metric(&c);

    let one = additive_surrogate_gap(&e, &[(1, 0.8)], 2, &metric).unwrap();
    assert_eq!(one.abs_gap, 0.0);
    assert_eq!(one.joint, one.sum_singles);

    let dense = additive_surrogate_gap(&e, &[(0, 1.0), (1, 1.0), (3, 1.0)], 2, &metric).unwrap();
    assert_eq!((dense.joint, dense.sum_singles), (0.0, 0.0));

    let g = additive_surrogate_gap(&e, &[(0, 0.8), (1, 0.8), (3, 0.8)], 2, &metric).unwrap();
    assert_eq!(g.singles.len(), 3);
    assert!(g.joint > 0.0 && g.rel_gap.is_finite());
    assert!(additive_surrogate_gap(&e, &[(0, 0.8), (0, 0.9)], 2, &metric).is_err());

    let pts = quadratic_scaling_probe(&e, &[(0, 0.8), (1, 0.8)], 2, &metric, 0.05, &[1.0, 0.5]).unwrap();
    let ratio = pts[0].joint / pts[1].joint;
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}
