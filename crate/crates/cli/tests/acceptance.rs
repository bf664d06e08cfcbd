//! Acceptance suite. Every test prints exactly one `criterion N: PASS|FAIL`
//! line with the measured values before asserting.

use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use satool_core::blocksparse::{block_scores, top_p_select, BlockMask, BlockScores};
use satool_core::ebc::{
    additive_surrogate_gap, brute_force_assignment, build_problem, quadratic_scaling_probe, shared_threshold_baseline,
    solve_budgeted_assignment, CalibrationProblem, ErrorMetric, MeasureConfig,
};
use satool_core::online::simulate;
use satool_core::spectral::{
    band_energies, band_energy_ratios, band_partition, band_perturbation, fft3, Band, BandWeights, DEFAULT_EPSILON,
};
use satool_core::stability::{adjacent_samples, drift_change_samples, spearman};
use satool_core::tmr::{fit_stability_constant, TmrConfig};
use satool_core::trace::{generate_trace, ForwardEngine, SurrogateModel, TraceConfig, VelocityField};

fn verdict(n: u32, name: &str, ok: bool, detail: &str, started: Instant) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n}: {status} [{name}] {detail} ({:.2}s)", started.elapsed().as_secs_f64());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn spectral_metric(c: &TraceConfig) -> ErrorMetric {
    ErrorMetric::Spectral {
        partition: band_partition(c.velocity_shape, 0.5, 0.5).unwrap(),
        weights: BandWeights::default(),
        epsilon: DEFAULT_EPSILON,
    }
}

#[test]
fn criterion_1_cache_footprint() {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_satool"))
        .args(["footprint", "--layers", "30", "--heads", "12", "--tokens", "32760", "--head-dim", "128"])
        .args(["--bytes", "2", "--branches", "2", "--mode", "both"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let value = |mode: &str| -> u64 {
        stdout.lines().find_map(|l| l.strip_prefix(mode).map(|v| v.trim().parse().unwrap())).unwrap()
    };
    let (pooled, full) = (value("mean_pooled"), value("full_token"));
    let ok = pooled == 368_640 && full == 12_079_595_520;
    verdict(
        1,
        "cache footprint",
        ok,
        &format!("mean_pooled={pooled} (want 368640), full_token={full} (want 12079595520)"),
        started,
    );
}

#[test]
fn criterion_2_solver_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let k = rng.random_range(1..=3);
        let taus = (0..k).map(|i| 0.95 - 0.05 * i as f64).collect();
        let s = (0..n * k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let e = (0..n * k).map(|_| rng.random_range(0.0..=10.0)).collect();
        let mut p = CalibrationProblem::new(1, n, taus, s, e, 0.0).unwrap();
        p.budget = rng.random_range(0.0..=1.0) * p.max_average_sparsity();
        let exact = solve_budgeted_assignment(&p).unwrap();
        let oracle = brute_force_assignment(&p).unwrap();
        if exact.objective != oracle.objective || exact.assignment != oracle.assignment {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        2,
        "solver/oracle equivalence",
        mismatches == 0 && secs < 10.0,
        &format!("200 instances, {mismatches} mismatches"),
        started,
    );
}

#[test]
fn criterion_3_calibration_dominance() {
    let started = Instant::now();
    let c = TraceConfig::default();
    let t = generate_trace(&c).unwrap();
    let m = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &m).unwrap();
    let config =
        MeasureConfig { taus: vec![0.85, 0.9, 0.95], intervals: 4, budget: 0.0, metric: spectral_metric(&c), seed: 0 };
    let measured = build_problem(std::slice::from_ref(&e), &config).unwrap();
    let shared = shared_threshold_baseline(&measured, 0.9).unwrap();
    let problem = measured.with_budget(shared.achieved_sparsity).unwrap();
    let table = solve_budgeted_assignment(&problem).unwrap();
    let heterogeneous = (1..problem.num_heads())
        .any(|h| (0..3).any(|k| problem.s(h, k) != problem.s(0, k) || problem.e(h, k) != problem.e(0, k)));
    let ok = (problem.layers, problem.heads, problem.num_candidates()) == (4, 6, 3)
        && table.achieved_sparsity >= problem.budget
        && table.objective <= shared.objective
        && (!heterogeneous || table.objective < shared.objective)
        && started.elapsed().as_secs_f64() < 60.0;
    verdict(
        3,
        "calibration dominance",
        ok,
        &format!(
            "budget={:.6}, calibrated={:.6} vs shared(0.9)={:.6}, heterogeneous={heterogeneous}",
            problem.budget, table.objective, shared.objective
        ),
        started,
    );
}

#[test]
fn criterion_4_drift_bounds_mask_change() {
    let started = Instant::now();
    let gaps = [1, 2, 4, 8];
    let t = generate_trace(&TraceConfig::default()).unwrap();
    let mut samples = drift_change_samples(&t, 0.9, &gaps).unwrap();
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let (fit, held) = samples.split_at(samples.len() / 2);
    let pairs: Vec<(f64, f64)> =
        fit.iter().filter(|s| s.full_drift > 0.0).map(|s| (s.full_drift, s.changed_ratio)).collect();
    let c = fit_stability_constant(&pairs).unwrap();
    let violations = held.iter().filter(|s| s.changed_ratio > c * s.full_drift).count();
    let rate = violations as f64 / held.len() as f64;

    // Zero drift must mean zero change, on the default trace and on a frozen one.
    let frozen = generate_trace(&TraceConfig { kappa_range: (1.0, 1.0), ..TraceConfig::default() }).unwrap();
    let frozen_samples = drift_change_samples(&frozen, 0.9, &gaps).unwrap();
    let zero: Vec<_> = samples.iter().chain(&frozen_samples).filter(|s| s.full_drift == 0.0).collect();
    let zero_ok = !zero.is_empty() && zero.iter().all(|s| s.changed_ratio == 0.0);
    let ok = c.is_finite() && rate <= 0.05 && zero_ok && started.elapsed().as_secs_f64() < 60.0;
    verdict(
        4,
        "drift bounds mask change",
        ok,
        &format!(
            "C={c:.6}, held-out violations {violations}/{} ({:.2}%), zero-drift pairs {} all unchanged={zero_ok}",
            held.len(),
            100.0 * rate,
            zero.len()
        ),
        started,
    );
}

#[test]
fn criterion_5_drift_iou_correlation() {
    let started = Instant::now();
    let mut drift = Vec::new();
    let mut iou = Vec::new();
    for seed in [0, 1] {
        let t = generate_trace(&TraceConfig { seed, ..TraceConfig::default() }).unwrap();
        for s in adjacent_samples(&t, 0.9).unwrap() {
            drift.push(s.pooled_drift);
            iou.push(s.token_iou);
        }
    }
    let rho = spearman(&drift, &iou).unwrap();
    let ok = drift.len() >= 200 && rho <= -0.3 && started.elapsed().as_secs_f64() < 60.0;
    verdict(5, "drift/IoU rank correlation", ok, &format!("rho={rho:.4} over {} head-steps", drift.len()), started);
}

#[test]
fn criterion_6_reuse_endpoints() {
    let started = Instant::now();
    let run = |c: &TraceConfig, delta: f64| {
        let t = generate_trace(c).unwrap();
        let m = SurrogateModel::for_trace(c).unwrap();
        let e = ForwardEngine::new(&t, &m).unwrap();
        simulate(&e, &vec![0.9; c.num_heads()], &TmrConfig { delta, ..TmrConfig::default() }).unwrap()
    };
    let c = TraceConfig::default();
    let grid = [0.0, 5.0, 10.0, 30.0, 100.0];
    let rates: Vec<f64> = grid.iter().map(|&d| run(&c, d).reuse_rate).collect();
    let frozen = TraceConfig { kappa_range: (1.0, 1.0), ..TraceConfig::default() };
    let frozen_rate = run(&frozen, 30.0).reuse_rate;
    let expected = (c.steps - 1) as f64 / c.steps as f64;
    let ok = rates[0] == 0.0 && frozen_rate == expected && rates.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        6,
        "reuse endpoints",
        ok,
        &format!(
            "delta grid {grid:?} -> reuse {:?}; frozen trace {frozen_rate} (want {expected})",
            rates.iter().map(|r| format!("{:.2}%", 100.0 * r)).collect::<Vec<_>>()
        ),
        started,
    );
}

#[test]
fn criterion_7_spectral_suite() {
    let started = Instant::now();
    let shape = TraceConfig::default().velocity_shape;
    let p = band_partition(shape, 0.5, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let field = |rng: &mut ChaCha8Rng| {
        VelocityField::new(shape, (0..p.labels().len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (mut parseval, mut quad, mut leak, mut norm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..32 {
        let x = field(&mut rng);
        let y = field(&mut rng);
        let total: f64 = fft3(&x.data, shape).unwrap().iter().map(|c| c.norm_sqr()).sum();
        parseval = parseval.max(rel(band_energies(&x.data, &p).unwrap().iter().sum(), total));

        let base = band_energy_ratios(&x, &y, &p, DEFAULT_EPSILON).unwrap();
        let s = 0.5 + i as f64 / 8.0;
        let scaled = band_energy_ratios(&x.scale(s), &y, &p, DEFAULT_EPSILON).unwrap();
        for q in 0..4 {
            quad = quad.max(rel(scaled[q], s * s * base[q]));
        }

        for band in Band::ALL {
            let alpha = 0.1;
            let d = band_perturbation(&y, &p, band, alpha, i).unwrap();
            let e = band_energies(&d.data, &p).unwrap();
            let all: f64 = e.iter().sum();
            leak = leak.max((all - e[band as usize]) / all);
            norm = norm.max((d.norm() / y.norm() - alpha).abs());
        }
    }
    let ok = parseval <= 1e-9 && quad <= 1e-9 && leak <= 1e-10 && norm <= 1e-6;
    verdict(
        7,
        "spectral suite",
        ok,
        &format!(
            "max Parseval rel {parseval:.2e}, quadratic rel {quad:.2e}, leakage {leak:.2e}, norm ratio error {norm:.2e}"
        ),
        started,
    );
}

#[test]
fn criterion_8_top_p_properties() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=256);
        let raw: Vec<f64> = (0..m)
            .map(|_| match rng.random_range(0..6) {
                0 => 0.0,
                1 => 0.5,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            continue;
        }
        let scores = BlockScores::from_normalized(raw.iter().map(|x| x / total).collect()).unwrap();
        let v = scores.values();
        let (t1, t2) = (rng.random_range(0.01..0.999), rng.random_range(0.01..=1.0));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = top_p_select(&scores, lo).unwrap();
        let b = top_p_select(&scores, hi).unwrap();

        let mut picked: Vec<usize> = a.blocks.iter().collect();
        picked.sort_by(|&x, &y| v[y].total_cmp(&v[x]).then(x.cmp(&y)));
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| v[y].total_cmp(&v[x]).then(x.cmp(&y)));
        let sum_all: f64 = order.iter().map(|&i| v[i]).sum();
        let mass: f64 = picked.iter().map(|&i| v[i]).sum();
        let less: f64 = picked[..picked.len() - 1].iter().map(|&i| v[i]).sum();
        let prefix = picked[..] == order[..picked.len()];
        let minimal = mass >= lo * sum_all && less < lo * sum_all;
        if !(prefix && minimal && a.blocks.is_subset(&b.blocks)) {
            failures += 1;
        }
    }

    let c = TraceConfig::default();
    let t = generate_trace(&c).unwrap();
    let model = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();
    let mut bitwise = true;
    for step in [0, c.steps / 2, c.steps - 1] {
        let masks: Vec<Option<BlockMask>> = (0..c.num_heads())
            .map(|h| {
                Some(
                    top_p_select(&block_scores(t.q(step, h), t.k(step, h), c.head_dim, e.grid()).unwrap(), 1.0)
                        .unwrap(),
                )
            })
            .collect();
        bitwise &= &e.sparse_forward(step, &masks).unwrap() == e.dense_forward(step).unwrap().velocity();
    }
    verdict(
        8,
        "top-p properties",
        failures == 0 && bitwise,
        &format!("1000 random score vectors, {failures} failures; tau=1 bitwise dense: {bitwise}"),
        started,
    );
}

#[test]
fn criterion_9_additive_surrogate_probe() {
    let started = Instant::now();
    let c = TraceConfig::default();
    let t = generate_trace(&c).unwrap();
    let m = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &m).unwrap();
    let metric = spectral_metric(&c);
    let heads: Vec<(usize, f64)> = (0..c.heads).map(|h| (c.head_index(0, h), 0.9)).collect();
    let step = c.steps / 2;

    let points = quadratic_scaling_probe(&e, &heads, step, &metric, 0.05, &[1.0, 0.5, 0.25]).unwrap();
    let mut ratios = Vec::new();
    for w in points.windows(2) {
        ratios.push(w[0].joint / w[1].joint);
        for (a, b) in w[0].singles.iter().zip(&w[1].singles) {
            if *b > 0.0 {
                ratios.push(a / b);
            }
        }
    }
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(*r), h.max(*r)));
    let gap = additive_surrogate_gap(&e, &heads, step, &metric).unwrap();
    let ok = !ratios.is_empty() && lo >= 3.5 && hi <= 4.5;
    verdict(
        9,
        "additive surrogate probe",
        ok,
        &format!(
            "{} per-halving ratios in [{lo:.4}, {hi:.4}]; gap joint={:.6e} sum_singles={:.6e} rel={:.4}",
            ratios.len(),
            gap.joint,
            gap.sum_singles,
            gap.rel_gap
        ),
        started,
    );
}
