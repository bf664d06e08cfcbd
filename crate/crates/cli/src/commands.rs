use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use satool_core::ebc::{
    brute_force_assignment, build_problem, shared_threshold_baseline, solve_budgeted_assignment, CalibrationTable,
    ErrorMetric, MeasureConfig,
};
use satool_core::online::simulate;
use satool_core::spectral::{band_partition, perturbation_study, BandWeights, DEFAULT_EPSILON};
use satool_core::stability::{analyze_stability, spearman, GroupRow};
use satool_core::tmr::{cache_footprint, CacheMode, TmrConfig};
use satool_core::trace::{
    generate_trace, mix_seed, read_trace, write_trace, DenoiseTrace, ForwardEngine, SurrogateModel, TraceConfig,
};
use satool_core::{Error, Result};

use crate::output::{fmt_g, json_f64, sha256_hex, Csv, OutputDir};
use crate::{
    AnalyzeArgs, CalibrateArgs, Cli, Command, ErrorKind, FootprintArgs, GenTraceArgs, ModeArg, PerturbArgs, ReplayArgs,
    RunArgs, SolverKind, SpectralArgs,
};

const TAG_PERTURB: u64 = 0x50_45_52;

struct Input {
    path: PathBuf,
    sha256: String,
}

struct Invocation<'a> {
    name: &'static str,
    args: Value,
    argv: &'a [String],
    inputs: Vec<Input>,
    seeds: Value,
}

impl Invocation<'_> {
    fn manifest(self) -> Result<Value> {
        let cwd = std::env::current_dir()?;
        Ok(json!({
            "command": self.name,
            "args": self.args,
            "argv": self.argv,
            "cwd": cwd,
            "seeds": self.seeds,
            "inputs": self.inputs.iter().map(|i| json!({ "path": i.path, "sha256": i.sha256 })).collect::<Vec<_>>(),
            "version": env!("CARGO_PKG_VERSION"),
        }))
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Internal(e.to_string()))
}

fn load_trace(path: &Path) -> Result<(DenoiseTrace, Input)> {
    let bytes =
        fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let trace = read_trace(bytes.as_slice())?;
    Ok((trace, Input { path: path.to_path_buf(), sha256: sha256_hex(&bytes) }))
}

fn load_traces(paths: &[PathBuf]) -> Result<(Vec<DenoiseTrace>, Vec<Input>)> {
    let mut traces = Vec::new();
    let mut inputs = Vec::new();
    for p in paths {
        let (t, i) = load_trace(p)?;
        traces.push(t);
        inputs.push(i);
    }
    Ok((traces, inputs))
}

fn trace_seeds(traces: &[DenoiseTrace]) -> Value {
    json!(traces.iter().map(|t| t.config().seed).collect::<Vec<_>>())
}

pub fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenTrace(a) => gen_trace(&a, argv),
        Command::Analyze(a) => analyze(&a, argv),
        Command::Calibrate(a) => calibrate(&a, argv),
        Command::Run(a) => run(&a, argv),
        Command::Perturb(a) => perturb(&a, argv),
        Command::Footprint(a) => footprint(&a, argv),
        Command::Replay(a) => replay(&a),
    }
}

fn gen_trace(a: &GenTraceArgs, argv: &[String]) -> Result<()> {
    let kappa_range = match a.kappa {
        Some(k) => (k, k),
        None => (a.kappa_lo, a.kappa_hi),
    };
    let config = TraceConfig {
        layers: a.layers,
        heads: a.heads,
        tokens: a.tokens,
        head_dim: a.head_dim,
        steps: a.steps,
        block_size: a.block_size,
        velocity_shape: [a.velocity_shape[0], a.velocity_shape[1], a.velocity_shape[2]],
        kappa_range,
        gain_range: (a.gain_lo, a.gain_hi),
        seed: a.common.seed,
    };
    let trace = generate_trace(&config)?;
    let mut bytes = Vec::with_capacity(68 + 4 * config.payload_len());
    write_trace(&trace, &mut bytes)?;

    let mut out = OutputDir::create(&a.common.out)?;
    out.write("trace.satr", &bytes)?;
    let params: Vec<Value> = trace
        .head_params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (l, h) = config.head_coords(i);
            json!({ "layer": l, "head": h, "kappa": p.kappa, "gain": p.gain })
        })
        .collect();
    out.write_json("trace.json", &json!({ "config": config, "heads": params }))?;
    out.finish(
        Invocation {
            name: "gen-trace",
            args: to_value(a)?,
            argv,
            inputs: Vec::new(),
            seeds: json!({ "seed": a.common.seed }),
        }
        .manifest()?,
    )
}

fn group_csv(rows: &[GroupRow], layer: bool, head: bool) -> Vec<u8> {
    let mut header = vec!["prompt"];
    if layer {
        header.push("layer");
    }
    if head {
        header.push("head");
    }
    header.extend(["step", "token_iou", "block_iou"]);
    let mut csv = Csv::new(&header);
    for r in rows {
        let mut f = vec![r.prompt.to_string()];
        if layer {
            f.push(r.layer.map_or(String::new(), |v| v.to_string()));
        }
        if head {
            f.push(r.head.map_or(String::new(), |v| v.to_string()));
        }
        f.extend([r.step.to_string(), fmt_g(r.token_iou), fmt_g(r.block_iou)]);
        csv.row(&f);
    }
    csv.into_bytes()
}

fn analyze(a: &AnalyzeArgs, argv: &[String]) -> Result<()> {
    let (traces, inputs) = load_traces(&a.trace)?;
    let report = analyze_stability(&traces, a.tau)?;
    let mut out = OutputDir::create(&a.common.out)?;
    out.write("iou_prompt.csv", &group_csv(&report.prompt_rows, false, false))?;
    out.write("iou_layer.csv", &group_csv(&report.layer_rows, true, false))?;
    out.write("iou_head.csv", &group_csv(&report.head_rows, true, true))?;

    let per_prompt = report.samples.len() / traces.len();
    let mut csv = Csv::new(&[
        "prompt",
        "layer",
        "head",
        "step",
        "full_drift",
        "pooled_drift",
        "token_iou",
        "block_iou",
        "changed_block_ratio",
    ]);
    for (i, s) in report.samples.iter().enumerate() {
        csv.row(&[
            (i / per_prompt.max(1)).to_string(),
            s.layer.to_string(),
            s.head.to_string(),
            s.step.to_string(),
            fmt_g(s.full_drift),
            fmt_g(s.pooled_drift),
            fmt_g(s.token_iou),
            fmt_g(s.block_iou),
            fmt_g(s.changed_ratio),
        ]);
    }
    out.write("drift_scatter.csv", &csv.into_bytes())?;

    let col = |f: fn(&satool_core::stability::AdjacentSample) -> f64| report.samples.iter().map(f).collect::<Vec<_>>();
    let pooled = col(|s| s.pooled_drift);
    let rho = |y: &[f64]| spearman(&pooled, y).map_or(Value::Null, json_f64);
    let n = report.samples.len() as f64;
    out.write_json(
        "summary.json",
        &json!({
            "tau": a.tau,
            "token_mass": satool_core::stability::TOKEN_MASS,
            "samples": report.samples.len(),
            "mean_token_iou": json_f64(col(|s| s.token_iou).iter().sum::<f64>() / n),
            "mean_block_iou": json_f64(col(|s| s.block_iou).iter().sum::<f64>() / n),
            "spearman_pooled_drift_token_iou": rho(&col(|s| s.token_iou)),
            "spearman_pooled_drift_block_iou": rho(&col(|s| s.block_iou)),
        }),
    )?;
    out.finish(
        Invocation {
            name: "analyze",
            args: to_value(a)?,
            argv,
            inputs,
            seeds: json!({ "seed": a.common.seed, "traces": trace_seeds(&traces) }),
        }
        .manifest()?,
    )
}

enum Budget {
    Value(f64),
    Shared(f64),
}

fn parse_budget(text: &str) -> Result<Budget> {
    let bad = || Error::Config(format!("budget {text:?} is neither a number nor shared:TAU"));
    match text.strip_prefix("shared:") {
        Some(t) => Ok(Budget::Shared(t.parse().map_err(|_| bad())?)),
        None => Ok(Budget::Value(text.parse().map_err(|_| bad())?)),
    }
}

fn metric(kind: ErrorKind, spectral: &SpectralArgs, weights: &[f64], shape: [usize; 3]) -> Result<ErrorMetric> {
    Ok(match kind {
        ErrorKind::Mse => ErrorMetric::Mse,
        ErrorKind::Fft => ErrorMetric::Spectral {
            partition: band_partition(shape, spectral.temporal_frac, spectral.spatial_frac)?,
            weights: BandWeights::new([weights[0], weights[1], weights[2], weights[3]])?,
            epsilon: DEFAULT_EPSILON,
        },
    })
}

fn calibrate(a: &CalibrateArgs, argv: &[String]) -> Result<()> {
    let budget = parse_budget(&a.budget)?;
    let (traces, inputs) = load_traces(&a.trace)?;
    let models = traces.iter().map(|t| SurrogateModel::for_trace(t.config())).collect::<Result<Vec<_>>>()?;
    let engines = traces.iter().zip(&models).map(|(t, m)| ForwardEngine::new(t, m)).collect::<Result<Vec<_>>>()?;
    let shape = traces[0].config().velocity_shape;
    let config = MeasureConfig {
        taus: a.taus.clone(),
        intervals: a.intervals,
        budget: 0.0,
        metric: metric(a.error, &a.spectral, &a.weights, shape)?,
        seed: a.common.seed,
    };
    let measured = build_problem(&engines, &config)?;
    let (value, source) = match budget {
        Budget::Value(v) => (v, Value::String("explicit".into())),
        Budget::Shared(tau) => {
            let b = shared_threshold_baseline(&measured, tau)?;
            (b.achieved_sparsity, json!({ "shared_tau": tau }))
        }
    };
    let problem = measured.with_budget(value)?;
    let table: CalibrationTable = match a.solver {
        SolverKind::Exact => solve_budgeted_assignment(&problem)?,
        SolverKind::BruteForce => brute_force_assignment(&problem)?,
    };
    let baselines = problem.taus.iter().map(|&t| shared_threshold_baseline(&problem, t)).collect::<Result<Vec<_>>>()?;

    let mut out = OutputDir::create(&a.common.out)?;
    out.write_json("calibration.json", &table)?;
    let mut csv = Csv::new(&["layer", "head", "tau", "sparsity", "error"]);
    for h in 0..problem.num_heads() {
        for k in 0..problem.num_candidates() {
            csv.row(&[
                (h / problem.heads).to_string(),
                (h % problem.heads).to_string(),
                fmt_g(problem.taus[k]),
                fmt_g(problem.s(h, k)),
                fmt_g(problem.e(h, k)),
            ]);
        }
    }
    out.write("measurements.csv", &csv.into_bytes())?;
    out.write_json(
        "report.json",
        &json!({
            "budget": value,
            "budget_source": source,
            "error": a.error,
            "calibrated": { "objective": table.objective, "achieved_sparsity": table.achieved_sparsity },
            "shared": baselines,
        }),
    )?;
    out.finish(
        Invocation {
            name: "calibrate",
            args: to_value(a)?,
            argv,
            inputs,
            seeds: json!({ "seed": a.common.seed, "traces": trace_seeds(&traces) }),
        }
        .manifest()?,
    )
}

fn run(a: &RunArgs, argv: &[String]) -> Result<()> {
    let (trace, input) = load_trace(&a.trace)?;
    let c = trace.config();
    let mut inputs = vec![input];
    let taus = match &a.table {
        Some(path) => {
            let bytes = fs::read(path)?;
            let table: CalibrationTable =
                serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            inputs.push(Input { path: path.clone(), sha256: sha256_hex(&bytes) });
            table.thresholds(c.layers, c.heads)?
        }
        None => vec![a.tau; c.num_heads()],
    };
    let delta = if a.delta_normalized { a.delta * c.head_dim as f64 } else { a.delta };
    let tmr = TmrConfig { delta, gate_lo: a.gate_lo, gate_hi: a.gate_hi, gate: !a.no_gate };
    let model = SurrogateModel::for_trace(c)?;
    let engine = ForwardEngine::new(&trace, &model)?;
    let report = simulate(&engine, &taus, &tmr)?;

    let mut out = OutputDir::create(&a.common.out)?;
    let mut csv = Csv::new(&["step", "layer", "head", "decision", "drift", "realized_sparsity", "changed_block_ratio"]);
    for r in &report.records {
        csv.row(&[
            r.step.to_string(),
            r.layer.to_string(),
            r.head.to_string(),
            r.decision.as_str().to_string(),
            r.drift.map_or(String::new(), fmt_g),
            fmt_g(r.realized_sparsity),
            fmt_g(r.changed_block_ratio),
        ]);
    }
    out.write("steps.csv", &csv.into_bytes())?;
    let masks: Vec<Value> = report
        .final_masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (l, h) = c.head_coords(i);
            json!({ "layer": l, "head": h, "tau": taus[i], "m": m.num_blocks(), "bits": m.blocks.to_hex() })
        })
        .collect();
    out.write_json(
        "report.json",
        &json!({
            "delta": json_f64(delta),
            "delta_normalized": a.delta_normalized,
            "gate": { "enabled": tmr.gate, "lo": tmr.gate_lo, "hi": tmr.gate_hi },
            "reuse_rate": report.reuse_rate,
            "mean_sparsity": report.mean_sparsity,
            "mask_predictions": report.mask_predictions,
            "head_steps": report.records.len(),
            "mean_velocity_mse": report.mean_velocity_mse,
            "mean_velocity_rel_l2": report.mean_velocity_rel_l2,
            "final_masks": masks,
        }),
    )?;
    out.finish(
        Invocation {
            name: "run",
            args: to_value(a)?,
            argv,
            inputs,
            seeds: json!({ "seed": a.common.seed, "trace": c.seed }),
        }
        .manifest()?,
    )
}

fn perturb(a: &PerturbArgs, argv: &[String]) -> Result<()> {
    let (trace, input) = load_trace(&a.trace)?;
    let c = trace.config();
    let model = SurrogateModel::for_trace(c)?;
    let engine = ForwardEngine::new(&trace, &model)?;
    let partition = band_partition(c.velocity_shape, a.spectral.temporal_frac, a.spectral.spatial_frac)?;
    let seeds: Vec<u64> = (0..a.num_seeds as u64).map(|i| mix_seed(mix_seed(a.common.seed, TAG_PERTURB), i)).collect();
    let report = perturbation_study(&engine, &partition, a.alpha, &seeds)?;

    let mut out = OutputDir::create(&a.common.out)?;
    let mut csv = Csv::new(&["region", "alpha", "seed", "psnr_db", "rel_l2", "input_ratio"]);
    for r in &report.rows {
        csv.row(&[
            r.band.to_string(),
            fmt_g(r.alpha),
            r.seed.to_string(),
            fmt_g(r.psnr_db),
            fmt_g(r.rel_l2),
            fmt_g(r.input_ratio),
        ]);
    }
    out.write("perturb.csv", &csv.into_bytes())?;
    let means: Vec<Value> = report
        .means
        .iter()
        .map(|(b, p, l)| json!({ "region": b.to_string(), "psnr_db": json_f64(*p), "rel_l2": json_f64(*l) }))
        .collect();
    out.write_json(
        "report.json",
        &json!({
            "alpha": a.alpha,
            "means": means,
            "ordering": report.ordering.iter().map(|b| b.to_string()).collect::<Vec<_>>(),
        }),
    )?;
    out.finish(
        Invocation {
            name: "perturb",
            args: to_value(a)?,
            argv,
            inputs: vec![input],
            seeds: json!({ "seed": a.common.seed, "noise": seeds, "trace": c.seed }),
        }
        .manifest()?,
    )
}

fn footprint(a: &FootprintArgs, argv: &[String]) -> Result<()> {
    let dims = [a.layers, a.heads, a.tokens, a.head_dim, a.bytes, a.branches];
    if dims.contains(&0) {
        return Err(Error::Config("footprint dimensions must be positive".into()));
    }
    let modes: &[(CacheMode, &str)] = match a.mode {
        ModeArg::FullToken => &[(CacheMode::FullToken, "full_token")],
        ModeArg::MeanPooled => &[(CacheMode::MeanPooled, "mean_pooled")],
        ModeArg::Both => &[(CacheMode::MeanPooled, "mean_pooled"), (CacheMode::FullToken, "full_token")],
    };
    let mut result = serde_json::Map::new();
    for &(mode, name) in modes {
        let bytes = cache_footprint(a.layers, a.heads, a.tokens, a.head_dim, a.bytes, a.branches, mode);
        println!("{name}\t{bytes}");
        result.insert(name.to_string(), json!(bytes));
    }
    if let Some(dir) = &a.out {
        let mut out = OutputDir::create(dir)?;
        out.write_json("footprint.json", &json!({ "args": a, "bytes": result }))?;
        out.finish(
            Invocation { name: "footprint", args: to_value(a)?, argv, inputs: Vec::new(), seeds: json!({}) }
                .manifest()?,
        )?;
    }
    Ok(())
}

fn strip_out(argv: &[String]) -> Vec<String> {
    let mut kept = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            kept.push(a.clone());
        }
    }
    kept
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let bytes = fs::read(&a.manifest)?;
    let m: Value = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let field = |k: &str| m.get(k).ok_or_else(|| Error::Format(format!("manifest lacks {k:?}")));
    let argv: Vec<String> =
        serde_json::from_value(field("argv")?.clone()).map_err(|e| Error::Format(format!("manifest argv: {e}")))?;
    let cwd: PathBuf =
        serde_json::from_value(field("cwd")?.clone()).map_err(|e| Error::Format(format!("manifest cwd: {e}")))?;
    if field("command")? == "replay" {
        return Err(Error::Config("a replay manifest cannot be replayed".into()));
    }
    let out = std::path::absolute(&a.out)?;

    std::env::set_current_dir(&cwd)?;
    let inputs = field("inputs")?.as_array().cloned().unwrap_or_default();
    for i in inputs {
        let path = i["path"].as_str().ok_or_else(|| Error::Format("input without a path".into()))?;
        let want = i["sha256"].as_str().unwrap_or_default();
        let got = sha256_hex(&fs::read(path)?);
        if got != want {
            return Err(Error::Precondition(format!("input {path} changed since the manifest was written")));
        }
    }

    let mut new_argv = strip_out(&argv);
    new_argv.push("--out".into());
    new_argv.push(out.to_string_lossy().into_owned());
    let mut full = vec!["satool".to_string()];
    full.extend(new_argv.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(&full)
        .map_err(|e| Error::Format(format!("manifest arguments no longer parse: {e}")))?;
    dispatch(cli.command, &new_argv)
}
