//! The `bss` command line. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code: 0 on success, 1 on validation failure,
//! 2 on I/O, parse or usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bifpn::{graph_execute, graph_simplify_detailed, graph_validate, FusionGraph};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::gradcheck::DEFAULT_TOL;
use crate::metrics::{eval_dataset, golden_mismatches, DEFAULT_IOU};
use crate::rng::{normal_tensor, normal_vec, seeded};
use crate::shuffle_attention::{
    sa_forward, SAConfig, SAWeights, DEFAULT_GN_DELTA, DEFAULT_SHUFFLE_GROUPS,
};
use crate::simam::{simam_energy, simam_forward, SimAMConfig, DEFAULT_LAMBDA};
use crate::suites::run_suite;
use crate::tensor::{group_norm, load_tensor, save_tensor, write_atomic, Dims, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "bss",
    version,
    about = "Feature-fusion and attention operators with detection metrics"
)]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "BSS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply SimAM attention to a feature map
    Simam(SimamArgs),
    /// Apply Shuffle Attention to a feature map
    Sa(SaArgs),
    /// Run a weighted-fusion neck graph
    Fuse(FuseArgs),
    /// Evaluate detections against ground-truth labels
    Eval(EvalArgs),
    /// Run the invariant, oracle and gradient suites
    Check(CheckArgs),
    /// Time the operators on fixed shapes
    Bench(BenchArgs),
    /// Run every bundled fixture and write the artifacts
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct SimamArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-neuron minimal energy e*
    #[arg(long)]
    emit_energy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Feature groups K
    #[arg(long)]
    groups: usize,
    #[arg(long, default_value_t = DEFAULT_SHUFFLE_GROUPS)]
    shuffle_groups: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = DEFAULT_GN_DELTA)]
    gn_delta: f64,
    /// Directory with manifest.json and w1/b1/w2/b2 arrays (default: w = 1, b = 0)
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Graph JSON (default: the bundled neck)
    #[arg(long)]
    graph: Option<PathBuf>,
    /// LEVEL=path, once per graph input
    #[arg(long = "input", value_parser = parse_level)]
    inputs: Vec<(String, PathBuf)>,
    /// Directory with a weights manifest.json
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Prune pass-through nodes and add skips before running
    #[arg(long)]
    simplify: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    det: PathBuf,
    #[arg(long, allow_negative_numbers = true, default_value_t = DEFAULT_IOU)]
    iou: f64,
    #[arg(long, default_value_t = fixtures::EVAL_CLASSES)]
    classes: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fail unless report.json equals this file byte for byte
    #[arg(long)]
    golden: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// invariants | oracle | grad | all
    #[arg(long, default_value = "all")]
    suite: String,
    /// Restrict the gradient suite to these ops
    #[arg(long = "op")]
    ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, allow_negative_numbers = true, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Write the reports as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Write the timings as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value = "bss-selftest")]
    out_dir: PathBuf,
}

fn parse_level(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (level, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LEVEL=path, got `{s}`"))?;
    if level.is_empty() || path.is_empty() {
        return Err(format!("expected LEVEL=path, got `{s}`"));
    }
    Ok((level.to_string(), PathBuf::from(path)))
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors go to standard error as `bss: error[kind]: message`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("bss: error[{}]: {e}", e.kind());
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simam(a) => simam(a),
        Command::Sa(a) => sa(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Check(a) => check(a),
        Command::Bench(a) => bench(a),
        Command::Selftest(a) => selftest(a),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn simam(a: SimamArgs) -> Result<i32> {
    let cfg = SimAMConfig::new(a.lambda)?;
    let x = load_tensor(&a.input)?;
    let y = simam_forward(&x, &cfg)?;
    let energy = a
        .emit_energy
        .as_ref()
        .map(|_| simam_energy(&x, &cfg))
        .transpose()?;
    ensure_parent(&a.out)?;
    save_tensor(&a.out, &y)?;
    if let (Some(path), Some(e)) = (&a.emit_energy, energy) {
        ensure_parent(path)?;
        save_tensor(path, &e.e_star)?;
    }
    println!(
        "simam: {} -> {} ({}, lambda {})",
        a.input.display(),
        a.out.display(),
        y.dims(),
        a.lambda
    );
    Ok(0)
}

fn sa(a: SaArgs) -> Result<i32> {
    let x = load_tensor(&a.input)?;
    let cfg = SAConfig {
        groups: a.groups,
        gn_delta: a.gn_delta,
        shuffle_groups: a.shuffle_groups,
    };
    let half = cfg.half_width(x.dims().c)?;
    let wts = match &a.weights {
        Some(dir) => SAWeights::load_dir(dir)?,
        None => SAWeights::default_for(half),
    };
    let y = sa_forward(&x, &cfg, &wts)?;
    ensure_parent(&a.out)?;
    save_tensor(&a.out, &y)?;
    println!(
        "sa: {} -> {} ({}, K {}, shuffle groups {})",
        a.input.display(),
        a.out.display(),
        y.dims(),
        a.groups,
        a.shuffle_groups
    );
    Ok(0)
}

fn fuse(a: FuseArgs) -> Result<i32> {
    let mut g = match &a.graph {
        Some(p) => FusionGraph::load(p)?,
        None => FusionGraph::bss_default(),
    };
    if let Some(dir) = &a.weights {
        g.apply_weights_dir(dir)?;
    }
    let mut inputs = BTreeMap::new();
    for (level, path) in &a.inputs {
        if !g.inputs.contains_key(level) {
            return Err(Error::Graph(format!(
                "graph has no input `{level}` (inputs: {})",
                g.input_levels().join(", ")
            )));
        }
        let t = load_tensor(path)?;
        g.inputs.insert(level.clone(), t.dims());
        if inputs.insert(level.clone(), t).is_some() {
            return Err(Error::Config(format!("input `{level}` given twice")));
        }
    }
    if let Some(missing) = g
        .input_levels()
        .into_iter()
        .find(|l| !inputs.contains_key(l))
    {
        return Err(Error::Config(format!("missing --input {missing}=PATH")));
    }
    if a.simplify {
        let s = graph_simplify_detailed(&g)?;
        for id in &s.removed {
            println!("fuse: pruned pass-through node {id}");
        }
        for (i, o) in &s.skips_added {
            println!("fuse: added skip {i} -> {o}");
        }
        g = s.graph;
    }
    graph_validate(&g).into_result()?;
    let outputs = graph_execute(&g, &inputs)?;
    ensure_dir(&a.out_dir)?;
    for (id, t) in &outputs {
        let path = a.out_dir.join(format!("{id}.bst"));
        save_tensor(&path, t)?;
        println!("fuse: {id} {} -> {}", t.dims(), path.display());
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let e = eval_dataset(&a.gt, &a.det, a.iou, a.classes)?;
    let r = &e.report;
    println!("class      gt   det    tp    fp    fn  precision  recall      f1       AP");
    for c in &r.classes {
        println!(
            "{:>5} {:>7} {:>5} {:>5} {:>5} {:>5} {:>10.6} {:>7.6} {:>7.6} {:>8}",
            c.class,
            c.gt_count,
            c.det_count,
            c.tp,
            c.fp,
            c.fn_,
            c.precision,
            c.recall,
            c.f1,
            c.ap.map_or("n/a".to_string(), |ap| format!("{ap:.6}"))
        );
    }
    match r.map {
        Some(m) => println!(
            "mAP@{} = {m:.6} over {} classes",
            r.iou_threshold, r.map_class_count
        ),
        None => println!("mAP@{} undefined", r.iou_threshold),
    }
    for f in &r.flags {
        println!("note: {f}");
    }
    if let Some(dir) = &a.out_dir {
        for p in e.write(dir)? {
            println!("wrote {}", p.display());
        }
    }
    if let Some(path) = &a.golden {
        let golden = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if r.to_json() != golden {
            let diffs = golden_mismatches(r, &golden, 0.0).unwrap_or_default();
            return Err(Error::Oracle(format!(
                "report differs from {}: {}",
                path.display(),
                if diffs.is_empty() {
                    "formatting differs".into()
                } else {
                    diffs.join("; ")
                }
            )));
        }
        println!("report matches {}", path.display());
    }
    Ok(0)
}

fn check(a: CheckArgs) -> Result<i32> {
    let ops: Vec<&str> = a.ops.iter().map(String::as_str).collect();
    let reports = run_suite(&a.suite, a.seed, &ops, a.tol)?;
    for r in &reports {
        println!("{r}");
    }
    if let Some(path) = &a.json {
        write_json(path, &reports)?;
    }
    let ok = reports.iter().all(|r| r.passed);
    println!("check {}: {}", a.suite, if ok { "pass" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}

#[derive(Serialize)]
struct BenchRow {
    op: String,
    shape: String,
    elements: usize,
    best_ms: f64,
    mean_ms: f64,
    melem_per_s: f64,
}

fn time<F: FnMut() -> Result<()>>(
    op: &str,
    dims: Dims,
    repeats: usize,
    mut f: F,
) -> Result<BenchRow> {
    f()?; // warm-up
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let best = times.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok(BenchRow {
        op: op.to_string(),
        shape: dims.to_string(),
        elements: dims.numel(),
        best_ms: best,
        mean_ms: mean,
        melem_per_s: dims.numel() as f64 / (best * 1e3),
    })
}

fn bench(a: BenchArgs) -> Result<i32> {
    let repeats = a.repeats.max(1);
    let mut rng = seeded(0);
    let d = Dims::new(1, 64, 80, 80);
    let x: Tensor = normal_tensor(&mut rng, d);
    let pyramid = FusionGraph::bss_default().with_pyramid(1, 64, 80);
    let neck_in: BTreeMap<String, Tensor> = pyramid
        .inputs
        .iter()
        .map(|(k, &d)| (k.clone(), normal_tensor(&mut rng, d)))
        .collect();
    let simam_cfg = SimAMConfig::default();
    let sa_cfg = SAConfig::new(8);
    let sa_w = SAWeights::default_for(sa_cfg.half_width(64)?);
    let rows = vec![
        time("simam_forward", d, repeats, || {
            simam_forward(&x, &simam_cfg).map(drop)
        })?,
        time("sa_forward", d, repeats, || {
            sa_forward(&x, &sa_cfg, &sa_w).map(drop)
        })?,
        time("group_norm", d, repeats, || {
            group_norm(&x, 32, 1e-5).map(drop)
        })?,
        time("fuse_weighted", d, repeats, || {
            crate::bifpn::fuse_weighted(&[&x, &x, &x], &[1.0, 0.5, 2.0], 1e-4).map(drop)
        })?,
        time("neck (P3 side 80)", pyramid.inputs["P3"], repeats, || {
            graph_execute(&pyramid, &neck_in).map(drop)
        })?,
    ];
    println!(
        "{:<20} {:>18} {:>10} {:>10} {:>12}",
        "op", "shape", "best ms", "mean ms", "Melem/s"
    );
    for r in &rows {
        println!(
            "{:<20} {:>18} {:>10.3} {:>10.3} {:>12.1}",
            r.op, r.shape, r.best_ms, r.mean_ms, r.melem_per_s
        );
    }
    if let Some(path) = &a.json {
        write_json(path, &rows)?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct SelftestEntry {
    name: String,
    passed: bool,
    artifacts: Vec<String>,
    detail: String,
}

/// Runs every bundled fixture, writing deterministic artifacts under `out_dir`.
fn selftest(a: SelftestArgs) -> Result<i32> {
    let dir = a.out_dir;
    ensure_dir(&dir)?;
    let rel = |p: &Path| p.strip_prefix(&dir).unwrap_or(p).display().to_string();
    let mut entries = Vec::new();
    let mut rng = seeded(2024);

    // SimAM
    let x: Tensor = normal_tensor(&mut rng, Dims::new(2, 8, 16, 16));
    let cfg = SimAMConfig::default();
    let y = simam_forward(&x, &cfg)?;
    let e = simam_energy(&x, &cfg)?;
    let paths = [
        dir.join("simam_in.bst"),
        dir.join("simam_out.bst"),
        dir.join("simam_energy.bst"),
    ];
    save_tensor(&paths[0], &x)?;
    save_tensor(&paths[1], &y)?;
    save_tensor(&paths[2], &e.e_star)?;
    let gates_ok = y
        .data()
        .iter()
        .zip(x.data())
        .all(|(&o, &i)| i == 0.0 || ((o / i) > 0.5 - 1e-6 && (o / i) < 1.0 + 1e-6));
    entries.push(SelftestEntry {
        name: "simam".into(),
        passed: gates_ok && y.is_finite(),
        artifacts: paths.iter().map(|p| rel(p)).collect(),
        detail: format!("{} gates in (0.5, 1)", y.numel()),
    });

    // Shuffle Attention
    let sa_cfg = SAConfig::new(4);
    let x2: Tensor = normal_tensor(&mut rng, Dims::new(2, 16, 8, 8));
    let half = sa_cfg.half_width(x2.dims().c)?;
    let wts = SAWeights {
        w1: normal_vec(&mut rng, half),
        b1: normal_vec(&mut rng, half),
        w2: normal_vec(&mut rng, half),
        b2: normal_vec(&mut rng, half),
    };
    let y2 = sa_forward(&x2, &sa_cfg, &wts)?;
    let wdir = dir.join("sa_weights");
    wts.save_dir(&wdir)?;
    let sa_path = dir.join("sa_out.bst");
    save_tensor(&sa_path, &y2)?;
    entries.push(SelftestEntry {
        name: "shuffle_attention".into(),
        passed: y2.dims() == x2.dims() && y2.is_finite(),
        artifacts: vec![rel(&sa_path), rel(&wdir.join("manifest.json"))],
        detail: format!(
            "{} K {} shuffle groups {}",
            y2.dims(),
            sa_cfg.groups,
            sa_cfg.shuffle_groups
        ),
    });

    // Neck: default graph, and the PAN graph after surgery
    let g = FusionGraph::bss_default().with_pyramid(1, 16, 32);
    let inputs: BTreeMap<String, Tensor> = g
        .inputs
        .iter()
        .map(|(k, &d)| (k.clone(), normal_tensor(&mut rng, d)))
        .collect();
    let out = graph_execute(&g, &inputs)?;
    let neck_dir = dir.join("neck");
    ensure_dir(&neck_dir)?;
    let mut artifacts = Vec::new();
    for (id, t) in &out {
        let p = neck_dir.join(format!("{id}.bst"));
        save_tensor(&p, t)?;
        artifacts.push(rel(&p));
    }
    let s = graph_simplify_detailed(&FusionGraph::pan_baseline())?;
    let gp = neck_dir.join("pan_simplified.json");
    write_atomic(&gp, format!("{}\n", s.graph.to_json()).as_bytes())?;
    artifacts.push(rel(&gp));
    let same = s.graph == FusionGraph::bss_default();
    let dims_ok = ["P3", "P4", "P5"]
        .iter()
        .all(|l| out[&format!("{l}out")].dims() == g.inputs[*l]);
    entries.push(SelftestEntry {
        name: "neck".into(),
        passed: same && dims_ok,
        artifacts,
        detail: format!("pruned {:?}, skips {:?}", s.removed, s.skips_added),
    });

    // Evaluation set against its golden report
    let eval_dir = dir.join("eval");
    let (gt, det) = fixtures::write_eval_fixture(&eval_dir)?;
    let ev = eval_dataset(gt, det, DEFAULT_IOU, fixtures::EVAL_CLASSES)?;
    let written = ev.write(eval_dir.join("out"))?;
    let oracle_diffs = golden_mismatches(&ev.report, fixtures::EVAL_ORACLE, 1e-9)?;
    let byte_exact = ev.report.to_json() == fixtures::EVAL_GOLDEN;
    entries.push(SelftestEntry {
        name: "eval".into(),
        passed: byte_exact && oracle_diffs.is_empty(),
        artifacts: written.iter().map(|p| rel(p)).collect(),
        detail: format!(
            "mAP {:.6}; byte-identical to golden: {byte_exact}; reference mismatches: {}",
            ev.report.map.unwrap_or(f64::NAN),
            oracle_diffs.len()
        ),
    });

    let ok = entries.iter().all(|e| e.passed);
    for e in &entries {
        println!(
            "[{}] {:<18} {}",
            if e.passed { "pass" } else { "FAIL" },
            e.name,
            e.detail
        );
    }
    write_json(&dir.join("selftest.json"), &entries)?;
    println!(
        "selftest: {} ({})",
        if ok { "pass" } else { "FAIL" },
        dir.display()
    );
    Ok(if ok { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_parsing() {
        assert_eq!(
            parse_level("P3=a.bst").unwrap(),
            ("P3".into(), PathBuf::from("a.bst"))
        );
        assert!(parse_level("P3").is_err());
        assert!(parse_level("=a").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["bss", "frobnicate"]), 2);
        assert_eq!(run(["bss", "simam", "--lambda", "1e-4"]), 2);
        assert_eq!(run(["bss", "--help"]), 0);
    }

    #[test]
    fn missing_file_exits_2() {
        assert_eq!(
            run([
                "bss",
                "simam",
                "--in",
                "/nonexistent/x.bst",
                "--out",
                "/tmp/y.bst"
            ]),
            2
        );
    }
}
