use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bss::bifpn::FusionGraph;
use bss::fixtures;
use bss::rng::{normal_tensor, seeded};
use bss::shuffle_attention::{sa_forward, SAConfig, SAWeights};
use bss::simam::{simam_energy, simam_forward, SimAMConfig};
use bss::tensor::{read_tensor, read_tensor_json, write_tensor};
use bss::{Dims, Tensor};
use tempfile::TempDir;

fn bss(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bss"))
        .args(args)
        .current_dir(dir)
        .env_remove("BSS_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn input(dir: &TempDir, name: &str, dims: Dims, seed: u64) -> Tensor {
    let t: Tensor = normal_tensor(&mut seeded(seed), dims);
    write_tensor(dir.path().join(name), &t).unwrap();
    t
}

#[test]
fn simam_matches_library() {
    let d = TempDir::new().unwrap();
    let x = input(&d, "x.bst", Dims::new(2, 3, 6, 5), 1);
    let o = bss(
        &[
            "simam",
            "--in",
            "x.bst",
            "--lambda",
            "0.01",
            "--out",
            "y.bst",
            "--emit-energy",
            "e.json",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = SimAMConfig::new(0.01).unwrap();
    assert_eq!(
        read_tensor(d.path().join("y.bst")).unwrap(),
        simam_forward(&x, &cfg).unwrap()
    );
    assert_eq!(
        read_tensor_json(d.path().join("e.json")).unwrap(),
        simam_energy(&x, &cfg).unwrap().e_star
    );
}

#[test]
fn simam_json_in_json_out() {
    let d = TempDir::new().unwrap();
    fs::write(
        d.path().join("x.json"),
        r#"{"dims":[1,1,2,2],"data":[3,3,3,3]}"#,
    )
    .unwrap();
    let o = bss(&["simam", "--in", "x.json", "--out", "y.json"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let y = read_tensor_json(d.path().join("y.json")).unwrap();
    let g = 1.0 / (1.0 + (-0.5f64).exp());
    assert!(y.data().iter().all(|v| (*v as f64 - 3.0 * g).abs() < 1e-6));
}

#[test]
fn simam_rejects_negative_lambda_without_output() {
    let d = TempDir::new().unwrap();
    input(&d, "x.bst", Dims::new(1, 2, 3, 3), 2);
    let o = bss(
        &["simam", "--in", "x.bst", "--lambda", "-1", "--out", "y.bst"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("bss: error[config]"),
        "{}",
        stderr(&o)
    );
    assert!(!d.path().join("y.bst").exists());
}

#[test]
fn sa_matches_library_and_reads_weights() {
    let d = TempDir::new().unwrap();
    let x = input(&d, "x.bst", Dims::new(1, 8, 4, 4), 3);
    let o = bss(
        &["sa", "--in", "x.bst", "--groups", "2", "--out", "y.bst"],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = SAConfig::new(2);
    assert_eq!(
        read_tensor(d.path().join("y.bst")).unwrap(),
        sa_forward(&x, &cfg, &SAWeights::default_for(2)).unwrap()
    );

    SAWeights::zeros(2).save_dir(d.path().join("w")).unwrap();
    let o = bss(
        &[
            "sa",
            "--in",
            "x.bst",
            "--groups",
            "2",
            "--shuffle-groups",
            "1",
            "--weights",
            "w",
            "--out",
            "z.bst",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_tensor(d.path().join("z.bst")).unwrap(), x.scale(0.5));
}

#[test]
fn sa_rejects_indivisible_channels() {
    let d = TempDir::new().unwrap();
    input(&d, "x.bst", Dims::new(1, 6, 2, 2), 4);
    let o = bss(
        &["sa", "--in", "x.bst", "--groups", "2", "--out", "y.bst"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[config]"));
}

#[test]
fn fuse_default_neck_keeps_level_dims() {
    let d = TempDir::new().unwrap();
    let levels = [("P3", 16), ("P4", 8), ("P5", 4)];
    for (i, (l, s)) in levels.iter().enumerate() {
        input(
            &d,
            &format!("{l}.bst"),
            Dims::new(1, 4, *s, *s),
            10 + i as u64,
        );
    }
    let o = bss(
        &[
            "fuse",
            "--input",
            "P3=P3.bst",
            "--input",
            "P4=P4.bst",
            "--input",
            "P5=P5.bst",
            "--out-dir",
            "out",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for (l, s) in levels {
        let t = read_tensor(d.path().join(format!("out/{l}out.bst"))).unwrap();
        assert_eq!(t.dims(), Dims::new(1, 4, s, s));
        assert!(t.is_finite());
    }
}

#[test]
fn fuse_simplifies_baseline_graph() {
    let d = TempDir::new().unwrap();
    fs::write(
        d.path().join("pan.json"),
        FusionGraph::pan_baseline().to_json(),
    )
    .unwrap();
    for (l, s) in [("P3", 8), ("P4", 4), ("P5", 2)] {
        input(&d, &format!("{l}.bst"), Dims::new(1, 2, s, s), s as u64);
    }
    let args = [
        "fuse",
        "--graph",
        "pan.json",
        "--input",
        "P3=P3.bst",
        "--input",
        "P4=P4.bst",
        "--input",
        "P5=P5.bst",
        "--simplify",
        "--out-dir",
        "out",
    ];
    let o = bss(&args, d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_dir(d.path().join("out")).unwrap().count() >= 3);
}

#[test]
fn fuse_reports_graph_problems() {
    let d = TempDir::new().unwrap();
    input(&d, "P3.bst", Dims::new(1, 2, 8, 8), 5);
    let o = bss(
        &["fuse", "--input", "P3=P3.bst", "--out-dir", "out"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!d.path().join("out").exists());

    fs::write(d.path().join("g.json"), "{").unwrap();
    let o = bss(
        &[
            "fuse",
            "--graph",
            "g.json",
            "--input",
            "P3=P3.bst",
            "--out-dir",
            "out",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[json]"));
}

#[test]
fn eval_reproduces_golden_report() {
    let d = TempDir::new().unwrap();
    fixtures::write_eval_fixture(d.path()).unwrap();
    fs::write(d.path().join("golden.json"), fixtures::EVAL_GOLDEN).unwrap();
    let o = bss(
        &[
            "eval",
            "--gt",
            "gt",
            "--det",
            "det.jsonl",
            "--out-dir",
            "out",
            "--golden",
            "golden.json",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(d.path().join("out/report.json")).unwrap(),
        fixtures::EVAL_GOLDEN
    );
    let csv = fs::read_to_string(d.path().join("out/pr_class0.csv")).unwrap();
    assert!(csv.starts_with("recall,precision\n"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP@0.5"));

    fs::write(
        d.path().join("golden.json"),
        fixtures::EVAL_GOLDEN.replacen("0.", "1.", 1),
    )
    .unwrap();
    let o = bss(
        &[
            "eval",
            "--gt",
            "gt",
            "--det",
            "det.jsonl",
            "--golden",
            "golden.json",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn eval_validates_threshold_before_reading() {
    let d = TempDir::new().unwrap();
    let o = bss(
        &[
            "eval",
            "--gt",
            "missing",
            "--det",
            "missing.jsonl",
            "--iou",
            "1.5",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("IoU"));
}

#[test]
fn eval_rejects_out_of_range_class() {
    let d = TempDir::new().unwrap();
    fs::create_dir(d.path().join("gt")).unwrap();
    fs::write(d.path().join("gt/a.txt"), "7 0.5 0.5 0.2 0.2\n").unwrap();
    fs::write(d.path().join("det.jsonl"), "").unwrap();
    let o = bss(
        &["eval", "--gt", "gt", "--det", "det.jsonl", "--classes", "4"],
        d.path(),
    );
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("a.txt:1"), "{}", stderr(&o));
}

#[test]
fn check_suites_pass_and_write_json() {
    let d = TempDir::new().unwrap();
    let o = bss(
        &[
            "check", "--suite", "grad", "--op", "simam", "--op", "fuse", "--seed", "3", "--json",
            "r.json",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert!(v.to_string().contains("\"passed\":true"));

    let o = bss(&["check", "--suite", "invariants"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn check_unknown_op_and_suite() {
    let d = TempDir::new().unwrap();
    let o = bss(&["check", "--suite", "grad", "--op", "nope"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[unknown-op]"));
    let o = bss(&["check", "--suite", "nope"], d.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn bench_emits_timings() {
    let d = TempDir::new().unwrap();
    let o = bss(
        &[
            "--threads",
            "2",
            "bench",
            "--repeats",
            "1",
            "--json",
            "b.json",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("b.json")).unwrap()).unwrap();
    let rows = v.as_array().unwrap();
    assert!(rows.iter().any(|r| r["op"] == "simam_forward"));
    assert!(rows.iter().all(|r| r["best_ms"].as_f64().unwrap() > 0.0));
}

#[test]
fn truncated_tensor_is_a_format_error() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("x.bst"), b"BST1\x01\x01\x04\x00\x02\x00").unwrap();
    let o = bss(&["simam", "--in", "x.bst", "--out", "y.bst"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[format]"));
}

#[test]
fn usage_errors_exit_two() {
    let d = TempDir::new().unwrap();
    assert_eq!(bss(&["frobnicate"], d.path()).status.code(), Some(2));
    assert_eq!(
        bss(&["simam", "--lambda", "1"], d.path()).status.code(),
        Some(2)
    );
    assert_eq!(bss(&["--help"], d.path()).status.code(), Some(0));
}

#[test]
fn zero_threads_is_rejected() {
    let d = TempDir::new().unwrap();
    let o = bss(&["--threads", "0", "selftest"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error[config]"));
}

#[test]
fn threads_env_is_honored() {
    let d = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bss"))
        .args(["selftest", "--out-dir", "st"])
        .current_dir(d.path())
        .env("BSS_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("st/selftest.json").exists());
}
