//! The `bss check` suites: algebraic invariants, analytic-vs-oracle checks and
//! gradient checks, each reduced to named pass/fail lines.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::bifpn::{
    fuse_weighted, graph_execute, graph_simplify, graph_validate, normalized_coefficients,
    FusionGraph,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::gradcheck::{check_op, GradCheckReport, CORE_OPS, DEFAULT_TRIALS};
use crate::metrics::{self, average_precision, evaluate, DetRecord, PRCurve};
use crate::rng::{normal_tensor, normal_vec, seeded, uniform_tensor};
use crate::shuffle_attention::{sa_forward, SAConfig, SAWeights};
use crate::simam::{
    analytic_solution, exact_minimizer, median_approximation_gap, simam_oracle_min, simam_weights,
    SimAMConfig,
};
use crate::tensor::{
    channel_shuffle, channel_shuffle_backward, global_avg_pool, group_norm, sigmoid, Dims,
    RawArray, Tensor64,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub grad: Vec<GradCheckReport>,
    pub passed: bool,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} (seed {})", self.suite, self.seed)?;
        if !self.grad.is_empty() {
            writeln!(f, "  {}", GradCheckReport::table_header())?;
            for g in &self.grad {
                writeln!(f, "  {g}")?;
            }
        }
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {:<36} {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        write!(f, "  => {}", if self.passed { "pass" } else { "FAIL" })
    }
}

pub const SUITES: [&str; 4] = ["invariants", "oracle", "grad", "all"];

struct Runner {
    checks: Vec<CheckResult>,
}

impl Runner {
    fn new() -> Self {
        Runner { checks: Vec::new() }
    }

    /// `f` returns `Ok((passed, detail))`; an error counts as a failure.
    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn finish(self, suite: &str, seed: u64, grad: Vec<GradCheckReport>) -> SuiteReport {
        let passed = self.checks.iter().all(|c| c.passed) && grad.iter().all(|g| g.passed);
        SuiteReport {
            suite: suite.to_string(),
            seed,
            checks: self.checks,
            grad,
            passed,
        }
    }
}

pub fn invariants(seed: u64) -> SuiteReport {
    let mut r = Runner::new();
    let mut rng = seeded(seed);

    r.run("simam constant input -> sigmoid(0.5)", || {
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let d = Dims::new(
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                rng.gen_range(1..=6),
                rng.gen_range(1..=6),
            );
            let v = rng.gen_range(-5.0..5.0);
            for lambda in [1e-4, 1e-2, 1.0] {
                let x = Tensor64::full(d, v)?;
                let w = simam_weights(&x, &SimAMConfig::new(lambda)?)?;
                worst = w
                    .data()
                    .iter()
                    .map(|a| (a - sigmoid(0.5)).abs())
                    .fold(worst, f64::max);
            }
        }
        Ok((worst <= 1e-6, format!("max deviation {worst:.2e}")))
    });

    r.run("simam weights in (0.5, 1)", || {
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(2, 3, 5, 5));
        let w = simam_weights(&x, &SimAMConfig::new(1e-4)?)?;
        let ok = w.data().iter().all(|&v| v > 0.5 && v < 1.0);
        Ok((ok, format!("{} weights", w.numel())))
    });

    r.run("fusion coefficients sum below 1", || {
        let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..3.0)).collect();
        let c = normalized_coefficients(&w, 1e-4)?;
        let s: f64 = c.iter().sum();
        let expect = w.iter().sum::<f64>() / (1e-4 + w.iter().sum::<f64>());
        Ok(((s - expect).abs() <= 1e-12 && s < 1.0, format!("sum {s}")))
    });

    r.run("fusion permutation invariance", || {
        let d = Dims::new(1, 3, 4, 4);
        let xs: Vec<Tensor64> = (0..3).map(|_| normal_tensor(&mut rng, d)).collect();
        let w = [0.3, 1.7, 0.9];
        let a = fuse_weighted(&[&xs[0], &xs[1], &xs[2]], &w, 1e-4)?;
        let b = fuse_weighted(&[&xs[2], &xs[0], &xs[1]], &[w[2], w[0], w[1]], 1e-4)?;
        let e = a.max_abs_diff(&b)?;
        Ok((e <= 1e-12, format!("max diff {e:.2e}")))
    });

    r.run("fusion weight homogeneity", || {
        let d = Dims::new(1, 2, 3, 3);
        let xs: Vec<Tensor64> = (0..2).map(|_| normal_tensor(&mut rng, d)).collect();
        let refs = [&xs[0], &xs[1]];
        let w = [0.4, 1.1];
        let c = 3.5;
        let a = fuse_weighted(&refs, &[c * w[0], c * w[1]], 1e-4)?;
        let b = fuse_weighted(&refs, &w, 1e-4 / c)?;
        let e = a.max_abs_diff(&b)?;
        Ok((e <= 1e-9, format!("max diff {e:.2e}")))
    });

    r.run("sa zero weights -> 0.5 x", || {
        let cfg = SAConfig::new(2).with_shuffle_groups(1);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 8, 3, 3));
        let y = sa_forward(&x, &cfg, &SAWeights::zeros(2))?;
        let ok = y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.5 * b);
        Ok((ok && y.dims() == x.dims(), "exact".into()))
    });

    r.run("channel shuffle inverse", || {
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(2, 12, 2, 2));
        let mut ok = true;
        for g in [1, 2, 3, 4, 6, 12] {
            ok &= channel_shuffle_backward(&channel_shuffle(&x, g)?, g)? == x;
        }
        Ok((ok, "groups 1,2,3,4,6,12".into()))
    });

    r.run("group norm statistics", || {
        let x: Tensor64 = uniform_tensor(&mut rng, Dims::new(2, 4, 5, 5), -3.0, 7.0);
        let y = group_norm(&x, 2, 1e-5)?;
        let chunk = 2 * 25;
        let mut worst: f64 = 0.0;
        for g in y.data().chunks(chunk) {
            let m = g.iter().sum::<f64>() / chunk as f64;
            let v = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / chunk as f64;
            worst = worst.max(m.abs()).max((v - 1.0).abs());
        }
        Ok((worst <= 1e-4, format!("max |mean|, |var-1| {worst:.2e}")))
    });

    r.run("global average pool linearity", || {
        let d = Dims::new(1, 3, 4, 5);
        let a: Tensor64 = normal_tensor(&mut rng, d);
        let b: Tensor64 = normal_tensor(&mut rng, d);
        let lhs = global_avg_pool(&a.zip_map(&b, |x, y| 2.0 * x - 0.5 * y)?);
        let rhs = global_avg_pool(&a).zip_map(&global_avg_pool(&b), |x, y| 2.0 * x - 0.5 * y)?;
        let e = lhs.max_abs_diff(&rhs)?;
        Ok((e <= 1e-12, format!("max diff {e:.2e}")))
    });

    r.run("default neck preserves level dims", || {
        let g = FusionGraph::bss_default().with_pyramid(1, 8, 32);
        graph_validate(&g).into_result()?;
        let inputs: BTreeMap<String, Tensor64> = g
            .inputs
            .iter()
            .map(|(k, &d)| (k.clone(), normal_tensor(&mut rng, d)))
            .collect();
        let out = graph_execute(&g, &inputs)?;
        let ok = ["P3", "P4", "P5"]
            .iter()
            .all(|l| out[&format!("{l}out")].dims() == g.inputs[*l]);
        Ok((ok, format!("{} outputs", out.len())))
    });

    r.run("simplify: pan neck -> default neck", || {
        let s = graph_simplify(&FusionGraph::pan_baseline())?;
        let again = graph_simplify(&s)?;
        let same = s == FusionGraph::bss_default();
        Ok((same && again == s, "idempotent".into()))
    });

    r.run("AP invariant under monotone score map", || {
        let dets: Vec<DetRecord> = (0..30)
            .map(|i| DetRecord {
                image: format!("i{}", i % 5),
                class: 0,
                bbox: metrics::BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    0.2,
                    0.2,
                ),
                score: rng.gen_range(0.0..1.0),
            })
            .collect();
        let gts: Vec<metrics::GTRecord> = dets
            .iter()
            .step_by(2)
            .map(|d| metrics::GTRecord {
                image: d.image.clone(),
                class: 0,
                bbox: metrics::BBox::new(d.bbox.cx + 0.02, d.bbox.cy, 0.2, 0.2),
            })
            .collect();
        let a = evaluate(&dets, &gts, 0.5, 1)?.report.map.unwrap();
        let mapped: Vec<DetRecord> = dets
            .iter()
            .map(|d| DetRecord {
                score: d.score.powi(3) * 0.5 + 0.1,
                ..d.clone()
            })
            .collect();
        let b = evaluate(&mapped, &gts, 0.5, 1)?.report.map.unwrap();
        Ok((a == b && (0.0..=1.0).contains(&a), format!("AP {a:.6}")))
    });

    r.run("AP hand fixture [TP, FP, TP]", || {
        let c = PRCurve::from_sweep(0, &[true, false, true], &[0.9, 0.8, 0.7], 2);
        let ap = average_precision(&c)?;
        Ok(((ap - 5.0 / 6.0).abs() <= 1e-9, format!("AP {ap:.9}")))
    });

    r.run("BST1 round trip", || {
        let mut ok = true;
        for _ in 0..10 {
            let dims = vec![
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            ];
            let n = dims.iter().product();
            let data: Vec<f32> = normal_vec(&mut rng, n)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let bytes = RawArray { dims, data }.to_bytes();
            ok &= RawArray::from_bytes(&bytes)?.to_bytes() == bytes;
        }
        Ok((ok, "10 arrays".into()))
    });

    r.finish("invariants", seed, Vec::new())
}

pub fn oracle(seed: u64) -> SuiteReport {
    let mut r = Runner::new();
    let mut rng = seeded(seed);

    r.run("energy closed form vs normal equations", || {
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let m = rng.gen_range(4..=64);
            let lambda = [1e-4, 1e-2, 0.1][i % 3];
            let ch = normal_vec(&mut rng, m);
            let t = rng.gen_range(0..m);
            let sol = simam_oracle_min(&ch, t, lambda)?;
            let (w, b) = analytic_solution(&ch, t, lambda)?;
            worst = worst.max((w - sol.omega_t).abs()).max((b - sol.b_t).abs());
        }
        Ok((worst <= 1e-8, format!("100 channels, max diff {worst:.2e}")))
    });

    r.run("approximation gap shrinks with M", || {
        let sizes = [64, 640, 6400];
        let mut gaps = Vec::new();
        for m in sizes {
            gaps.push(median_approximation_gap(&normal_vec(&mut rng, m), 1e-4)?);
        }
        let ok = gaps.windows(2).all(|w| w[1] < w[0]);
        Ok((
            ok,
            format!(
                "{:?}",
                gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>()
            ),
        ))
    });

    r.run("singular energy system detected", || {
        let ok = matches!(
            exact_minimizer(&[1.5; 8], 3, 0.0),
            Err(Error::Degenerate(_))
        );
        Ok((ok, "lambda = 0, constant channel".into()))
    });

    r.run("bundled eval set vs reference report", || {
        let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
        let (gt, det) = fixtures::write_eval_fixture(dir.path())?;
        let e = metrics::eval_dataset(gt, det, 0.5, fixtures::EVAL_CLASSES)?;
        let bad = metrics::golden_mismatches(&e.report, fixtures::EVAL_ORACLE, 1e-9)?;
        let byte_exact = e.report.to_json() == fixtures::EVAL_GOLDEN;
        let detail = if bad.is_empty() {
            format!(
                "mAP {:.6}, byte-identical: {byte_exact}",
                e.report.map.unwrap_or(f64::NAN)
            )
        } else {
            bad.join("; ")
        };
        Ok((bad.is_empty() && byte_exact, detail))
    });

    r.finish("oracle", seed, Vec::new())
}

/// Gradient checks for `ops` (default: the five core backward passes).
pub fn grad(seed: u64, ops: &[&str], tol: f64) -> Result<SuiteReport> {
    let ops: Vec<&str> = if ops.is_empty() {
        CORE_OPS.to_vec()
    } else {
        ops.to_vec()
    };
    let reports = ops
        .iter()
        .map(|op| check_op(op, DEFAULT_TRIALS, tol, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Runner::new().finish("grad", seed, reports))
}

/// Runs a named suite; `all` runs invariants, oracle and grad in that order.
pub fn run_suite(name: &str, seed: u64, ops: &[&str], tol: f64) -> Result<Vec<SuiteReport>> {
    Ok(match name {
        "invariants" => vec![invariants(seed)],
        "oracle" => vec![oracle(seed)],
        "grad" => vec![grad(seed, ops, tol)?],
        "all" => vec![invariants(seed), oracle(seed), grad(seed, ops, tol)?],
        other => {
            return Err(Error::Config(format!(
                "unknown suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_pass() {
        let r = invariants(7);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn oracle_passes() {
        let r = oracle(7);
        assert!(r.passed, "{r}");
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("fuzz", 0, &[], 1e-4).is_err());
    }
}
