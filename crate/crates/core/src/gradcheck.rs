//! Central finite differences and a driver that checks every registered
//! backward pass against them.
//!
//! Each trial draws a random shape and input, a random upstream gradient `u`,
//! and compares the analytic gradient of `L = <u, op(x)>` with
//! central differences of `L` at `h = 1e-3 * max(1, |x_i|)`, all in f64.
//! The driver combines the differences at `h` and `h / 2` as
//! `(4 D(h/2) - D(h)) / 3`, which cancels the `h^2` truncation term; without
//! that, elements whose gradient is near zero (|g| ~ 1e-4) routinely exceed a
//! 1e-4 relative tolerance from truncation alone.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bifpn::{fuse_weighted, fuse_weighted_backward};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, normal_vec, seeded, SeededRng};
use crate::shuffle_attention::{sa_backward, sa_forward, SAConfig, SAWeights};
use crate::simam::{simam_backward, simam_forward, SimAMConfig, DEFAULT_LAMBDA};
use crate::tensor::{
    channel_shuffle, channel_shuffle_backward, global_avg_pool, global_avg_pool_backward,
    group_norm, group_norm_backward, pointwise_conv, pointwise_conv_backward, resample,
    resample_backward, Conv1x1, Dims, Resample, Tensor64,
};

type ParamSlot = fn(&mut SAWeights) -> &mut Vec<f64>;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
/// Relative step: `h_i = STEP * max(1, |x_i|)`.
pub const STEP: f64 = 1e-3;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Names accepted by [`check_op`].
pub const OPS: [&str; 10] = [
    "identity",
    "simam",
    "sa",
    "fuse_weighted",
    "group_norm",
    "pointwise_conv",
    "channel_shuffle",
    "global_avg_pool",
    "resample_up2",
    "resample_down2",
];

/// Ops covered by the default `bss check --suite grad` run.
pub const CORE_OPS: [&str; 5] = [
    "simam",
    "sa",
    "fuse_weighted",
    "group_norm",
    "pointwise_conv",
];

fn canonical(name: &str) -> Option<&'static str> {
    let name = match name {
        "simam_forward" => "simam",
        "sa_forward" | "shuffle_attention" => "sa",
        "fuse" => "fuse_weighted",
        "gap" => "global_avg_pool",
        other => other,
    };
    OPS.iter().copied().find(|&o| o == name)
}

fn central(f: &impl Fn(&[f64]) -> Result<f64>, probe: &mut [f64], i: usize, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let x = probe[i];
    probe[i] = x + h;
    let plus = f(probe);
    probe[i] = x - h;
    let minus = f(probe);
    probe[i] = x;
    let (plus, minus) = (plus?, minus?);
    if !(plus.is_finite() && minus.is_finite()) {
        return Err(Error::Oracle(format!(
            "non-finite function value near element {i} (f+ = {plus}, f- = {minus})"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Central difference of a scalar function of a flat vector, with per-element
/// step `step(x_i)`.
pub fn numeric_grad_vec(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    step: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| central(&f, &mut probe, i, step(x[i])))
        .collect()
}

/// `(4 D(h/2) - D(h)) / 3` from central differences `D`: fourth-order accurate.
pub fn richardson_grad_vec(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    step: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step(x[i]);
            let coarse = central(&f, &mut probe, i, h)?;
            let fine = central(&f, &mut probe, i, h / 2.0)?;
            Ok((4.0 * fine - coarse) / 3.0)
        })
        .collect()
}

/// Central difference of `f` at `x` with a fixed step `h`.
pub fn numeric_grad(
    f: impl Fn(&Tensor64) -> Result<f64>,
    x: &Tensor64,
    h: f64,
) -> Result<Tensor64> {
    let dims = x.dims();
    let g = numeric_grad_vec(|v| f(&Tensor64::new(dims, v.to_vec())?), x.data(), |_| h)?;
    Tensor64::new(dims, g)
}

/// Step used by [`check_op`] for an element of value `v`.
pub fn relative_step(v: f64) -> f64 {
    STEP * v.abs().max(1.0)
}

/// Where the largest relative error was seen.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstElement {
    pub trial: usize,
    /// Which gradient: `x`, `x1`, `w`, `weight`, `bias`, `w1`, ...
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub seed: u64,
    pub shapes: Vec<String>,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<WorstElement>,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {:>6} {:>8} {:>12.3e} {:>12.3e}  {}",
            self.op,
            self.trials,
            self.elements,
            self.max_rel_err,
            self.max_abs_err,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

impl GradCheckReport {
    pub fn table_header() -> String {
        format!(
            "{:<16} {:>6} {:>8} {:>12} {:>12}  result",
            "op", "trials", "elements", "max rel err", "max abs err"
        )
    }
}

/// One gradient compared within a trial.
struct Slot {
    name: String,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

struct Trial {
    shape: String,
    slots: Vec<Slot>,
}

fn slot(name: &str, analytic: Vec<f64>, numeric: Vec<f64>) -> Slot {
    Slot {
        name: name.to_string(),
        analytic,
        numeric,
    }
}

/// `<u, y>` accumulated in index order.
fn inner(u: &Tensor64, y: &Tensor64) -> Result<f64> {
    u.dot(y)
}

/// Finite differences with respect to the whole tensor `x`.
fn fd_tensor(x: &Tensor64, f: impl Fn(&Tensor64) -> Result<f64>) -> Result<Vec<f64>> {
    let dims = x.dims();
    richardson_grad_vec(
        |v| f(&Tensor64::from_parts(dims, v.to_vec())),
        x.data(),
        relative_step,
    )
}

fn fd_vec(x: &[f64], f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    richardson_grad_vec(f, x, relative_step)
}

fn pick<T: Copy>(rng: &mut SeededRng, items: &[T]) -> T {
    *items.choose(rng).unwrap()
}

fn divisors(c: usize) -> Vec<usize> {
    (1..=c).filter(|d| c.is_multiple_of(*d)).collect()
}

fn small_dims(rng: &mut SeededRng, c: usize) -> Dims {
    Dims::new(
        rng.gen_range(1..=2),
        c,
        rng.gen_range(2..=4),
        rng.gen_range(2..=4),
    )
}

fn run_trial(op: &str, rng: &mut SeededRng) -> Result<Trial> {
    match op {
        "identity" => {
            let c = rng.gen_range(1..=3);
            let d = small_dims(rng, c);
            let x: Tensor64 = normal_tensor(rng, d);
            let u: Tensor64 = normal_tensor(rng, d);
            let numeric = fd_tensor(&x, |x| inner(&u, x))?;
            Ok(Trial {
                shape: d.to_string(),
                slots: vec![slot("x", u.into_data(), numeric)],
            })
        }
        "simam" => {
            let c = rng.gen_range(1..=3);
            let d = small_dims(rng, c);
            let cfg = SimAMConfig::new(DEFAULT_LAMBDA)?;
            let x: Tensor64 = normal_tensor(rng, d);
            let u: Tensor64 = normal_tensor(rng, d);
            let analytic = simam_backward(&x, &cfg, &u)?;
            let numeric = fd_tensor(&x, |x| inner(&u, &simam_forward(x, &cfg)?))?;
            Ok(Trial {
                shape: d.to_string(),
                slots: vec![slot("x", analytic.into_data(), numeric)],
            })
        }
        "sa" => {
            let k = rng.gen_range(1..=2);
            let half = rng.gen_range(1..=2);
            let c = 2 * k * half;
            let cfg = SAConfig::new(k).with_shuffle_groups(pick(rng, &divisors(c)));
            let d = small_dims(rng, c);
            let x: Tensor64 = normal_tensor(rng, d);
            let u: Tensor64 = normal_tensor(rng, d);
            let wts = SAWeights {
                w1: normal_vec(rng, half),
                b1: normal_vec(rng, half),
                w2: normal_vec(rng, half),
                b2: normal_vec(rng, half),
            };
            let (dx, dw) = sa_backward(&x, &cfg, &wts, &u)?;
            let loss = |x: &Tensor64, w: &SAWeights| inner(&u, &sa_forward(x, &cfg, w)?);
            let mut slots = vec![slot("x", dx.into_data(), fd_tensor(&x, |x| loss(x, &wts))?)];
            let params: [(&str, ParamSlot, &Vec<f64>); 4] = [
                ("w1", |w| &mut w.w1, &dw.w1),
                ("b1", |w| &mut w.b1, &dw.b1),
                ("w2", |w| &mut w.w2, &dw.w2),
                ("b2", |w| &mut w.b2, &dw.b2),
            ];
            for (name, field, analytic) in params {
                let mut probe = wts.clone();
                let base = field(&mut probe).clone();
                let numeric = fd_vec(&base, |v| {
                    let mut w = wts.clone();
                    *field(&mut w) = v.to_vec();
                    loss(&x, &w)
                })?;
                slots.push(slot(name, analytic.clone(), numeric));
            }
            Ok(Trial {
                shape: format!("{d} K={k} g={}", cfg.shuffle_groups),
                slots,
            })
        }
        "fuse_weighted" => {
            let k = rng.gen_range(2..=4);
            let c = rng.gen_range(1..=3);
            let d = small_dims(rng, c);
            let xs: Vec<Tensor64> = (0..k).map(|_| normal_tensor(rng, d)).collect();
            // positive weights keep away from the clamp at zero
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..2.0)).collect();
            let eps = crate::bifpn::DEFAULT_EPSILON;
            let u: Tensor64 = normal_tensor(rng, d);
            let refs: Vec<&Tensor64> = xs.iter().collect();
            let (dxs, dw) = fuse_weighted_backward(&refs, &w, eps, &u)?;
            let mut slots = Vec::new();
            for (i, dx) in dxs.into_iter().enumerate() {
                let numeric = fd_tensor(&xs[i], |xi| {
                    let mut r = refs.clone();
                    r[i] = xi;
                    inner(&u, &fuse_weighted(&r, &w, eps)?)
                })?;
                slots.push(slot(&format!("x{i}"), dx.into_data(), numeric));
            }
            let numeric = fd_vec(&w, |w| inner(&u, &fuse_weighted(&refs, w, eps)?))?;
            slots.push(slot("w", dw, numeric));
            Ok(Trial {
                shape: format!("{k}x{d}"),
                slots,
            })
        }
        "group_norm" => {
            let c = rng.gen_range(1..=4);
            let groups = pick(rng, &divisors(c));
            let d = small_dims(rng, c);
            let delta = 1e-5;
            let x: Tensor64 = normal_tensor(rng, d);
            let u: Tensor64 = normal_tensor(rng, d);
            let analytic = group_norm_backward(&x, groups, delta, &u)?;
            let numeric = fd_tensor(&x, |x| inner(&u, &group_norm(x, groups, delta)?))?;
            Ok(Trial {
                shape: format!("{d} G={groups}"),
                slots: vec![slot("x", analytic.into_data(), numeric)],
            })
        }
        "pointwise_conv" => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let d = small_dims(rng, ci);
            let x: Tensor64 = normal_tensor(rng, d);
            let conv = Conv1x1::new(co, ci, normal_vec(rng, co * ci), normal_vec(rng, co))?;
            let u: Tensor64 = normal_tensor(rng, d.with_c(co));
            let (dx, grads) = pointwise_conv_backward(&x, &conv, &u)?;
            let nx = fd_tensor(&x, |x| inner(&u, &pointwise_conv(x, &conv)?))?;
            let nw = fd_vec(&conv.weight, |w| {
                let c = Conv1x1 {
                    weight: w.to_vec(),
                    ..conv.clone()
                };
                inner(&u, &pointwise_conv(&x, &c)?)
            })?;
            let nb = fd_vec(&conv.bias, |b| {
                let c = Conv1x1 {
                    bias: b.to_vec(),
                    ..conv.clone()
                };
                inner(&u, &pointwise_conv(&x, &c)?)
            })?;
            Ok(Trial {
                shape: format!("{d} -> {co}"),
                slots: vec![
                    slot("x", dx.into_data(), nx),
                    slot("weight", grads.weight, nw),
                    slot("bias", grads.bias, nb),
                ],
            })
        }
        "channel_shuffle" => {
            let c = rng.gen_range(1..=6);
            let groups = pick(rng, &divisors(c));
            let d = small_dims(rng, c);
            let x: Tensor64 = normal_tensor(rng, d);
            let u: Tensor64 = normal_tensor(rng, d);
            let analytic = channel_shuffle_backward(&u, groups)?;
            let numeric = fd_tensor(&x, |x| inner(&u, &channel_shuffle(x, groups)?))?;
            Ok(Trial {
                shape: format!("{d} g={groups}"),
                slots: vec![slot("x", analytic.into_data(), numeric)],
            })
        }
        "global_avg_pool" => {
            let c = rng.gen_range(1..=3);
            let d = small_dims(rng, c);
            let x: Tensor64 = normal_tensor(rng, d);
            let u: Tensor64 = normal_tensor(rng, Dims::new(d.n, d.c, 1, 1));
            let analytic = global_avg_pool_backward(d, &u)?;
            let numeric = fd_tensor(&x, |x| inner(&u, &global_avg_pool(x)))?;
            Ok(Trial {
                shape: d.to_string(),
                slots: vec![slot("x", analytic.into_data(), numeric)],
            })
        }
        "resample_up2" | "resample_down2" => {
            let mode = if op == "resample_up2" {
                Resample::Up2
            } else {
                Resample::Down2
            };
            let (h, w) = (2 * rng.gen_range(1..=2), 2 * rng.gen_range(1..=2));
            let d = Dims::new(rng.gen_range(1..=2), rng.gen_range(1..=3), h, w);
            // distinct values spaced well beyond the step so max-pooling never
            // switches winner inside a difference
            let mut vals: Vec<f64> = (0..d.numel()).map(|i| i as f64 * 0.1).collect();
            vals.shuffle(rng);
            let x = Tensor64::new(d, vals)?;
            let u: Tensor64 = normal_tensor(rng, mode.output_dims(d)?);
            let analytic = resample_backward(&x, mode, &u)?;
            let numeric = fd_tensor(&x, |x| inner(&u, &resample(x, mode)?))?;
            Ok(Trial {
                shape: d.to_string(),
                slots: vec![slot("x", analytic.into_data(), numeric)],
            })
        }
        other => Err(Error::UnknownOp(other.to_string())),
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `trials` random comparisons of `op`'s backward pass against finite
/// differences. Trials run in parallel; the report is assembled in trial order.
pub fn check_op(op: &str, trials: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let name = canonical(op).ok_or_else(|| Error::UnknownOp(op.to_string()))?;
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be > 0, got {tol}")));
    }
    let results: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(name, &mut seeded(trial_seed(seed, t))))
        .collect::<Result<_>>()?;
    let mut report = GradCheckReport {
        op: name.to_string(),
        trials,
        seed,
        shapes: Vec::with_capacity(trials),
        elements: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        tol,
        passed: false,
    };
    for (t, trial) in results.into_iter().enumerate() {
        report.shapes.push(trial.shape);
        for s in trial.slots {
            debug_assert_eq!(s.analytic.len(), s.numeric.len());
            report.elements += s.analytic.len();
            for (i, (&a, &n)) in s.analytic.iter().zip(&s.numeric).enumerate() {
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
                report.max_abs_err = report.max_abs_err.max(abs);
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst = Some(WorstElement {
                        trial: t,
                        tensor: s.name.clone(),
                        index: i,
                        analytic: a,
                        numeric: n,
                    });
                }
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
