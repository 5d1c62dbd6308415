//! SimAM: parameter-free attention from a per-neuron energy.
//!
//! Each neuron `t` of a `(sample, channel)` plane gets the minimal energy
//!
//! ```text
//! e*(t) = 4 (var + lambda) / ((t - mean)^2 + 2 var + 2 lambda)
//! ```
//!
//! with `mean` and biased `var` taken over the whole plane, and the output is
//! `sigmoid(1 / e*(t)) * t`. Since `1 / e* = (t - mean)^2 / (4 (var + lambda)) + 1/2`,
//! every gate lies strictly inside `(0.5, 1)`.
//!
//! [`oracle`] holds the exact leave-one-out minimization the closed form is
//! checked against.

pub mod oracle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Element, Tensor};

pub use oracle::{
    analytic_solution, exact_minimizer, median_approximation_gap, neuron_energy, simam_oracle_min,
    ExactEnergySolution,
};

pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAMConfig {
    pub lambda: f64,
}

impl Default for SimAMConfig {
    fn default() -> Self {
        SimAMConfig {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl SimAMConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = SimAMConfig { lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "simam lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-neuron minimal energies with the plane statistics that produced them.
/// `mu_hat` and `sigma2_hat` are indexed by `n * C + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyField<T: Element = f32> {
    pub e_star: Tensor<T>,
    pub mu_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
}

#[derive(Clone, Copy)]
struct PlaneStats {
    mean: f64,
    var: f64,
}

fn plane_stats<T: Element>(plane: &[T]) -> PlaneStats {
    let (mean, var) = crate::tensor::ops_mean_var(plane);
    PlaneStats { mean, var }
}

fn all_stats<T: Element>(x: &Tensor<T>, cfg: &SimAMConfig) -> Result<Vec<PlaneStats>> {
    cfg.validate()?;
    let stats: Vec<PlaneStats> = x
        .data()
        .par_chunks(x.dims().plane())
        .map(plane_stats)
        .collect();
    if cfg.lambda == 0.0 {
        if let Some(i) = stats.iter().position(|s| s.var == 0.0) {
            let c = x.dims().c;
            return Err(Error::Degenerate(format!(
                "lambda = 0 with a constant plane (sample {}, channel {}): energy is 0/0",
                i / c,
                i % c
            )));
        }
    }
    Ok(stats)
}

/// `1 / e*` for one neuron.
#[inline]
fn inverse_energy(t: f64, s: PlaneStats, lambda: f64) -> f64 {
    let d = t - s.mean;
    (d * d + 2.0 * s.var + 2.0 * lambda) / (4.0 * (s.var + lambda))
}

pub fn simam_energy<T: Element>(x: &Tensor<T>, cfg: &SimAMConfig) -> Result<EnergyField<T>> {
    let stats = all_stats(x, cfg)?;
    let p = x.dims().plane();
    let mut e = vec![T::default(); x.numel()];
    e.par_chunks_mut(p)
        .zip(x.data().par_chunks(p))
        .zip(stats.par_iter())
        .for_each(|((out, xs), &s)| {
            for (o, &v) in out.iter_mut().zip(xs) {
                let d = v.to_f64() - s.mean;
                let energy = 4.0 * (s.var + cfg.lambda) / (d * d + 2.0 * s.var + 2.0 * cfg.lambda);
                *o = T::from_f64(energy);
            }
        });
    Ok(EnergyField {
        e_star: Tensor::from_parts(x.dims(), e),
        mu_hat: stats.iter().map(|s| s.mean).collect(),
        sigma2_hat: stats.iter().map(|s| s.var).collect(),
    })
}

/// Attention gates `sigmoid(1 / e*)`, same dims as `x`.
pub fn simam_weights<T: Element>(x: &Tensor<T>, cfg: &SimAMConfig) -> Result<Tensor<T>> {
    let stats = all_stats(x, cfg)?;
    Ok(per_neuron(x, &stats, |v, s| {
        sigmoid(inverse_energy(v, s, cfg.lambda))
    }))
}

pub fn simam_forward<T: Element>(x: &Tensor<T>, cfg: &SimAMConfig) -> Result<Tensor<T>> {
    let stats = all_stats(x, cfg)?;
    Ok(per_neuron(x, &stats, |v, s| {
        sigmoid(inverse_energy(v, s, cfg.lambda)) * v
    }))
}

fn per_neuron<T: Element>(
    x: &Tensor<T>,
    stats: &[PlaneStats],
    f: impl Fn(f64, PlaneStats) -> f64 + Sync,
) -> Tensor<T> {
    let p = x.dims().plane();
    let mut out = vec![T::default(); x.numel()];
    out.par_chunks_mut(p)
        .zip(x.data().par_chunks(p))
        .zip(stats.par_iter())
        .for_each(|((out, xs), &s)| {
            for (o, &v) in out.iter_mut().zip(xs) {
                *o = T::from_f64(f(v.to_f64(), s));
            }
        });
    Tensor::from_parts(x.dims(), out)
}

/// `dL/dx` for `L = <upstream, simam_forward(x)>`, including the paths through
/// the plane mean and variance.
pub fn simam_backward<T: Element>(
    x: &Tensor<T>,
    cfg: &SimAMConfig,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    upstream.expect_dims(x.dims(), "simam_backward upstream")?;
    let stats = all_stats(x, cfg)?;
    let p = x.dims().plane();
    let m = p as f64;
    let mut out = vec![T::default(); x.numel()];
    out.par_chunks_mut(p)
        .zip(x.data().par_chunks(p).zip(upstream.data().par_chunks(p)))
        .zip(stats.par_iter())
        .for_each(|((out, (xs, gs)), &s)| {
            let a = s.var + cfg.lambda;
            let mut q = Vec::with_capacity(xs.len());
            let mut gate = Vec::with_capacity(xs.len());
            let (mut sum_qd, mut sum_qd2) = (0.0, 0.0);
            for (&v, &g) in xs.iter().zip(gs) {
                let v = v.to_f64();
                let sg = sigmoid(inverse_energy(v, s, cfg.lambda));
                let qi = g.to_f64() * v * sg * (1.0 - sg);
                let d = v - s.mean;
                sum_qd += qi * d;
                sum_qd2 += qi * d * d;
                q.push(qi);
                gate.push(sg);
            }
            for (j, o) in out.iter_mut().enumerate() {
                let d = xs[j].to_f64() - s.mean;
                let grad = gs[j].to_f64() * gate[j] + q[j] * d / (2.0 * a)
                    - sum_qd / (2.0 * a * m)
                    - sum_qd2 * d / (2.0 * a * a * m);
                *o = T::from_f64(grad);
            }
        });
    Ok(Tensor::from_parts(x.dims(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use crate::tensor::{Dims, Tensor64};

    const SIG_HALF: f64 = 0.622_459_331_201_854_6;

    #[test]
    fn constant_plane_energy_is_two() {
        for lambda in [1e-4, 0.1, 3.0] {
            let x = Tensor64::full([2, 3, 4, 4], -1.75).unwrap();
            let e = simam_energy(&x, &SimAMConfig::new(lambda).unwrap()).unwrap();
            assert!(e.e_star.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
            assert!(e.sigma2_hat.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn energy_of_small_channel() {
        let x = Tensor64::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = simam_energy(&x, &SimAMConfig::new(0.1).unwrap()).unwrap();
        assert!((e.mu_hat[0] - 2.5).abs() < 1e-12);
        assert!((e.sigma2_hat[0] - 1.25).abs() < 1e-12);
        assert!((e.e_star.data()[0] - 1.090909).abs() < 1e-6);
        let y = simam_forward(&x, &SimAMConfig::new(0.1).unwrap()).unwrap();
        assert!((y.data()[0] - 0.714371).abs() < 1e-5);
    }

    #[test]
    fn affine_homogeneity() {
        let mut rng = seeded(3);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 2, 3, 5));
        let (a, c) = (2.5, -0.75);
        let lambda = 0.01;
        let e0 = simam_energy(&x, &SimAMConfig::new(lambda).unwrap()).unwrap();
        let e1 = simam_energy(
            &x.map(|v| a * v + c),
            &SimAMConfig::new(lambda * a * a).unwrap(),
        )
        .unwrap();
        assert!(e0.e_star.max_abs_diff(&e1.e_star).unwrap() < 1e-6);
    }

    #[test]
    fn forward_trivial_cases() {
        let cfg = SimAMConfig::default();
        let z = Tensor64::zeros([1, 2, 3, 3]).unwrap();
        assert!(simam_forward(&z, &cfg)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let x = Tensor64::full([1, 1, 2, 2], 3.0).unwrap();
        let y = simam_forward(&x, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0 * SIG_HALF).abs() < 1e-12));
    }

    #[test]
    fn zero_lambda_rules() {
        let cfg = SimAMConfig::new(0.0).unwrap();
        let flat = Tensor64::full([1, 1, 2, 2], 1.0).unwrap();
        assert!(matches!(
            simam_energy(&flat, &cfg),
            Err(Error::Degenerate(_))
        ));
        let x = Tensor64::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert!(simam_forward(&x, &cfg).is_ok());
        assert!(SimAMConfig::new(-1.0).is_err());
        assert!(SimAMConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn gates_strictly_inside_half_one_and_monotone() {
        let mut rng = seeded(11);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(2, 3, 4, 4));
        let cfg = SimAMConfig::default();
        let w = simam_weights(&x, &cfg).unwrap();
        let e = simam_energy(&x, &cfg).unwrap();
        assert!(w.data().iter().all(|&g| g > 0.5 && g < 1.0));
        for n in 0..2 {
            for c in 0..3 {
                let mu = e.mu_hat[n * 3 + c];
                let xs = x.plane(n, c);
                let ws = w.plane(n, c);
                let mut idx: Vec<usize> = (0..xs.len()).collect();
                idx.sort_by(|&a, &b| (xs[a] - mu).abs().total_cmp(&(xs[b] - mu).abs()));
                for pair in idx.windows(2) {
                    let (da, db) = ((xs[pair[0]] - mu).abs(), (xs[pair[1]] - mu).abs());
                    if db > da {
                        assert!(ws[pair[1]] > ws[pair[0]]);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let cfg = SimAMConfig::default();
        let z = Tensor64::zeros([1, 1, 2, 3]).unwrap();
        let g = Tensor64::from_fn([1, 1, 2, 3], |_, _, h, w| (h * 3 + w) as f64 - 2.0).unwrap();
        let dx = simam_backward(&z, &cfg, &g).unwrap();
        let expected = g.scale(SIG_HALF);
        assert!(dx.max_abs_diff(&expected).unwrap() < 1e-12);

        let mut rng = seeded(5);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 2, 3, 3));
        let dx = simam_backward(&x, &cfg, &Tensor64::zeros([1, 2, 3, 3]).unwrap()).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(17);
        let dims = Dims::new(1, 2, 3, 3);
        let x: Tensor64 = normal_tensor(&mut rng, dims);
        let g: Tensor64 = normal_tensor(&mut rng, dims);
        let cfg = SimAMConfig::new(1e-4).unwrap();
        let dx = simam_backward(&x, &cfg, &g).unwrap();
        for i in 0..x.numel() {
            let h = 1e-3 * x.data()[i].abs().max(1.0);
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp = simam_forward(&xp, &cfg).unwrap().dot(&g).unwrap();
            let lm = simam_forward(&xm, &cfg).unwrap().dot(&g).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let a = dx.data()[i];
            assert!(
                (a - num).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-4,
                "{i}: {a} vs {num}"
            );
        }
    }
}
