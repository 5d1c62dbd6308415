//! Exact minimization of the per-neuron SimAM energy.
//!
//! For a target neuron `t` and the other `M - 1` neurons `x_i` of its channel,
//! the energy with labels `+1` (target) and `-1` (others) is
//!
//! ```text
//! E(w, b) = 1/(M-1) * sum_i (-1 - (w x_i + b))^2 + (1 - (w t + b))^2 + lambda w^2
//! ```
//!
//! [`exact_minimizer`] solves the 2×2 normal equations of `E` from raw sums.
//! [`analytic_solution`] is the closed form in terms of leave-one-out mean
//! and variance. The two are computed independently so each checks the other.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Random `(w, b)` probes per oracle call.
pub const ORACLE_SAMPLES: usize = 10_000;

/// Minimizer of the energy for one target neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactEnergySolution {
    pub omega_t: f64,
    pub b_t: f64,
    pub e_min: f64,
    pub t_index: usize,
    /// Mean of the channel without the target.
    pub mu_t: f64,
    /// Biased variance of the channel without the target.
    pub sigma2_t: f64,
    /// Random probes confirmed not to beat `e_min` (0 if not sampled).
    pub samples_checked: usize,
}

fn check_inputs(channel: &[f64], t_index: usize, lambda: f64) -> Result<()> {
    if channel.len() < 2 {
        return Err(Error::Config(format!(
            "channel needs at least 2 neurons, got {}",
            channel.len()
        )));
    }
    if t_index >= channel.len() {
        return Err(Error::Config(format!(
            "target index {t_index} out of range for {} neurons",
            channel.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

fn others(channel: &[f64], t_index: usize) -> impl Iterator<Item = f64> + '_ {
    channel
        .iter()
        .enumerate()
        .filter(move |&(i, _)| i != t_index)
        .map(|(_, &v)| v)
}

/// Leave-one-out mean and biased variance.
pub fn leave_one_out_stats(channel: &[f64], t_index: usize) -> (f64, f64) {
    let k = (channel.len() - 1) as f64;
    let mean = others(channel, t_index).sum::<f64>() / k;
    let var = others(channel, t_index)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / k;
    (mean, var)
}

/// The energy `E(w, b)` evaluated term by term.
pub fn neuron_energy(channel: &[f64], t_index: usize, omega: f64, b: f64, lambda: f64) -> f64 {
    let k = (channel.len() - 1) as f64;
    let t = channel[t_index];
    let background = others(channel, t_index)
        .map(|x| {
            let r = -1.0 - (omega * x + b);
            r * r
        })
        .sum::<f64>()
        / k;
    let r = 1.0 - (omega * t + b);
    background + r * r + lambda * omega * omega
}

/// Solves `grad E = 0` directly:
///
/// ```text
/// [ S2 + t^2 + lambda   S1 + t ] [w]   [ t - S1 ]
/// [ S1 + t              2      ] [b] = [ 0      ]
/// ```
///
/// with `S1`, `S2` the first and second raw moments of the non-target neurons.
pub fn exact_minimizer(
    channel: &[f64],
    t_index: usize,
    lambda: f64,
) -> Result<ExactEnergySolution> {
    check_inputs(channel, t_index, lambda)?;
    let k = (channel.len() - 1) as f64;
    let t = channel[t_index];
    let s1 = others(channel, t_index).sum::<f64>() / k;
    let s2 = others(channel, t_index).map(|v| v * v).sum::<f64>() / k;
    let (a11, a12, a22) = (s2 + t * t + lambda, s1 + t, 2.0);
    let (r1, r2) = (t - s1, 0.0);
    let det = a11 * a22 - a12 * a12;
    let scale = a11.abs().max(a12 * a12).max(1.0);
    if det.abs() <= 1e-14 * scale {
        return Err(Error::Degenerate(format!(
            "singular normal equations (det = {det:e}): lambda = 0 with identical neurons"
        )));
    }
    let omega_t = (r1 * a22 - a12 * r2) / det;
    let b_t = (a11 * r2 - a12 * r1) / det;
    let (mu_t, sigma2_t) = leave_one_out_stats(channel, t_index);
    Ok(ExactEnergySolution {
        omega_t,
        b_t,
        e_min: neuron_energy(channel, t_index, omega_t, b_t, lambda),
        t_index,
        mu_t,
        sigma2_t,
        samples_checked: 0,
    })
}

/// Closed-form `(w, b)` from leave-one-out statistics:
/// `w = 2 (t - mu_t) / ((t - mu_t)^2 + 2 sigma_t^2 + 2 lambda)`, `b = -(t + mu_t) w / 2`.
///
/// The weight is positive for `t > mu_t`: the target is pushed toward its `+1`
/// label and the background toward `-1`.
pub fn analytic_solution(channel: &[f64], t_index: usize, lambda: f64) -> Result<(f64, f64)> {
    check_inputs(channel, t_index, lambda)?;
    let t = channel[t_index];
    let (mu, var) = leave_one_out_stats(channel, t_index);
    let d = t - mu;
    let denom = d * d + 2.0 * var + 2.0 * lambda;
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "closed form undefined: lambda = 0 with identical neurons".into(),
        ));
    }
    let omega = 2.0 * d / denom;
    Ok((omega, -0.5 * (t + mu) * omega))
}

/// Closed-form minimal energy from leave-one-out statistics.
pub fn analytic_min_energy(channel: &[f64], t_index: usize, lambda: f64) -> Result<f64> {
    check_inputs(channel, t_index, lambda)?;
    let (mu, var) = leave_one_out_stats(channel, t_index);
    let d = channel[t_index] - mu;
    Ok(4.0 * (var + lambda) / (d * d + 2.0 * var + 2.0 * lambda))
}

/// [`exact_minimizer`] plus a randomized certificate: [`ORACLE_SAMPLES`]
/// probes around the solution at scales from 1e-4 to 1e2, none of which may
/// reach a lower energy.
pub fn simam_oracle_min(
    channel: &[f64],
    t_index: usize,
    lambda: f64,
) -> Result<ExactEnergySolution> {
    let mut sol = exact_minimizer(channel, t_index, lambda)?;
    let seed = channel.iter().fold(0x51a4_u64 ^ t_index as u64, |h, v| {
        h.rotate_left(7) ^ v.to_bits()
    });
    let mut rng = seeded(seed);
    const SCALES: [f64; 4] = [1e-4, 1e-2, 1.0, 1e2];
    let slack = 1e-12 * sol.e_min.abs().max(1.0);
    for i in 0..ORACLE_SAMPLES {
        let s = SCALES[i % SCALES.len()];
        let w = sol.omega_t + s * rng.sample::<f64, _>(StandardNormal);
        let b = sol.b_t + s * rng.sample::<f64, _>(StandardNormal);
        let e = neuron_energy(channel, t_index, w, b, lambda);
        if e < sol.e_min - slack {
            return Err(Error::Oracle(format!(
                "probe (w={w}, b={b}) reached energy {e} below the solved minimum {}",
                sol.e_min
            )));
        }
    }
    sol.samples_checked = ORACLE_SAMPLES;
    Ok(sol)
}

/// Median over neurons of `|full-channel energy - exact leave-one-out minimum|`
/// for one channel.
pub fn median_approximation_gap(channel: &[f64], lambda: f64) -> Result<f64> {
    let m = channel.len() as f64;
    let mean = channel.iter().sum::<f64>() / m;
    let var = channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let mut gaps = Vec::with_capacity(channel.len());
    for (t, &v) in channel.iter().enumerate() {
        let d = v - mean;
        let approx = 4.0 * (var + lambda) / (d * d + 2.0 * var + 2.0 * lambda);
        let exact = exact_minimizer(channel, t, lambda)?.e_min;
        gaps.push((approx - exact).abs());
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    Ok(if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    })
}
