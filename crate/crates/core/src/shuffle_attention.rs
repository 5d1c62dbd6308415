//! Shuffle Attention.
//!
//! Channels are cut into `K` contiguous groups. Each group is halved: the
//! first half goes through a channel gate `sigmoid(w1 * GAP(x) + b1)`, the
//! second through a spatial gate `sigmoid(w2 * GN(x) + b2)` with per-channel
//! normalization. Halves and groups are concatenated back in order and the
//! result is channel-shuffled. Parameters are per-channel vectors of length
//! `C / 2K`, shared by all groups.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    channel_shuffle, channel_shuffle_backward, ops_mean_var, ops_sum64, read_array,
    shuffle_permutation, sigmoid, write_array, Element, RawArray, Tensor,
};

pub const DEFAULT_GN_DELTA: f64 = 1e-5;
pub const DEFAULT_SHUFFLE_GROUPS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SAConfig {
    /// Number of feature groups `K`.
    pub groups: usize,
    pub gn_delta: f64,
    pub shuffle_groups: usize,
}

impl SAConfig {
    pub fn new(groups: usize) -> Self {
        SAConfig {
            groups,
            gn_delta: DEFAULT_GN_DELTA,
            shuffle_groups: DEFAULT_SHUFFLE_GROUPS,
        }
    }

    pub fn with_shuffle_groups(self, shuffle_groups: usize) -> Self {
        SAConfig {
            shuffle_groups,
            ..self
        }
    }

    /// Channels per branch half, `C / 2K`.
    pub fn half_width(&self, channels: usize) -> Result<usize> {
        if self.groups == 0 || !channels.is_multiple_of(2 * self.groups) {
            return Err(Error::Config(format!(
                "2K = {} must divide channel count {channels}",
                2 * self.groups
            )));
        }
        if self.shuffle_groups == 0 || !channels.is_multiple_of(self.shuffle_groups) {
            return Err(Error::Config(format!(
                "shuffle_groups = {} must divide channel count {channels}",
                self.shuffle_groups
            )));
        }
        if !(self.gn_delta.is_finite() && self.gn_delta > 0.0) {
            return Err(Error::Config(format!(
                "gn_delta must be finite and > 0, got {}",
                self.gn_delta
            )));
        }
        Ok(channels / (2 * self.groups))
    }
}

/// Per-channel gate parameters. Also used to carry their gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SAWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

const WEIGHT_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl SAWeights {
    /// `w1 = w2 = 1`, `b1 = b2 = 0`.
    pub fn default_for(half: usize) -> Self {
        SAWeights {
            w1: vec![1.0; half],
            b1: vec![0.0; half],
            w2: vec![1.0; half],
            b2: vec![0.0; half],
        }
    }

    pub fn zeros(half: usize) -> Self {
        SAWeights {
            w1: vec![0.0; half],
            b1: vec![0.0; half],
            w2: vec![0.0; half],
            b2: vec![0.0; half],
        }
    }

    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }

    fn vectors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn check(&self, half: usize) -> Result<()> {
        for (name, v) in WEIGHT_NAMES.iter().zip(self.vectors()) {
            if v.len() != half {
                return Err(Error::Config(format!(
                    "{name} has length {}, expected C/2K = {half}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Loads `manifest.json` (`{"w1": "w1.bst", ...}`) and the four BST1
    /// vectors it names, relative to `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        let mut vecs = Vec::with_capacity(4);
        for name in WEIGHT_NAMES {
            let file = manifest.get(name).ok_or_else(|| {
                Error::Config(format!(
                    "{}: missing entry `{name}`",
                    manifest_path.display()
                ))
            })?;
            let arr = read_array(dir.join(file))?;
            vecs.push(arr.data.iter().map(|&v| v as f64).collect::<Vec<f64>>());
        }
        let b2 = vecs.pop().unwrap();
        let w2 = vecs.pop().unwrap();
        let b1 = vecs.pop().unwrap();
        let w1 = vecs.pop().unwrap();
        Ok(SAWeights { w1, b1, w2, b2 })
    }

    /// Writes the four vectors as rank-1 BST1 files plus `manifest.json`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = BTreeMap::new();
        for (name, v) in WEIGHT_NAMES.iter().zip(self.vectors()) {
            let file = format!("{name}.bst");
            let arr = RawArray::new(vec![v.len()], v.iter().map(|&x| x as f32).collect())?;
            write_array(dir.join(&file), &arr)?;
            manifest.insert(name.to_string(), file);
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        crate::tensor::write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }
}

/// Splits `x` into `K` `(channel-branch, spatial-branch)` halves.
pub fn sa_split<T: Element>(x: &Tensor<T>, cfg: &SAConfig) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let half = cfg.half_width(x.dims().c)?;
    (0..cfg.groups)
        .map(|k| {
            let start = 2 * k * half;
            Ok((
                x.narrow_channels(start, half)?,
                x.narrow_channels(start + half, half)?,
            ))
        })
        .collect()
}

fn check_params(channels: usize, a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != channels || b.len() != channels {
        return Err(Error::Config(format!(
            "{what}: parameter lengths ({}, {}) must equal channel count {channels}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `sigmoid(w1[c] * GAP(x)[c] + b1[c]) * x` per channel.
pub fn sa_channel_branch<T: Element>(x: &Tensor<T>, w1: &[f64], b1: &[f64]) -> Result<Tensor<T>> {
    let d = x.dims();
    check_params(d.c, w1, b1, "channel branch")?;
    let p = d.plane();
    let mut out = vec![T::default(); x.numel()];
    out.par_chunks_mut(p)
        .zip(x.data().par_chunks(p))
        .enumerate()
        .for_each(|(i, (o, xs))| {
            let c = i % d.c;
            let g = ops_sum64(xs) / p as f64;
            let s = sigmoid(w1[c] * g + b1[c]);
            for (o, &v) in o.iter_mut().zip(xs) {
                *o = T::from_f64(s * v.to_f64());
            }
        });
    Ok(Tensor::from_parts(d, out))
}

/// `sigmoid(w2[c] * GN(x) + b2[c]) * x`, GN normalizing each channel plane.
pub fn sa_spatial_branch<T: Element>(
    x: &Tensor<T>,
    w2: &[f64],
    b2: &[f64],
    gn_delta: f64,
) -> Result<Tensor<T>> {
    let d = x.dims();
    check_params(d.c, w2, b2, "spatial branch")?;
    let p = d.plane();
    let mut out = vec![T::default(); x.numel()];
    out.par_chunks_mut(p)
        .zip(x.data().par_chunks(p))
        .enumerate()
        .for_each(|(i, (o, xs))| {
            let c = i % d.c;
            let (mean, var) = ops_mean_var(xs);
            let inv = 1.0 / (var + gn_delta).sqrt();
            for (o, &v) in o.iter_mut().zip(xs) {
                let v = v.to_f64();
                let s = sigmoid(w2[c] * (v - mean) * inv + b2[c]);
                *o = T::from_f64(s * v);
            }
        });
    Ok(Tensor::from_parts(d, out))
}

/// Output channels before the final shuffle.
pub fn sa_pre_shuffle<T: Element>(
    x: &Tensor<T>,
    cfg: &SAConfig,
    wts: &SAWeights,
) -> Result<Tensor<T>> {
    let half = cfg.half_width(x.dims().c)?;
    wts.check(half)?;
    let halves = sa_split(x, cfg)?;
    let processed: Vec<(Tensor<T>, Tensor<T>)> = halves
        .par_iter()
        .map(|(xc, xs)| {
            Ok((
                sa_channel_branch(xc, &wts.w1, &wts.b1)?,
                sa_spatial_branch(xs, &wts.w2, &wts.b2, cfg.gn_delta)?,
            ))
        })
        .collect::<Result<_>>()?;
    let parts: Vec<&Tensor<T>> = processed.iter().flat_map(|(a, b)| [a, b]).collect();
    Tensor::concat_channels(&parts)
}

pub fn sa_forward<T: Element>(x: &Tensor<T>, cfg: &SAConfig, wts: &SAWeights) -> Result<Tensor<T>> {
    channel_shuffle(&sa_pre_shuffle(x, cfg, wts)?, cfg.shuffle_groups)
}

/// Input channel (equivalently pre-shuffle channel) feeding each output channel.
pub fn sa_source_channels(channels: usize, cfg: &SAConfig) -> Result<Vec<usize>> {
    cfg.half_width(channels)?;
    shuffle_permutation(channels, cfg.shuffle_groups)
}

/// Gradients of `L = <upstream, sa_forward(x)>` with respect to `x` and the
/// four parameter vectors.
pub fn sa_backward<T: Element>(
    x: &Tensor<T>,
    cfg: &SAConfig,
    wts: &SAWeights,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, SAWeights)> {
    let d = x.dims();
    let half = cfg.half_width(d.c)?;
    wts.check(half)?;
    upstream.expect_dims(d, "sa_backward upstream")?;
    let g = channel_shuffle_backward(upstream, cfg.shuffle_groups)?;
    let mut dx = vec![T::default(); x.numel()];
    let mut grads = SAWeights::zeros(half);
    let p = d.plane();
    // Gradients accumulate in (sample, channel) order for a fixed summation order.
    for n in 0..d.n {
        for c in 0..d.c {
            let xs = x.plane(n, c);
            let gs = g.plane(n, c);
            let local = c % (2 * half);
            let out = &mut dx[(n * d.c + c) * p..(n * d.c + c + 1) * p];
            if local < half {
                channel_gate_backward(
                    xs,
                    gs,
                    wts.w1[local],
                    wts.b1[local],
                    out,
                    &mut grads.w1[local],
                    &mut grads.b1[local],
                );
            } else {
                let j = local - half;
                spatial_gate_backward(
                    xs,
                    gs,
                    wts.w2[j],
                    wts.b2[j],
                    cfg.gn_delta,
                    out,
                    &mut grads.w2[j],
                    &mut grads.b2[j],
                );
            }
        }
    }
    Ok((Tensor::from_parts(d, dx), grads))
}

fn channel_gate_backward<T: Element>(
    xs: &[T],
    gs: &[T],
    w: f64,
    b: f64,
    out: &mut [T],
    dw: &mut f64,
    db: &mut f64,
) {
    let p = xs.len() as f64;
    let mean = ops_sum64(xs) / p;
    let s = sigmoid(w * mean + b);
    let ux: f64 = xs
        .iter()
        .zip(gs)
        .map(|(&x, &g)| x.to_f64() * g.to_f64())
        .sum();
    let dpre = ux * s * (1.0 - s);
    for (o, &g) in out.iter_mut().zip(gs) {
        *o = T::from_f64(g.to_f64() * s + dpre * w / p);
    }
    *dw += dpre * mean;
    *db += dpre;
}

#[allow(clippy::too_many_arguments)]
fn spatial_gate_backward<T: Element>(
    xs: &[T],
    gs: &[T],
    w: f64,
    b: f64,
    delta: f64,
    out: &mut [T],
    dw: &mut f64,
    db: &mut f64,
) {
    let (mean, var) = ops_mean_var(xs);
    let inv = 1.0 / (var + delta).sqrt();
    let mut through_norm = Vec::with_capacity(xs.len());
    let mut direct = Vec::with_capacity(xs.len());
    for (&x, &g) in xs.iter().zip(gs) {
        let (x, g) = (x.to_f64(), g.to_f64());
        let nrm = (x - mean) * inv;
        let s = sigmoid(w * nrm + b);
        let dpre = g * x * s * (1.0 - s);
        *dw += dpre * nrm;
        *db += dpre;
        through_norm.push(dpre * w);
        direct.push(g * s);
    }
    let dnorm = crate::tensor::ops_norm_backward(xs, &through_norm, delta);
    for ((o, a), b) in out.iter_mut().zip(direct).zip(dnorm) {
        *o = T::from_f64(a + b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, normal_vec, seeded};
    use crate::tensor::{Dims, Tensor64};

    #[test]
    fn split_layout() {
        let x = Tensor64::from_fn([1, 8, 1, 1], |_, c, _, _| c as f64).unwrap();
        let parts = sa_split(&x, &SAConfig::new(2)).unwrap();
        let ch: Vec<(Vec<f64>, Vec<f64>)> = parts
            .iter()
            .map(|(a, b)| (a.data().to_vec(), b.data().to_vec()))
            .collect();
        assert_eq!(
            ch,
            vec![
                (vec![0.0, 1.0], vec![2.0, 3.0]),
                (vec![4.0, 5.0], vec![6.0, 7.0])
            ]
        );

        let x = Tensor64::from_fn([1, 2, 1, 1], |_, c, _, _| c as f64).unwrap();
        let parts = sa_split(&x, &SAConfig::new(1)).unwrap();
        assert_eq!(parts[0].0.data(), &[0.0]);
        assert_eq!(parts[0].1.data(), &[1.0]);

        assert!(matches!(
            sa_split(&x, &SAConfig::new(2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_reassembles() {
        let mut rng = seeded(1);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(2, 12, 3, 2));
        let parts = sa_split(&x, &SAConfig::new(3)).unwrap();
        let refs: Vec<&Tensor64> = parts.iter().flat_map(|(a, b)| [a, b]).collect();
        assert_eq!(Tensor::concat_channels(&refs).unwrap(), x);
    }

    #[test]
    fn channel_branch_examples() {
        let z = Tensor64::zeros([1, 1, 2, 2]).unwrap();
        assert!(sa_channel_branch(&z, &[3.0], &[0.0])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let ones = Tensor64::full([1, 1, 2, 2], 1.0).unwrap();
        let y = sa_channel_branch(&ones, &[1.0], &[0.0]).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.731059).abs() < 1e-6));
        let mut rng = seeded(2);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 1, 3, 3));
        let y = sa_channel_branch(&x, &[0.0], &[20.0]).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);
        assert!(sa_channel_branch(&x, &[0.0, 1.0], &[20.0]).is_err());
    }

    #[test]
    fn spatial_branch_examples() {
        let x = Tensor64::full([1, 1, 2, 2], 4.0).unwrap();
        let y = sa_spatial_branch(&x, &[1.0], &[0.0], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let y = sa_spatial_branch(&x, &[1.0], &[0.7], 1e-5).unwrap();
        assert!(y
            .data()
            .iter()
            .all(|&v| (v - sigmoid(0.7) * 4.0).abs() < 1e-12));

        let x = Tensor64::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = sa_spatial_branch(&x, &[1.0], &[0.0], 1e-5).unwrap();
        assert!((y.data()[0] - 0.268943).abs() < 1e-5);
        assert!((y.data()[1] - 2.193171).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_halve_input() {
        let mut rng = seeded(8);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(2, 8, 3, 3));
        let cfg = SAConfig::new(2).with_shuffle_groups(1);
        let y = sa_forward(&x, &cfg, &SAWeights::zeros(2)).unwrap();
        assert_eq!(y, x.scale(0.5));
        let z = Tensor64::zeros([1, 8, 2, 2]).unwrap();
        let w = SAWeights {
            w1: normal_vec(&mut rng, 2),
            b1: normal_vec(&mut rng, 2),
            w2: normal_vec(&mut rng, 2),
            b2: normal_vec(&mut rng, 2),
        };
        assert!(sa_forward(&z, &SAConfig::new(2), &w)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn forward_equals_hand_composition() {
        let mut rng = seeded(9);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 8, 4, 4));
        let cfg = SAConfig::new(2).with_shuffle_groups(2);
        let w = SAWeights {
            w1: normal_vec(&mut rng, 2),
            b1: normal_vec(&mut rng, 2),
            w2: normal_vec(&mut rng, 2),
            b2: normal_vec(&mut rng, 2),
        };
        let a0 = sa_channel_branch(&x.narrow_channels(0, 2).unwrap(), &w.w1, &w.b1).unwrap();
        let s0 = sa_spatial_branch(
            &x.narrow_channels(2, 2).unwrap(),
            &w.w2,
            &w.b2,
            cfg.gn_delta,
        )
        .unwrap();
        let a1 = sa_channel_branch(&x.narrow_channels(4, 2).unwrap(), &w.w1, &w.b1).unwrap();
        let s1 = sa_spatial_branch(
            &x.narrow_channels(6, 2).unwrap(),
            &w.w2,
            &w.b2,
            cfg.gn_delta,
        )
        .unwrap();
        let cat = Tensor::concat_channels(&[&a0, &s0, &a1, &s1]).unwrap();
        let expected = channel_shuffle(&cat, 2).unwrap();
        assert_eq!(sa_forward(&x, &cfg, &w).unwrap(), expected);
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = seeded(10);
        let x: Tensor64 = normal_tensor(&mut rng, Dims::new(1, 4, 3, 3));
        let cfg = SAConfig::new(1);
        let (dx, dw) = sa_backward(
            &x,
            &cfg,
            &SAWeights::default_for(2),
            &Tensor64::zeros([1, 4, 3, 3]).unwrap(),
        )
        .unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert_eq!(dw, SAWeights::zeros(2));
    }

    #[test]
    fn weights_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let w = SAWeights {
            w1: vec![1.5, -2.0],
            b1: vec![0.25, 0.0],
            w2: vec![1.0, 1.0],
            b2: vec![-0.5, 3.0],
        };
        w.save_dir(dir.path()).unwrap();
        assert_eq!(SAWeights::load_dir(dir.path()).unwrap(), w);
        assert!(w.check(3).is_err());
    }
}
