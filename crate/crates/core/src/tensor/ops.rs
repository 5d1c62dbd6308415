use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dims, Element, Tensor};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn sigmoid_map<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

pub fn silu_map<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu)
}

/// Sequential 64-bit sum; the one reduction order used everywhere.
#[inline]
pub(crate) fn sum64<T: Element>(xs: &[T]) -> f64 {
    xs.iter().fold(0.0, |acc, &v| acc + v.to_f64())
}

/// Mean and biased variance of a slice, two-pass.
#[inline]
pub(crate) fn mean_var<T: Element>(xs: &[T]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = sum64(xs) / m;
    let var = xs.iter().fold(0.0, |acc, &v| {
        let d = v.to_f64() - mean;
        acc + d * d
    }) / m;
    (mean, var)
}

/// Spatial mean per `(sample, channel)` plane → `[N, C, 1, 1]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let p = d.plane();
    let data: Vec<T> = x
        .data()
        .par_chunks(p)
        .map(|plane| T::from_f64(sum64(plane) / p as f64))
        .collect();
    Tensor::from_parts(Dims::new(d.n, d.c, 1, 1), data)
}

/// Spreads a `[N, C, 1, 1]` upstream uniformly over each plane of `dims`.
pub fn global_avg_pool_backward<T: Element>(dims: Dims, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_dims(Dims::new(dims.n, dims.c, 1, 1), "global_avg_pool_backward")?;
    let p = dims.plane();
    let mut out = vec![T::default(); dims.numel()];
    out.par_chunks_mut(p)
        .zip(upstream.data().par_iter())
        .for_each(|(plane, &g)| {
            let v = T::from_f64(g.to_f64() / p as f64);
            plane.iter_mut().for_each(|o| *o = v);
        });
    Ok(Tensor::from_parts(dims, out))
}

fn check_groups(c: usize, groups: usize, what: &str) -> Result<()> {
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "{what}: groups={groups} must divide channel count {c}"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::Config(format!(
            "group_norm delta must be finite and >= 0, got {delta}"
        )));
    }
    Ok(())
}

/// Group normalization without affine terms, biased variance.
pub fn group_norm<T: Element>(x: &Tensor<T>, groups: usize, delta: f64) -> Result<Tensor<T>> {
    let d = x.dims();
    check_groups(d.c, groups, "group_norm")?;
    check_delta(delta)?;
    let chunk = d.c / groups * d.plane();
    let mut out = vec![T::default(); d.numel()];
    out.par_chunks_mut(chunk)
        .zip(x.data().par_chunks(chunk))
        .for_each(|(o, xs)| {
            let (mean, var) = mean_var(xs);
            let inv = 1.0 / (var + delta).sqrt();
            for (o, &v) in o.iter_mut().zip(xs) {
                *o = T::from_f64((v.to_f64() - mean) * inv);
            }
        });
    if delta == 0.0 && out.iter().any(|v| !v.to_f64().is_finite()) {
        return Err(Error::Degenerate(
            "group_norm with delta=0 on a zero-variance group".into(),
        ));
    }
    Ok(Tensor::from_parts(d, out))
}

/// Input gradient of [`group_norm`] given the upstream gradient.
pub fn group_norm_backward<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    delta: f64,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = x.dims();
    check_groups(d.c, groups, "group_norm_backward")?;
    check_delta(delta)?;
    upstream.expect_dims(d, "group_norm_backward upstream")?;
    let chunk = d.c / groups * d.plane();
    let mut out = vec![T::default(); d.numel()];
    out.par_chunks_mut(chunk)
        .zip(
            x.data()
                .par_chunks(chunk)
                .zip(upstream.data().par_chunks(chunk)),
        )
        .for_each(|(o, (xs, gs))| {
            let grads: Vec<f64> = gs.iter().map(|g| g.to_f64()).collect();
            let dx = norm_backward(xs, &grads, delta);
            for (o, v) in o.iter_mut().zip(dx) {
                *o = T::from_f64(v);
            }
        });
    Ok(Tensor::from_parts(d, out))
}

/// Gradient of `n = (x - mean) / sqrt(var + delta)` over one normalization
/// extent: `dx = inv * (g - mean(g) - n * mean(g * n))`.
pub(crate) fn norm_backward<T: Element>(xs: &[T], grads: &[f64], delta: f64) -> Vec<f64> {
    let m = xs.len() as f64;
    let (mean, var) = mean_var(xs);
    let inv = 1.0 / (var + delta).sqrt();
    let normed: Vec<f64> = xs.iter().map(|&v| (v.to_f64() - mean) * inv).collect();
    let g_mean = grads.iter().sum::<f64>() / m;
    let gn_mean = grads.iter().zip(&normed).map(|(g, n)| g * n).sum::<f64>() / m;
    grads
        .iter()
        .zip(&normed)
        .map(|(g, n)| inv * (g - g_mean - n * gn_mean))
        .collect()
}

/// `perm[j]` is the input channel that lands at output channel `j` after
/// viewing C as `(groups, C/groups)`, transposing and flattening.
pub fn shuffle_permutation(c: usize, groups: usize) -> Result<Vec<usize>> {
    check_groups(c, groups, "channel_shuffle")?;
    let per = c / groups;
    Ok((0..c).map(|j| (j % groups) * per + j / groups).collect())
}

fn permute_channels<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let d = x.dims();
    let p = d.plane();
    let mut out = vec![T::default(); d.numel()];
    out.par_chunks_mut(p).enumerate().for_each(|(i, plane)| {
        let (n, c) = (i / d.c, i % d.c);
        plane.copy_from_slice(x.plane(n, perm[c]));
    });
    Tensor::from_parts(d, out)
}

pub fn channel_shuffle<T: Element>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let perm = shuffle_permutation(x.dims().c, groups)?;
    Ok(permute_channels(x, &perm))
}

/// Routes an upstream gradient back through [`channel_shuffle`].
pub fn channel_shuffle_backward<T: Element>(
    upstream: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let perm = shuffle_permutation(upstream.dims().c, groups)?;
    let mut inverse = vec![0; perm.len()];
    for (j, &src) in perm.iter().enumerate() {
        inverse[src] = j;
    }
    Ok(permute_channels(upstream, &inverse))
}

/// Spatial resampling along a fusion edge.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    #[default]
    None,
    /// Nearest-neighbour ×2.
    Up2,
    /// 2×2 max-pool, stride 2.
    Down2,
}

impl Resample {
    pub fn output_dims(self, d: Dims) -> Result<Dims> {
        match self {
            Resample::None => Ok(d),
            Resample::Up2 => Ok(Dims::new(d.n, d.c, d.h * 2, d.w * 2)),
            Resample::Down2 => {
                if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
                    return Err(Error::Shape(format!("down2 needs even H and W, got {d}")));
                }
                Ok(Dims::new(d.n, d.c, d.h / 2, d.w / 2))
            }
        }
    }

    /// Single resample equivalent to applying `self` then `next`, if one exists.
    pub fn then(self, next: Resample) -> Option<Resample> {
        match (self, next) {
            (Resample::None, r) | (r, Resample::None) => Some(r),
            (Resample::Up2, Resample::Down2) => Some(Resample::None),
            _ => None,
        }
    }
}

pub fn resample<T: Element>(x: &Tensor<T>, mode: Resample) -> Result<Tensor<T>> {
    let d = x.dims();
    let od = mode.output_dims(d)?;
    match mode {
        Resample::None => Ok(x.clone()),
        Resample::Up2 => {
            let mut out = vec![T::default(); od.numel()];
            out.par_chunks_mut(od.plane())
                .enumerate()
                .for_each(|(i, plane)| {
                    let src = x.plane(i / d.c, i % d.c);
                    for oh in 0..od.h {
                        for ow in 0..od.w {
                            plane[oh * od.w + ow] = src[(oh / 2) * d.w + ow / 2];
                        }
                    }
                });
            Ok(Tensor::from_parts(od, out))
        }
        Resample::Down2 => {
            let mut out = vec![T::default(); od.numel()];
            out.par_chunks_mut(od.plane())
                .enumerate()
                .for_each(|(i, plane)| {
                    let src = x.plane(i / d.c, i % d.c);
                    for oh in 0..od.h {
                        for ow in 0..od.w {
                            plane[oh * od.w + ow] = src[argmax_2x2(src, d.w, oh, ow)];
                        }
                    }
                });
            Ok(Tensor::from_parts(od, out))
        }
    }
}

/// Index of the first maximum of a 2×2 window, scanned row-major.
fn argmax_2x2<T: Element>(src: &[T], w: usize, oh: usize, ow: usize) -> usize {
    let mut best = (2 * oh) * w + 2 * ow;
    for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
        let i = (2 * oh + dh) * w + 2 * ow + dw;
        if src[i].to_f64() > src[best].to_f64() {
            best = i;
        }
    }
    best
}

/// Input gradient of [`resample`]. Up2 sums each 2×2 block; down2 routes to
/// the first maximum of each window.
pub fn resample_backward<T: Element>(
    x: &Tensor<T>,
    mode: Resample,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = x.dims();
    let od = mode.output_dims(d)?;
    upstream.expect_dims(od, "resample_backward upstream")?;
    let mut out = vec![T::default(); d.numel()];
    match mode {
        Resample::None => return Ok(upstream.clone()),
        Resample::Up2 => out
            .par_chunks_mut(d.plane())
            .enumerate()
            .for_each(|(i, plane)| {
                let g = upstream.plane(i / d.c, i % d.c);
                for h in 0..d.h {
                    for w in 0..d.w {
                        let s = g[(2 * h) * od.w + 2 * w].to_f64()
                            + g[(2 * h) * od.w + 2 * w + 1].to_f64()
                            + g[(2 * h + 1) * od.w + 2 * w].to_f64()
                            + g[(2 * h + 1) * od.w + 2 * w + 1].to_f64();
                        plane[h * d.w + w] = T::from_f64(s);
                    }
                }
            }),
        Resample::Down2 => out
            .par_chunks_mut(d.plane())
            .enumerate()
            .for_each(|(i, plane)| {
                let src = x.plane(i / d.c, i % d.c);
                let g = upstream.plane(i / d.c, i % d.c);
                for oh in 0..od.h {
                    for ow in 0..od.w {
                        plane[argmax_2x2(src, d.w, oh, ow)] = g[oh * od.w + ow];
                    }
                }
            }),
    }
    Ok(Tensor::from_parts(d, out))
}

/// 1×1 convolution parameters: row-major `out × in` weight matrix and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1x1 {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients of a [`Conv1x1`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1x1 {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != out_channels * in_channels || bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "conv1x1 {out_channels}x{in_channels}: weight has {} values, bias {}",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Conv1x1 {
            out_channels,
            in_channels,
            weight,
            bias,
        })
    }

    /// Zero-bias conv with ones on the leading diagonal.
    pub fn identity(out_channels: usize, in_channels: usize) -> Self {
        let mut weight = vec![0.0; out_channels * in_channels];
        for i in 0..out_channels.min(in_channels) {
            weight[i * in_channels + i] = 1.0;
        }
        Conv1x1 {
            out_channels,
            in_channels,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight_at(&self, o: usize, i: usize) -> f64 {
        self.weight[o * self.in_channels + i]
    }
}

pub fn pointwise_conv<T: Element>(x: &Tensor<T>, conv: &Conv1x1) -> Result<Tensor<T>> {
    let d = x.dims();
    if conv.in_channels != d.c {
        return Err(Error::Shape(format!(
            "pointwise_conv expects {} input channels, got {}",
            conv.in_channels, d.c
        )));
    }
    let od = d.with_c(conv.out_channels);
    let p = d.plane();
    let mut out = vec![T::default(); od.numel()];
    out.par_chunks_mut(p).enumerate().for_each(|(i, plane)| {
        let (n, o) = (i / od.c, i % od.c);
        for (px, slot) in plane.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ci in 0..d.c {
                acc += conv.weight_at(o, ci) * x.plane(n, ci)[px].to_f64();
            }
            *slot = T::from_f64(acc + conv.bias[o]);
        }
    });
    Ok(Tensor::from_parts(od, out))
}

/// Input and parameter gradients of [`pointwise_conv`].
pub fn pointwise_conv_backward<T: Element>(
    x: &Tensor<T>,
    conv: &Conv1x1,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrads)> {
    let d = x.dims();
    if conv.in_channels != d.c {
        return Err(Error::Shape(format!(
            "pointwise_conv expects {} input channels, got {}",
            conv.in_channels, d.c
        )));
    }
    upstream.expect_dims(
        d.with_c(conv.out_channels),
        "pointwise_conv_backward upstream",
    )?;
    let p = d.plane();
    let mut dx = vec![T::default(); d.numel()];
    dx.par_chunks_mut(p).enumerate().for_each(|(i, plane)| {
        let (n, ci) = (i / d.c, i % d.c);
        for (px, slot) in plane.iter_mut().enumerate() {
            let mut acc = 0.0;
            for o in 0..conv.out_channels {
                acc += conv.weight_at(o, ci) * upstream.plane(n, o)[px].to_f64();
            }
            *slot = T::from_f64(acc);
        }
    });
    let mut weight = vec![0.0; conv.weight.len()];
    let mut bias = vec![0.0; conv.out_channels];
    for o in 0..conv.out_channels {
        for n in 0..d.n {
            let g = upstream.plane(n, o);
            bias[o] += sum64(g);
            for ci in 0..d.c {
                let xs = x.plane(n, ci);
                weight[o * d.c + ci] += g
                    .iter()
                    .zip(xs)
                    .fold(0.0, |acc, (&g, &v)| acc + g.to_f64() * v.to_f64());
            }
        }
    }
    Ok((Tensor::from_parts(d, dx), ConvGrads { weight, bias }))
}
