//! Rank-4 NCHW tensors and the primitive operators built on them.

mod io;
mod ops;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_tensor, read_array, read_tensor, read_tensor_json, save_tensor, tensor_from_json,
    tensor_to_json, write_array, write_atomic, write_tensor, write_tensor_json, RawArray,
    BST_MAGIC, BST_VERSION, DTYPE_F32_LE,
};
pub use ops::{
    channel_shuffle, channel_shuffle_backward, global_avg_pool, global_avg_pool_backward,
    group_norm, group_norm_backward, pointwise_conv, pointwise_conv_backward, resample,
    resample_backward, shuffle_permutation, sigmoid, sigmoid_map, silu, silu_map, Conv1x1,
    ConvGrads, Resample,
};
pub(crate) use ops::{
    mean_var as ops_mean_var, norm_backward as ops_norm_backward, sum64 as ops_sum64,
};

/// Storage element of a tensor. All arithmetic goes through `f64`.
pub trait Element: Copy + Default + PartialEq + Send + Sync + fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Tensor dimensions `(n, c, h, w)`. Serialized as `[n, c, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(sample, channel)` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn planes(&self) -> usize {
        self.n * self.c
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Shape(format!("all dims must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

impl From<Dims> for [usize; 4] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW tensor, width fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    dims: Dims,
    data: Vec<T>,
}

/// 64-bit tensor used by the backward passes and gradient checks.
pub type Tensor64 = Tensor<f64>;

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: impl Into<Dims>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        dims.check()?;
        if data.len() != dims.numel() {
            return Err(Error::Shape(format!(
                "dims {dims} need {} values, got {}",
                dims.numel(),
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: impl Into<Dims>, value: T) -> Result<Self> {
        let dims = dims.into();
        dims.check()?;
        Ok(Tensor {
            dims,
            data: vec![value; dims.numel()],
        })
    }

    pub fn zeros(dims: impl Into<Dims>) -> Result<Self> {
        Self::full(dims, T::from_f64(0.0))
    }

    /// Builds a tensor from `f(n, c, h, w)`.
    pub fn from_fn(
        dims: impl Into<Dims>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        let dims = dims.into();
        dims.check()?;
        let mut data = Vec::with_capacity(dims.numel());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Ok(Tensor { dims, data })
    }

    /// Wraps data already known to match `dims`.
    pub(crate) fn from_parts(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.numel(), data.len());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let d = self.dims;
        ((n * d.c + c) * d.h + h) * d.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(f(v.to_f64())))
                .collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_dims(other.dims, "zip_map")?;
        Ok(Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| T::from_f64(f(a.to_f64(), b.to_f64())))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| k * v)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Sum of elementwise products, accumulated in index order.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_dims(other.dims, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a.to_f64() * b.to_f64()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_dims(other.dims, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn expect_dims(&self, dims: Dims, what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!(
                "{what}: expected dims {dims}, got {}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Channels `start..start + len` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let d = self.dims;
        if len == 0 || start + len > d.c {
            return Err(Error::Shape(format!(
                "channel range {start}..{} out of bounds for {d}",
                start + len
            )));
        }
        let p = d.plane();
        let mut data = Vec::with_capacity(d.n * len * p);
        for n in 0..d.n {
            let base = (n * d.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor::from_parts(d.with_c(len), data))
    }

    /// Concatenates along the channel axis; all parts must agree on n, h, w.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let d0 = first.dims;
        for p in parts {
            let d = p.dims;
            if d.n != d0.n || d.h != d0.h || d.w != d0.w {
                return Err(Error::Shape(format!(
                    "concat_channels: {d} incompatible with {d0}"
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.dims.c).sum();
        let plane = d0.plane();
        let mut data = Vec::with_capacity(d0.n * c * plane);
        for n in 0..d0.n {
            for p in parts {
                let chunk = p.dims.c * plane;
                data.extend_from_slice(&p.data[n * chunk..(n + 1) * chunk]);
            }
        }
        Ok(Tensor::from_parts(d0.with_c(c), data))
    }
}
