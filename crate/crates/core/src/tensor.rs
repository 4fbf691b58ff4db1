//! Dense 4-D tensors in channel-major `[C, N, H, W]` layout.
//!
//! Channel-major storage makes every per-channel plane of the whole batch
//! contiguous: a 1×1 convolution over a batch is a single GEMM, batch
//! normalisation statistics are contiguous reductions, and channel
//! concatenation is plain buffer appending.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tensor extent `[channels, batch, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self([c, n, h, w])
    }

    pub fn c(&self) -> usize {
        self.0[0]
    }
    pub fn n(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Elements per channel across the whole batch.
    pub fn plane(&self) -> usize {
        self.n() * self.h() * self.w()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_c(self, c: usize) -> Self {
        Self([c, self.n(), self.h(), self.w()])
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.c(), self.n(), self.h(), self.w())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![S::zero(); shape.numel()] }
    }

    pub fn full(shape: Shape, v: S) -> Self {
        Self { shape, data: vec![v; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "tensor {} needs {} values, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 helper stored as `[len, 1, 1, 1]`.
    pub fn vector(data: Vec<S>) -> Self {
        Self { shape: Shape::new(data.len(), 1, 1, 1), data }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: Shape::new(1, 1, 1, 1), data: vec![v] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a `[1,1,1,1]` tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> S {
        self.data[self.index(c, n, y, x)]
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        let [_, nn, h, w] = self.shape.0;
        ((c * nn + n) * h + y) * w + x
    }

    /// Channel `c` across the whole batch.
    pub fn channel(&self, c: usize) -> &[S] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [S] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: S) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?.shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
                return Err(Error::Shape(format!("concat {} with {}", first, s)));
            }
            c += s.c();
        }
        let mut data = Vec::with_capacity(c * first.plane());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: first.with_c(c), data })
    }

    /// Select samples `idx` of the batch.
    pub fn gather_batch(&self, idx: &[usize]) -> Self {
        let [c, _, h, w] = self.shape.0;
        let hw = h * w;
        let mut data = Vec::with_capacity(c * idx.len() * hw);
        for ch in 0..c {
            for &n in idx {
                let start = self.index(ch, n, 0, 0);
                data.extend_from_slice(&self.data[start..start + hw]);
            }
        }
        Self { shape: Shape::new(c, idx.len(), h, w), data }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor<S>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?.shape;
        let [c, _, h, w] = first.0;
        let hw = h * w;
        let mut n_total = 0;
        for it in items {
            let s = it.shape;
            if s.c() != c || s.h() != h || s.w() != w {
                return Err(Error::Shape(format!("cannot stack {} with {}", first, s)));
            }
            n_total += s.n();
        }
        let mut data = Vec::with_capacity(c * n_total * hw);
        for ch in 0..c {
            for it in items {
                data.extend_from_slice(it.channel(ch));
            }
        }
        Ok(Self { shape: Shape::new(c, n_total, h, w), data })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, v| m.max(v))
    }
}
