//! Dense NCHW `f32` tensors and the primitive operations every network block
//! is composed from.
//!
//! A tensor may also be *symbolic*: it carries a shape but no data. Every
//! operation accepts symbolic inputs, propagates shapes, and still reports
//! multiply-accumulates to the active [`crate::profile`] context, so a full
//! forward pass can be costed without doing the arithmetic.

mod conv;
mod norm;
mod resample;
mod sobel;

use std::fmt;

pub use conv::{conv2d, ConvLayer};
pub use norm::{group_norm, GroupNorm};
pub use resample::{resample, Resample};
pub use sobel::sobel_grad;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    symbolic: bool,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        check_dims("Tensor::new", shape)?;
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for {shape}", shape.numel()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            symbolic: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            symbolic: false,
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            symbolic: false,
        }
    }

    /// A shape-only tensor used for costing a forward pass.
    pub fn symbolic(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Vec::new(),
            symbolic: true,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn is_symbolic(&self) -> bool {
        self.symbolic
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `h*w` slice for one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous `c*h*w` slice for one sample.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shapes("reshape", self.shape, shape));
        }
        Ok(Tensor { shape, ..self })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_shape("max_abs_diff", other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shapes(op, shape, self.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        if self.symbolic {
            return self.clone();
        }
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            symbolic: false,
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        other.expect_shape(op, self.shape)?;
        if self.symbolic || other.symbolic {
            return Ok(Tensor::symbolic(self.shape));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            symbolic: false,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Multiplies every `(n, c)` plane by `scales[(n, c)]`; `scales` has shape `n x c x 1 x 1`.
    pub fn mul_channels(&self, scales: &Tensor) -> Result<Tensor> {
        let want = Shape::new(self.shape.n, self.shape.c, 1, 1);
        scales.expect_shape("mul_channels", want)?;
        if self.symbolic || scales.symbolic {
            return Ok(Tensor::symbolic(self.shape));
        }
        let p = self.shape.plane();
        let mut out = self.data.clone();
        for (chunk, &s) in out.chunks_mut(p).zip(&scales.data) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Tensor::new(self.shape, out)
    }

    /// Multiplies sample `n` by `scalars[n]`; `scalars` has shape `n x 1 x 1 x 1`.
    pub fn mul_samples(&self, scalars: &Tensor) -> Result<Tensor> {
        scalars.expect_shape("mul_samples", Shape::new(self.shape.n, 1, 1, 1))?;
        if self.symbolic || scalars.symbolic {
            return Ok(Tensor::symbolic(self.shape));
        }
        let per = self.shape.numel() / self.shape.n;
        let mut out = self.data.clone();
        for (chunk, &s) in out.chunks_mut(per).zip(&scalars.data) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Tensor::new(self.shape, out)
    }

    /// Multiplies every channel by a per-sample spatial map of shape `n x 1 x h x w`.
    pub fn mul_plane(&self, plane: &Tensor) -> Result<Tensor> {
        let want = self.shape.with_c(1);
        plane.expect_shape("mul_plane", want)?;
        if self.symbolic || plane.symbolic {
            return Ok(Tensor::symbolic(self.shape));
        }
        let p = self.shape.plane();
        let mut out = self.data.clone();
        for n in 0..self.shape.n {
            let gate = plane.plane(n, 0);
            for c in 0..self.shape.c {
                let start = (n * self.shape.c + c) * p;
                out[start..start + p].iter_mut().zip(gate).for_each(|(v, &g)| *v *= g);
            }
        }
        Tensor::new(self.shape, out)
    }

    /// Mean over channels, producing `n x 1 x h x w`.
    pub fn channel_mean(&self) -> Tensor {
        let shape = self.shape.with_c(1);
        if self.symbolic {
            return Tensor::symbolic(shape);
        }
        let p = self.shape.plane();
        let mut out = vec![0.0f32; self.shape.n * p];
        for n in 0..self.shape.n {
            let dst = &mut out[n * p..(n + 1) * p];
            for c in 0..self.shape.c {
                dst.iter_mut().zip(self.plane(n, c)).for_each(|(d, &v)| *d += v);
            }
            let inv = 1.0 / self.shape.c as f32;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Tensor {
            shape,
            data: out,
            symbolic: false,
        }
    }

    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
        let base = first.shape;
        let mut c_total = 0;
        for t in parts {
            let s = t.shape;
            if s.n != base.n || s.h != base.h || s.w != base.w {
                return Err(Error::shapes("concat_channels", base.with_c(s.c), s));
            }
            c_total += s.c;
        }
        let shape = base.with_c(c_total);
        if parts.iter().any(|t| t.symbolic) {
            return Ok(Tensor::symbolic(shape));
        }
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for t in parts {
                data.extend_from_slice(t.sample(n));
            }
        }
        Tensor::new(shape, data)
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape.c {
            return Err(Error::contract(
                "narrow_channels",
                format!("range {start}..{} outside {} channels", start + len, self.shape.c),
            ));
        }
        let shape = self.shape.with_c(len);
        if self.symbolic {
            return Ok(Tensor::symbolic(shape));
        }
        let p = self.shape.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            let s = self.sample(n);
            data.extend_from_slice(&s[start * p..(start + len) * p]);
        }
        Tensor::new(shape, data)
    }

    /// Splits the channel axis into two equal halves.
    pub fn split_halves(&self) -> Result<(Tensor, Tensor)> {
        if self.shape.c % 2 != 0 {
            return Err(Error::contract(
                "split_halves",
                format!("odd channel count {} cannot be split evenly", self.shape.c),
            ));
        }
        let half = self.shape.c / 2;
        Ok((self.narrow_channels(0, half)?, self.narrow_channels(half, half)?))
    }

    /// Selects one sample of the batch as a batch of one.
    pub fn select_sample(&self, n: usize) -> Result<Tensor> {
        if n >= self.shape.n {
            return Err(Error::contract(
                "select_sample",
                format!("sample {n} of {}", self.shape.n),
            ));
        }
        let shape = Shape { n: 1, ..self.shape };
        if self.symbolic {
            return Ok(Tensor::symbolic(shape));
        }
        Tensor::new(shape, self.sample(n).to_vec())
    }

    pub fn stack_samples(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("stack_samples", "no inputs"))?;
        let mut data = Vec::new();
        for s in samples {
            s.expect_shape("stack_samples", first.shape)?;
            data.extend_from_slice(&s.data);
        }
        Tensor::new(
            Shape {
                n: samples.len() * first.shape.n,
                ..first.shape
            },
            data,
        )
    }
}

/// Logistic function, rounded toward the open unit interval: where the
/// nearest `f32` would be exactly 0 or 1 the result stays one step inside.
#[inline]
pub fn sigmoid(v: f32) -> f32 {
    let s = 1.0 / (1.0 + (-v).exp());
    s.clamp(f32::from_bits(1), 1.0 - f32::EPSILON / 2.0)
}

pub(crate) fn check_dims(op: &'static str, shape: Shape) -> Result<()> {
    if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
        return Err(Error::contract(op, format!("all dimensions must be >= 1, got {shape}")));
    }
    Ok(())
}
