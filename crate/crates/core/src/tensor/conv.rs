use rayon::prelude::*;

use super::{check_dims, Shape, Tensor};
use crate::error::{Error, Result};
use crate::profile;

/// A 2D convolution with weights laid out `out_ch x in_ch/groups x kh x kw`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvLayer {
    /// Zero-initialized square-kernel convolution, stride 1, no padding, no bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            weight: vec![0.0; out_ch * in_ch * k * k],
            bias: None,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Self {
        Self::new(in_ch, out_ch, 1)
    }

    /// `k x k` depthwise convolution with "same" padding.
    pub fn depthwise(ch: usize, k: usize) -> Self {
        Self::new(ch, ch, k).with_groups(ch).with_padding(k / 2)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self.weight = vec![0.0; self.weight_len()];
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = Some(vec![0.0; self.out_ch]);
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.in_ch == self.out_ch
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_per_group(), self.kh, self.kw]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        ((o * self.in_per_group() + i) * self.kh + y) * self.kw + x
    }

    pub fn param_count(&self) -> u64 {
        (self.weight_len() + self.bias.as_ref().map_or(0, Vec::len)) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let op = "conv2d";
        if self.in_ch == 0 || self.out_ch == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::contract(op, "channels and kernel dims must be >= 1"));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::contract(op, "stride, dilation and groups must be >= 1"));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::contract(
                op,
                format!(
                    "in_ch {} and out_ch {} must both be divisible by groups {}",
                    self.in_ch, self.out_ch, self.groups
                ),
            ));
        }
        if self.weight.len() != self.weight_len() {
            return Err(Error::shape(
                op,
                format!("weight {:?}", self.weight_shape()),
                format!("{} weights", self.weight.len()),
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_ch {
                return Err(Error::shape(op, format!("bias of {}", self.out_ch), b.len()));
            }
        }
        Ok(())
    }

    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let axis = |len: usize, k: usize| {
            let span = self.dilation * (k - 1) + 1;
            let padded = len + 2 * self.padding;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        Some((axis(h, self.kh)?, axis(w, self.kw)?))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_ch {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "{}x{}x{}x{} (layer in_ch {})",
                    input.n, self.in_ch, input.h, input.w, self.in_ch
                ),
                input,
            ));
        }
        let (h, w) = self.output_hw(input.h, input.w).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "spatial dims covering a {}x{} kernel (dilation {}, padding {})",
                    self.kh, self.kw, self.dilation, self.padding
                ),
                input,
            )
        })?;
        Ok(Shape::new(input.n, self.out_ch, h, w))
    }

    /// Closed-form multiply-accumulate count for one application at `input`.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok((out.n * self.out_ch * self.in_per_group() * self.kh * self.kw * out.h * out.w) as u64)
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }
}

/// Applies `layer` to `x`, recording its MACs with the active profiler frame.
pub fn conv2d(x: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    layer.validate()?;
    check_dims("conv2d", x.shape())?;
    let out_shape = layer.output_shape(x.shape())?;
    profile::record_macs(layer.macs(x.shape())?);
    if x.is_symbolic() {
        return Ok(Tensor::symbolic(out_shape));
    }
    if profile::instrumented() {
        let (y, n) = crate::reference::conv2d_counting(x, layer);
        profile::record_multiplies(n);
        return Ok(y);
    }
    let data = if layer.is_plain_pointwise() {
        pointwise_gemm(x, layer, out_shape)
    } else {
        direct(x, layer, out_shape)
    };
    Tensor::new(out_shape, data)
}

fn fill_bias(out: &mut [f32], layer: &ConvLayer, plane: usize) {
    match &layer.bias {
        Some(b) => out
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| chunk.fill(b[i % layer.out_ch])),
        None => out.fill(0.0),
    }
}

fn pointwise_gemm(x: &Tensor, layer: &ConvLayer, out_shape: Shape) -> Vec<f32> {
    let plane = out_shape.plane();
    let mut out = vec![0.0f32; out_shape.numel()];
    fill_bias(&mut out, layer, plane);
    let (m, k, n) = (layer.out_ch, layer.in_ch, plane);
    for (s, dst) in out.chunks_mut(m * n).enumerate() {
        let src = x.sample(s);
        // SAFETY: `weight` is m*k, `src` is k*n and `dst` is m*n, all row-major and
        // non-overlapping; strides below describe exactly those layouts.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                layer.weight.as_ptr(),
                k as isize,
                1,
                src.as_ptr(),
                n as isize,
                1,
                1.0,
                dst.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

fn direct(x: &Tensor, layer: &ConvLayer, out_shape: Shape) -> Vec<f32> {
    let in_shape = x.shape();
    let out_plane = out_shape.plane();
    let (ho, wo) = (out_shape.h, out_shape.w);
    let (hi, wi) = (in_shape.h as isize, in_shape.w as isize);
    let icpg = layer.in_per_group();
    let ocpg = layer.out_ch / layer.groups;
    let (s, d, p) = (layer.stride, layer.dilation as isize, layer.padding as isize);

    // Output columns `ow` whose input column `ow*s + off` lands inside the image.
    let col_range = |off: isize| -> (usize, usize) {
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let hi_excl = if wi - off <= 0 {
            0
        } else {
            (((wi - off - 1) as usize) / s + 1).min(wo)
        };
        (lo, hi_excl.max(lo))
    };

    let mut out = vec![0.0f32; out_shape.numel()];
    fill_bias(&mut out, layer, out_plane);
    out.par_chunks_mut(out_plane)
        .with_min_len(4)
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / layer.out_ch;
            let oc = idx % layer.out_ch;
            let g = oc / ocpg;
            for icg in 0..icpg {
                let src = x.plane(n, g * icpg + icg);
                for ky in 0..layer.kh {
                    for kx in 0..layer.kw {
                        let wv = layer.weight[layer.weight_index(oc, icg, ky, kx)];
                        let col_off = kx as isize * d - p;
                        let (c0, c1) = col_range(col_off);
                        if c0 >= c1 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize * d - p;
                            if iy < 0 || iy >= hi {
                                continue;
                            }
                            let row = &src[iy as usize * wi as usize..(iy as usize + 1) * wi as usize];
                            let out_row = &mut dst[oy * wo + c0..oy * wo + c1];
                            let start = (c0 * s) as isize + col_off;
                            if s == 1 {
                                let row = &row[start as usize..start as usize + (c1 - c0)];
                                out_row.iter_mut().zip(row).for_each(|(o, &v)| *o += wv * v);
                            } else {
                                out_row
                                    .iter_mut()
                                    .zip(row[start as usize..].iter().step_by(s))
                                    .for_each(|(o, &v)| *o += wv * v);
                            }
                        }
                    }
                }
            }
        });
    out
}
