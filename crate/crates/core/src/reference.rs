//! Deliberately naive reference kernels.
//!
//! These share no code with the optimized paths in [`crate::tensor`]; they
//! exist so that tests and the `selfcheck` battery can compare against an
//! independent computation.

use crate::tensor::{ConvLayer, GroupNorm, Tensor};

/// Nested-loop convolution over an explicitly zero-padded input. Returns the
/// output together with the number of multiplies actually executed.
pub fn conv2d_counting(x: &Tensor, layer: &ConvLayer) -> (Tensor, u64) {
    let s = x.shape();
    let p = layer.padding;
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let mut padded = vec![0.0f64; s.n * s.c * hp * wp];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    padded[((n * s.c + c) * hp + y + p) * wp + xx + p] = x.at(n, c, y, xx) as f64;
                }
            }
        }
    }
    let span_h = layer.dilation * (layer.kh - 1) + 1;
    let span_w = layer.dilation * (layer.kw - 1) + 1;
    let ho = (hp - span_h) / layer.stride + 1;
    let wo = (wp - span_w) / layer.stride + 1;
    let icpg = layer.in_ch / layer.groups;
    let ocpg = layer.out_ch / layer.groups;
    let mut out = Vec::with_capacity(s.n * layer.out_ch * ho * wo);
    let mut multiplies = 0u64;
    for n in 0..s.n {
        for oc in 0..layer.out_ch {
            let g = oc / ocpg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = layer.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
                    for i in 0..icpg {
                        let ic = g * icpg + i;
                        for ky in 0..layer.kh {
                            for kx in 0..layer.kw {
                                let y = oy * layer.stride + ky * layer.dilation;
                                let xx = ox * layer.stride + kx * layer.dilation;
                                let wv = layer.weight[((oc * icpg + i) * layer.kh + ky) * layer.kw + kx];
                                acc += wv as f64 * padded[((n * s.c + ic) * hp + y) * wp + xx];
                                multiplies += 1;
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    let shape = crate::tensor::Shape::new(s.n, layer.out_ch, ho, wo);
    (Tensor::new(shape, out).expect("oracle shape"), multiplies)
}

/// Group norm with statistics from direct double-precision summation.
pub fn group_norm(x: &Tensor, layer: &GroupNorm) -> Tensor {
    let s = x.shape();
    let cpg = s.c / layer.groups;
    let mut out = vec![0.0f32; s.numel()];
    for n in 0..s.n {
        for g in 0..layer.groups {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut count = 0.0f64;
            for c in g * cpg..(g + 1) * cpg {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let v = x.at(n, c, y, xx) as f64;
                        sum += v;
                        sum_sq += v * v;
                        count += 1.0;
                    }
                }
            }
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            for c in g * cpg..(g + 1) * cpg {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let v = x.at(n, c, y, xx) as f64;
                        let z = (v - mean) / (var + layer.eps as f64).sqrt();
                        out[x.index(n, c, y, xx)] = (z * layer.gamma[c] as f64 + layer.beta[c] as f64) as f32;
                    }
                }
            }
        }
    }
    Tensor::new(s, out).expect("oracle shape")
}

/// Sobel magnitude by explicit correlation with the two 3x3 kernels over a
/// replicate-padded copy.
pub fn sobel_grad(x: &Tensor) -> Tensor {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let s = x.shape();
    let mut out = vec![0.0f32; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let padded: Vec<Vec<f64>> = (0..s.h + 2)
                .map(|py| {
                    let y = py.saturating_sub(1).min(s.h - 1);
                    (0..s.w + 2)
                        .map(|px| x.at(n, c, y, px.saturating_sub(1).min(s.w - 1)) as f64)
                        .collect()
                })
                .collect();
            for y in 0..s.h {
                for xx in 0..s.w {
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            gx += KX[ky][kx] * padded[y + ky][xx + kx];
                            gy += KY[ky][kx] * padded[y + ky][xx + kx];
                        }
                    }
                    out[x.index(n, c, y, xx)] = (gx.abs() + gy.abs()) as f32;
                }
            }
        }
    }
    Tensor::new(s, out).expect("oracle shape")
}
