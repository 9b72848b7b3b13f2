use super::{Shape, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Pixel replication to twice the height and width.
    NearestUp2,
    /// Mean of disjoint 2x2 blocks. Odd dimensions replicate the last row/column first.
    MeanDown2,
    /// Depthwise 3x3 binomial blur (replicate border) followed by [`Resample::MeanDown2`].
    BlurThenDown2,
    /// Spatial mean, producing `n x c x 1 x 1`.
    GlobalAvgPool,
}

pub fn resample(x: &Tensor, mode: Resample) -> Result<Tensor> {
    let s = x.shape();
    let out_shape = match mode {
        Resample::NearestUp2 => s.with_hw(s.h * 2, s.w * 2),
        Resample::MeanDown2 | Resample::BlurThenDown2 => s.with_hw(s.h.div_ceil(2), s.w.div_ceil(2)),
        Resample::GlobalAvgPool => s.with_hw(1, 1),
    };
    if x.is_symbolic() {
        return Ok(Tensor::symbolic(out_shape));
    }
    let data = match mode {
        Resample::NearestUp2 => planes(x, out_shape, nearest_up2),
        Resample::MeanDown2 => planes(x, out_shape, mean_down2),
        Resample::BlurThenDown2 => planes(x, out_shape, |src, h, w, dst| {
            let blurred = blur3(src, h, w);
            mean_down2(&blurred, h, w, dst)
        }),
        Resample::GlobalAvgPool => (0..s.n * s.c)
            .map(|i| {
                let p = &x.data()[i * s.plane()..(i + 1) * s.plane()];
                (p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64) as f32
            })
            .collect(),
    };
    Tensor::new(out_shape, data)
}

fn planes(x: &Tensor, out: Shape, f: impl Fn(&[f32], usize, usize, &mut [f32])) -> Vec<f32> {
    let s = x.shape();
    let mut data = vec![0.0f32; out.numel()];
    for (i, dst) in data.chunks_mut(out.plane()).enumerate() {
        f(&x.data()[i * s.plane()..(i + 1) * s.plane()], s.h, s.w, dst);
    }
    data
}

fn nearest_up2(src: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let w2 = w * 2;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let (top, bottom) = dst[2 * y * w2..(2 * y + 2) * w2].split_at_mut(w2);
        for (x, &v) in row.iter().enumerate() {
            top[2 * x] = v;
            top[2 * x + 1] = v;
        }
        bottom.copy_from_slice(top);
    }
}

fn mean_down2(src: &[f32], h: usize, w: usize, dst: &mut [f32]) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    for oy in 0..ho {
        let y0 = 2 * oy;
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..wo {
            let x0 = 2 * ox;
            let x1 = (x0 + 1).min(w - 1);
            let sum = src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1];
            dst[oy * wo + ox] = sum * 0.25;
        }
    }
}

fn blur3(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            horiz[y * w + x] = (0..3)
                .map(|k| K[k] * src[y * w + clamp(x as isize + k as isize - 1, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..3)
                .map(|k| K[k] * horiz[clamp(y as isize + k as isize - 1, h) * w + x])
                .sum();
        }
    }
    out
}
