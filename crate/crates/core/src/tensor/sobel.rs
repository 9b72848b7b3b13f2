use super::Tensor;
use crate::error::Result;

/// Per-channel `|Gx| + |Gy|` with the 3x3 Sobel kernels and replicate padding.
pub fn sobel_grad(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if x.is_symbolic() {
        return Ok(x.clone());
    }
    let (h, w) = (s.h, s.w);
    let mut out = vec![0.0f32; s.numel()];
    for (i, dst) in out.chunks_mut(s.plane()).enumerate() {
        let src = &x.data()[i * s.plane()..(i + 1) * s.plane()];
        let px = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            src[y * w + x]
        };
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let (tl, t, tr) = (px(y - 1, xx - 1), px(y - 1, xx), px(y - 1, xx + 1));
                let (l, r) = (px(y, xx - 1), px(y, xx + 1));
                let (bl, b, br) = (px(y + 1, xx - 1), px(y + 1, xx), px(y + 1, xx + 1));
                let gx = (tr + 2.0 * r + br) - (tl + 2.0 * l + bl);
                let gy = (bl + 2.0 * b + br) - (tl + 2.0 * t + tr);
                dst[y as usize * w + xx as usize] = gx.abs() + gy.abs();
            }
        }
    }
    Tensor::new(s, out)
}
