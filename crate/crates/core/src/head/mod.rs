//! Shared-convolution segmentation head, its auxiliary edge loss, and
//! instance extraction from dense logits.

mod instances;
mod lmsh;

pub use instances::{class_map, extract_instances, Instance, LabelMap};
pub use lmsh::{gate_blend, HeadBlock, HeadFeatures, Lmsh, OutStride, SharedStack};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, sobel_grad, ConvLayer, Tensor};

/// `E = edgeHead(sobel(G))`, shape `n x 1 x h x w`.
pub fn edge_logits(g: &Tensor, edge_head: &ConvLayer) -> Result<Tensor> {
    conv2d(&sobel_grad(g)?, edge_head)
}

/// Mean binary cross-entropy with logits, in the overflow-free form
/// `max(x, 0) - x y + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> f32 {
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
        })
        .sum();
    (sum / logits.len().max(1) as f64) as f32
}

/// `lambda * BCE(E, Edge(gt))` for sample 0 of `edge`, with `gt` already on
/// the same grid.
pub fn edge_loss_from_logits(edge: &Tensor, gt: &LabelMap, lambda: f32) -> Result<f32> {
    let s = edge.shape();
    if s.c != 1 || s.h != gt.h || s.w != gt.w {
        return Err(Error::shape(
            "edge_loss",
            format!("1x1x{}x{} edge logits", gt.h, gt.w),
            s,
        ));
    }
    Ok(lambda * bce_with_logits(edge.plane(0, 0), &gt.edges()))
}

/// The auxiliary edge loss on head feature `G`; `gt` is at input resolution
/// and is majority-voted down to `G`'s grid.
pub fn edge_loss(g: &Tensor, edge_head: &ConvLayer, gt: &LabelMap, lambda: f32) -> Result<f32> {
    let s = g.shape();
    let factor = gt.h / s.h.max(1);
    if factor == 0 || gt.h != s.h * factor || gt.w != s.w * factor {
        return Err(Error::contract(
            "edge_loss",
            format!(
                "mask {}x{} is not an integer multiple of the {}x{} grid",
                gt.h, gt.w, s.h, s.w
            ),
        ));
    }
    let gt = gt.majority_downsample(factor);
    edge_loss_from_logits(&edge_logits(g, edge_head)?, &gt, lambda)
}
