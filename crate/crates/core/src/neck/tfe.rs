//! Stride-8 refinement guided by a semantic prior from the two deeper scales,
//! and the gradient-consistency loss on its output.

use crate::error::{Error, Result};
use crate::params::impl_params;
use crate::tensor::{conv2d, resample, sobel_grad, ConvLayer, Resample, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Tfe {
    /// `2 C_f -> C_f` on `[Up(F4), Up(Up(F5))]`.
    pub prior: ConvLayer,
    pub w1: ConvLayer,
    pub w2: ConvLayer,
    pub dw3: ConvLayer,
    pub dw5: ConvLayer,
    /// `C_f -> 1`, used only by the gradient-consistency loss. Dropped in deploy form.
    pub edge_proj: Option<ConvLayer>,
}

impl_params!(Tfe {
    prior,
    w1,
    w2,
    dw3,
    dw5,
    edge_proj
});

pub struct TfeGates {
    /// Channel gate, `n x C_f x 1 x 1`.
    pub channel: Tensor,
    /// Spatial gate, `n x 1 x H3 x W3`.
    pub spatial: Tensor,
}

impl Tfe {
    pub fn new(c_f: usize, reduction: usize) -> Self {
        let hidden = (c_f / reduction).max(1);
        Tfe {
            prior: ConvLayer::pointwise(2 * c_f, c_f).with_bias(),
            w1: ConvLayer::pointwise(c_f, hidden).with_bias(),
            w2: ConvLayer::pointwise(hidden, c_f).with_bias(),
            dw3: ConvLayer::depthwise(c_f, 3).with_bias(),
            dw5: ConvLayer::depthwise(c_f, 5).with_bias(),
            edge_proj: Some(ConvLayer::pointwise(c_f, 1).with_bias()),
        }
    }

    pub fn gates(&self, f4: &Tensor, f5: &Tensor) -> Result<TfeGates> {
        let up4 = resample(f4, Resample::NearestUp2)?;
        let up5 = resample(&resample(f5, Resample::NearestUp2)?, Resample::NearestUp2)?;
        let s = conv2d(&Tensor::concat_channels(&[&up4, &up5])?, &self.prior)?;
        let gap = resample(&s, Resample::GlobalAvgPool)?;
        let channel = conv2d(&conv2d(&gap, &self.w1)?.relu(), &self.w2)?.sigmoid();
        let spatial = conv2d(&s, &self.dw3)?
            .add(&conv2d(&s, &self.dw5)?)?
            .channel_mean()
            .sigmoid();
        Ok(TfeGates { channel, spatial })
    }

    /// `F3 + (w * F3) * M_s`.
    pub fn apply(f3: &Tensor, g: &TfeGates) -> Result<Tensor> {
        f3.mul_channels(&g.channel)?.mul_plane(&g.spatial)?.add(f3)
    }

    pub fn forward_with_gates(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor) -> Result<(Tensor, TfeGates)> {
        let g = self.gates(f4, f5)?;
        if g.spatial.shape() != f3.shape().with_c(1) {
            return Err(Error::shape(
                "tfe",
                format!("F3 on the grid of {}", g.spatial.shape()),
                f3.shape(),
            ));
        }
        Ok((Self::apply(f3, &g)?, g))
    }

    pub fn forward(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_gates(f3, f4, f5)?.0)
    }
}

/// The input image reduced to the stride-8 grid: channel mean, then three 2x2 mean pools.
pub fn image_at_stride8(image: &Tensor) -> Result<Tensor> {
    let mut g = image.channel_mean();
    for _ in 0..3 {
        g = resample(&g, Resample::MeanDown2)?;
    }
    Ok(g)
}

/// `lambda * mean |sobel(edgeProj(F3)) - sobel(I_s8)|`.
pub fn grad_consistency_loss(f3: &Tensor, edge_proj: &ConvLayer, image: &Tensor, lambda: f32) -> Result<f32> {
    let e = conv2d(f3, edge_proj)?;
    let target = image_at_stride8(image)?;
    if e.shape() != target.shape() {
        return Err(Error::shapes("grad_consistency_loss", e.shape(), target.shape()));
    }
    let diff = sobel_grad(&e)?.sub(&sobel_grad(&target)?)?;
    let mean = diff.data().iter().map(|v| v.abs() as f64).sum::<f64>() / diff.data().len() as f64;
    Ok(lambda * mean as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::randomize;
    use crate::tensor::Shape;
    use crate::testutil::{random_tensor, rng};
    use proptest::prelude::*;

    fn random_tfe(seed: u64, c: usize) -> Tfe {
        let mut t = Tfe::new(c, 4);
        randomize(&mut t, &mut rng(seed));
        t
    }

    #[test]
    fn zero_f3_gives_zero() {
        let t = random_tfe(1, 8);
        let mut r = rng(2);
        let f4 = random_tensor(&mut r, Shape::new(1, 8, 4, 4));
        let f5 = random_tensor(&mut r, Shape::new(1, 8, 2, 2));
        let out = t.forward(&Tensor::zeros(Shape::new(1, 8, 8, 8)), &f4, &f5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_gates_keep_residual() {
        let mut t = random_tfe(3, 8);
        for l in [&mut t.w2, &mut t.dw3, &mut t.dw5] {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.as_mut().unwrap().iter_mut().for_each(|b| *b = -60.0);
        }
        let mut r = rng(4);
        let f3 = random_tensor(&mut r, Shape::new(1, 8, 8, 8));
        let f4 = random_tensor(&mut r, Shape::new(1, 8, 4, 4));
        let f5 = random_tensor(&mut r, Shape::new(1, 8, 2, 2));
        let out = t.forward(&f3, &f4, &f5).unwrap();
        assert!(out.max_abs_diff(&f3).unwrap() <= 1e-6);
    }

    #[test]
    fn loss_zero_cases() {
        let image = random_tensor(&mut rng(5), Shape::new(1, 3, 64, 64));
        let target = image_at_stride8(&image).unwrap();
        let mut proj = ConvLayer::pointwise(4, 1).with_bias();
        proj.weight[0] = 1.0;
        let f3 = Tensor::concat_channels(&[&target, &Tensor::full(target.shape().with_c(3), 7.0)]).unwrap();
        assert_eq!(grad_consistency_loss(&f3, &proj, &image, 0.1).unwrap(), 0.0);

        let other = random_tensor(&mut rng(6), Shape::new(1, 4, 8, 8));
        assert_eq!(grad_consistency_loss(&other, &proj, &image, 0.0).unwrap(), 0.0);
        assert!(grad_consistency_loss(&other, &proj, &image, 0.1).unwrap() > 0.0);

        let flat = Tensor::full(Shape::new(1, 4, 8, 8), 2.5);
        let flat_image = Tensor::full(Shape::new(1, 3, 64, 64), 0.3);
        assert_eq!(grad_consistency_loss(&flat, &proj, &flat_image, 0.1).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn residual_bounds(seed in 0u64..10_000) {
            let t = random_tfe(seed, 8);
            let mut r = rng(seed ^ 0x55);
            let f3 = random_tensor(&mut r, Shape::new(1, 8, 8, 8)).map(f32::abs);
            let f4 = random_tensor(&mut r, Shape::new(1, 8, 4, 4));
            let f5 = random_tensor(&mut r, Shape::new(1, 8, 2, 2));
            let (out, g) = t.forward_with_gates(&f3, &f4, &f5).unwrap();
            prop_assert!(g.channel.data().iter().chain(g.spatial.data()).all(|&v| v > 0.0 && v < 1.0));
            for (&o, &f) in out.data().iter().zip(f3.data()) {
                prop_assert!(o >= f && o <= 2.0 * f);
            }
            let wmax = g.channel.max_abs();
            let mmax = g.spatial.max_abs();
            let bound = f3.max_abs() * wmax * mmax;
            prop_assert!(out.max_abs_diff(&f3).unwrap() <= bound * (1.0 + 1e-6));
            prop_assert!(bound < f3.max_abs());
        }
    }
}
