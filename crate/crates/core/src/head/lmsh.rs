//! Shared-convolution head: tied projections and blocks across the three
//! scales, a U3-guided fusion gate, and a minimal logits decoder.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{impl_params, Params};
use crate::tensor::{conv2d, group_norm, resample, ConvLayer, GroupNorm, Resample, Tensor};

/// Resolution of the emitted logits relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutStride {
    S8,
    S4,
    S1,
}

impl OutStride {
    pub fn factor(self) -> usize {
        match self {
            OutStride::S8 => 8,
            OutStride::S4 => 4,
            OutStride::S1 => 1,
        }
    }
}

impl fmt::Display for OutStride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factor())
    }
}

impl FromStr for OutStride {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "8" => Ok(OutStride::S8),
            "4" => Ok(OutStride::S4),
            "1" => Ok(OutStride::S1),
            _ => Err(Error::contract("out_stride", format!("expected 8, 4 or 1, got `{s}`"))),
        }
    }
}

/// `x + PW(ReLU(GN(DW3(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBlock {
    pub dw: ConvLayer,
    pub norm: GroupNorm,
    pub pw: ConvLayer,
}

impl_params!(HeadBlock { dw, norm, pw });

impl HeadBlock {
    pub fn new(c_h: usize, groups: usize) -> Self {
        HeadBlock {
            dw: ConvLayer::depthwise(c_h, 3),
            norm: GroupNorm::new(c_h, groups),
            pw: ConvLayer::pointwise(c_h, c_h).with_bias(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = group_norm(&conv2d(x, &self.dw)?, &self.norm)?.relu();
        x.add(&conv2d(&y, &self.pw)?)
    }
}

/// The one parameter set every scale runs through.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedStack {
    pub proj: ConvLayer,
    pub blocks: Vec<HeadBlock>,
}

impl_params!(SharedStack { proj, blocks });

impl SharedStack {
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let mut phi = conv2d(f, &self.proj)?;
        for b in &self.blocks {
            phi = b.forward(&phi)?;
        }
        Ok(phi)
    }

    /// Multiplies the pointwise weights and bias closing each block by `s`.
    pub fn scale_residual_branches(&mut self, s: f32) {
        for b in &mut self.blocks {
            b.pw.weight
                .iter_mut()
                .chain(b.pw.bias.iter_mut().flatten())
                .for_each(|v| *v *= s);
        }
    }

    /// `C_f C_h + C_h + B (9 C_h + 2 C_h + C_h^2 + C_h)`.
    pub fn closed_form_params(c_f: usize, c_h: usize, blocks: usize) -> u64 {
        let (f, h, b) = (c_f as u64, c_h as u64, blocks as u64);
        f * h + h + b * (9 * h + 2 * h + h * h + h)
    }
}

/// Intermediate maps of one head evaluation on the stride-8 grid.
pub struct HeadFeatures {
    /// Per-scale outputs of the shared stack, before alignment.
    pub phi: [Tensor; 3],
    pub u: [Tensor; 3],
    /// Fusion gate `A`.
    pub gate: Tensor,
    /// `deepMix([U4, U5])`.
    pub deep: Tensor,
    /// `A * U3 + (1 - A) * deep`.
    pub g: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lmsh {
    pub shared: SharedStack,
    pub align4: ConvLayer,
    pub align5: ConvLayer,
    /// `3 C_h -> C_h` on `[U3, U4, U5]`.
    pub gate_conv: ConvLayer,
    /// `2 C_h -> C_h` on `[U4, U5]`.
    pub deep_mix: ConvLayer,
    pub cls8: ConvLayer,
    pub cls4_dw: ConvLayer,
    pub cls4_pw: ConvLayer,
    /// Final 1x1 after the two extra upsamplings to full resolution.
    pub cls_full: ConvLayer,
    /// `C_h -> 1` on the Sobel response of `G`; train form only.
    pub edge_head: Option<ConvLayer>,
}

impl_params!(Lmsh {
    shared,
    align4,
    align5,
    gate_conv,
    deep_mix,
    cls8,
    cls4_dw,
    cls4_pw,
    cls_full,
    edge_head
});

impl Lmsh {
    pub fn new(c_f: usize, c_h: usize, blocks: usize, gn_groups: usize, classes: usize) -> Self {
        let pw = |i, o| ConvLayer::pointwise(i, o).with_bias();
        Lmsh {
            shared: SharedStack {
                proj: pw(c_f, c_h),
                blocks: (0..blocks).map(|_| HeadBlock::new(c_h, gn_groups)).collect(),
            },
            align4: pw(c_h, c_h),
            align5: pw(c_h, c_h),
            gate_conv: pw(3 * c_h, c_h),
            deep_mix: pw(2 * c_h, c_h),
            cls8: pw(c_h, classes),
            cls4_dw: ConvLayer::depthwise(classes, 3).with_bias(),
            cls4_pw: pw(classes, classes),
            cls_full: pw(classes, classes),
            edge_head: Some(pw(c_h, 1)),
        }
    }

    pub fn classes(&self) -> usize {
        self.cls8.out_ch
    }

    /// The same stack for every scale; the returned references are identical.
    pub fn stack_for(&self, _scale: usize) -> &SharedStack {
        &self.shared
    }

    /// Parameters an otherwise identical head would have with one stack per scale.
    pub fn untied_param_count(&self) -> u64 {
        self.param_count() + 2 * self.shared.param_count()
    }

    pub fn features(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor) -> Result<HeadFeatures> {
        let phi = [
            self.stack_for(3).forward(f3)?,
            self.stack_for(4).forward(f4)?,
            self.stack_for(5).forward(f5)?,
        ];
        let up = |x: Tensor| resample(&x, Resample::NearestUp2);
        let u4 = up(conv2d(&phi[1], &self.align4)?)?;
        let u5 = up(up(conv2d(&phi[2], &self.align5)?)?)?;
        let u3 = phi[0].clone();
        let gate = conv2d(&Tensor::concat_channels(&[&u3, &u4, &u5])?, &self.gate_conv)?.sigmoid();
        let deep = conv2d(&Tensor::concat_channels(&[&u4, &u5])?, &self.deep_mix)?;
        let g = gate_blend(&gate, &u3, &deep)?;
        Ok(HeadFeatures {
            phi,
            u: [u3, u4, u5],
            gate,
            deep,
            g,
        })
    }

    pub fn decode(&self, g: &Tensor, stride: OutStride) -> Result<Tensor> {
        let l8 = conv2d(g, &self.cls8)?;
        if stride == OutStride::S8 {
            return Ok(l8);
        }
        let up = resample(&l8, Resample::NearestUp2)?;
        let l4 = conv2d(&conv2d(&up, &self.cls4_dw)?, &self.cls4_pw)?;
        if stride == OutStride::S4 {
            return Ok(l4);
        }
        let full = resample(&resample(&l4, Resample::NearestUp2)?, Resample::NearestUp2)?;
        conv2d(&full, &self.cls_full)
    }

    pub fn forward(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor, stride: OutStride) -> Result<Tensor> {
        self.decode(&self.features(f3, f4, f5)?.g, stride)
    }

    pub fn without_aux(&self) -> Self {
        Lmsh {
            edge_head: None,
            ..self.clone()
        }
    }
}

/// `A * u + (1 - A) * d`, elementwise.
pub fn gate_blend(a: &Tensor, u: &Tensor, d: &Tensor) -> Result<Tensor> {
    let au = a.mul(u)?;
    let rest = a.zip_with(d, "gate_blend", |a, d| (1.0 - a) * d)?;
    au.add(&rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::randomize;
    use crate::tensor::Shape;
    use crate::testutil::{random_tensor, rng};
    use proptest::prelude::*;

    fn random_head(seed: u64) -> Lmsh {
        let mut h = Lmsh::new(8, 16, 2, 4, 4);
        randomize(&mut h, &mut rng(seed));
        h
    }

    fn inputs(seed: u64, side: usize) -> [Tensor; 3] {
        let mut r = rng(seed);
        [1, 2, 4].map(|k| random_tensor(&mut r, Shape::new(1, 8, side / k, side / k)))
    }

    #[test]
    fn logit_shapes_for_every_stride() {
        let h = random_head(1);
        let [f3, f4, f5] = inputs(2, 8);
        for (stride, side) in [(OutStride::S8, 8), (OutStride::S4, 16), (OutStride::S1, 64)] {
            let l = h.forward(&f3, &f4, &f5, stride).unwrap();
            assert_eq!(l.shape(), Shape::new(1, 4, side, side));
        }
    }

    #[test]
    fn saturated_gate_selects_u3() {
        let mut h = random_head(3);
        h.gate_conv.weight.iter_mut().for_each(|w| *w = 0.0);
        h.gate_conv.bias.as_mut().unwrap().iter_mut().for_each(|b| *b = 60.0);
        let [f3, f4, f5] = inputs(4, 8);
        let feats = h.features(&f3, &f4, &f5).unwrap();
        assert!(feats.gate.data().iter().all(|&a| a == 1.0 - f32::EPSILON / 2.0));
        let bound = 1e-7 * (feats.u[0].max_abs() + feats.deep.max_abs());
        assert!(feats.g.max_abs_diff(&feats.u[0]).unwrap() <= bound);
    }

    #[test]
    fn zero_deep_features_give_gated_u3() {
        let h = random_head(5);
        let [u3, _, _] = inputs(6, 8).map(|t| t.narrow_channels(0, 8).unwrap());
        let a = random_tensor(&mut rng(7), u3.shape()).sigmoid();
        let d = Tensor::zeros(u3.shape());
        assert_eq!(gate_blend(&a, &u3, &d).unwrap(), a.mul(&u3).unwrap());
        assert_eq!(h.classes(), 4);
    }

    #[test]
    fn tying_audit_against_closed_form() {
        let (c_h, b, k) = (16u64, 2usize, 4u64);
        let h = random_head(8);
        let shared = SharedStack::closed_form_params(8, 16, b);
        assert_eq!(h.shared.param_count(), shared);
        let rest = 2 * (c_h * c_h + c_h)
            + (3 * c_h * c_h + c_h)
            + (2 * c_h * c_h + c_h)
            + (c_h * k + k)
            + (9 * k + k)
            + 2 * (k * k + k)
            + (c_h + 1);
        assert_eq!(h.param_count(), shared + rest);
        assert_eq!(h.untied_param_count() - h.param_count(), 2 * shared);
    }

    #[test]
    fn shared_weights_reach_every_scale() {
        let h = random_head(9);
        let [f3, f4, f5] = inputs(10, 8);
        let before = h.features(&f3, &f4, &f5).unwrap();
        let mut m = h.clone();
        m.shared.blocks[1].pw.weight[0] += 0.5;
        let after = m.features(&f3, &f4, &f5).unwrap();
        for s in 0..3 {
            assert_ne!(before.phi[s], after.phi[s], "scale {s} did not see the shared change");
        }
        assert!(std::ptr::eq(h.stack_for(3), h.stack_for(5)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn g_lies_between_u3_and_deep(seed in 0u64..10_000) {
            let h = random_head(seed);
            let [f3, f4, f5] = inputs(seed + 1, 8);
            let f = h.features(&f3, &f4, &f5).unwrap();
            prop_assert!(f.gate.data().iter().all(|&a| a > 0.0 && a < 1.0));
            for ((&g, &u), &d) in f.g.data().iter().zip(f.u[0].data()).zip(f.deep.data()) {
                let (lo, hi) = (u.min(d), u.max(d));
                let slack = 1e-6 * (1.0 + u.abs().max(d.abs()));
                prop_assert!(g >= lo - slack && g <= hi + slack);
            }
        }
    }
}
