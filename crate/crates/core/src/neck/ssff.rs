//! Scale-sequence fusion: per-scale tokens drive a small mixer whose outputs
//! reweight each scale and gate one bidirectional exchange between neighbours.

use crate::error::{Error, Result};
use crate::params::impl_params;
use crate::tensor::{conv2d, resample, sobel_grad, ConvLayer, Resample, Shape, Tensor};

/// Gate order inside [`SsffGates::direction`].
pub const G3_UP: usize = 0;
pub const G4_UP: usize = 1;
pub const G4_DOWN: usize = 2;
pub const G5_DOWN: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Ssff {
    /// Projection applied to the 2x2-pooled map of every scale (shared).
    pub smp_proj: ConvLayer,
    /// `6 C_f -> 2 C_f`.
    pub mix1: ConvLayer,
    /// `2 C_f -> 3 C_f + 4`.
    pub mix2: ConvLayer,
    pub self3: ConvLayer,
    pub self4: ConvLayer,
    pub self5: ConvLayer,
    /// Top-down: F4 into scale 3, F5 into scale 4.
    pub td3: ConvLayer,
    pub td4: ConvLayer,
    /// Bottom-up: F3 into scale 4, F4 into scale 5.
    pub bu4: ConvLayer,
    pub bu5: ConvLayer,
    /// Multiply the top-down term at scale 3 by `exp(-mean_c sobel(F3))`.
    pub edge_gate_p3: bool,
}

impl_params!(Ssff {
    smp_proj,
    mix1,
    mix2,
    self3,
    self4,
    self5,
    td3,
    td4,
    bu4,
    bu5
});

/// Mixer outputs: per-channel scale weights and the four direction gates.
#[derive(Clone, Debug, PartialEq)]
pub struct SsffGates {
    /// `alpha[i]` is `n x C_f x 1 x 1` for scales 3, 4, 5.
    pub alpha: [Tensor; 3],
    /// `n x 4 x 1 x 1` in the order `G3_UP, G4_UP, G4_DOWN, G5_DOWN`.
    pub direction: Tensor,
}

impl SsffGates {
    /// Gates with every `alpha = a` and every direction gate `g`.
    pub fn constant(n: usize, channels: usize, a: f32, g: f32) -> Self {
        let alpha = Tensor::full(Shape::new(n, channels, 1, 1), a);
        SsffGates {
            alpha: [alpha.clone(), alpha.clone(), alpha],
            direction: Tensor::full(Shape::new(n, 4, 1, 1), g),
        }
    }

    fn gate(&self, i: usize) -> Result<Tensor> {
        self.direction.narrow_channels(i, 1)
    }

    pub fn set_direction(&mut self, i: usize, value: f32) {
        let s = self.direction.shape();
        let mut data = self.direction.data().to_vec();
        for n in 0..s.n {
            data[n * 4 + i] = value;
        }
        self.direction = Tensor::new(s, data).expect("same shape");
    }
}

impl Ssff {
    pub fn new(c_f: usize, edge_gate_p3: bool) -> Self {
        let pw = || ConvLayer::pointwise(c_f, c_f).with_bias();
        Ssff {
            smp_proj: pw(),
            mix1: ConvLayer::pointwise(6 * c_f, 2 * c_f).with_bias(),
            mix2: ConvLayer::pointwise(2 * c_f, 3 * c_f + 4).with_bias(),
            self3: pw(),
            self4: pw(),
            self5: pw(),
            td3: pw(),
            td4: pw(),
            bu4: pw(),
            bu5: pw(),
            edge_gate_p3,
        }
    }

    pub fn channels(&self) -> usize {
        self.self3.in_ch
    }

    fn check(&self, f: [&Tensor; 3]) -> Result<()> {
        let c = self.channels();
        let base = f[0].shape();
        for (i, t) in f.iter().enumerate() {
            let s = t.shape();
            let k = 1 << i;
            if s.c != c || s.n != base.n || s.h * k != base.h || s.w * k != base.w {
                return Err(Error::shape(
                    "ssff",
                    format!("F{} with {c} channels at {}x{}", i + 3, base.h / k, base.w / k),
                    s,
                ));
            }
        }
        Ok(())
    }

    /// `t = [GAP(F); GAP(smpProj(meanDown2(F)))]`, shape `n x 2C_f x 1 x 1`.
    pub fn token(&self, f: &Tensor) -> Result<Tensor> {
        let gap = resample(f, Resample::GlobalAvgPool)?;
        let pooled = conv2d(&resample(f, Resample::MeanDown2)?, &self.smp_proj)?;
        let smp = resample(&pooled, Resample::GlobalAvgPool)?;
        Tensor::concat_channels(&[&gap, &smp])
    }

    pub fn gates(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor) -> Result<SsffGates> {
        self.check([f3, f4, f5])?;
        let tokens = [self.token(f3)?, self.token(f4)?, self.token(f5)?];
        let t = Tensor::concat_channels(&[&tokens[0], &tokens[1], &tokens[2]])?;
        let m = conv2d(&conv2d(&t, &self.mix1)?.relu(), &self.mix2)?.sigmoid();
        let c = self.channels();
        Ok(SsffGates {
            alpha: [
                m.narrow_channels(0, c)?,
                m.narrow_channels(c, c)?,
                m.narrow_channels(2 * c, c)?,
            ],
            direction: m.narrow_channels(3 * c, 4)?,
        })
    }

    /// The bidirectional update with explicit gates. Every right-hand side uses
    /// the un-updated inputs.
    pub fn fuse(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor, g: &SsffGates) -> Result<[Tensor; 3]> {
        self.check([f3, f4, f5])?;
        let up = |x: &Tensor, conv: &ConvLayer| resample(&conv2d(x, conv)?, Resample::NearestUp2);
        let down = |x: &Tensor, conv: &ConvLayer| resample(&conv2d(x, conv)?, Resample::BlurThenDown2);
        let own = |x: &Tensor, a: &Tensor, conv: &ConvLayer| conv2d(&x.mul_channels(a)?, conv);

        let mut td3 = up(f4, &self.td3)?;
        if self.edge_gate_p3 {
            let edge = sobel_grad(f3)?.channel_mean().map(|v| (-v).exp());
            td3 = td3.mul_plane(&edge)?;
        }
        let o3 = own(f3, &g.alpha[0], &self.self3)?.add(&td3.mul_samples(&g.gate(G3_UP)?)?)?;
        let o4 = own(f4, &g.alpha[1], &self.self4)?
            .add(&up(f5, &self.td4)?.mul_samples(&g.gate(G4_UP)?)?)?
            .add(&down(f3, &self.bu4)?.mul_samples(&g.gate(G4_DOWN)?)?)?;
        let o5 = own(f5, &g.alpha[2], &self.self5)?.add(&down(f4, &self.bu5)?.mul_samples(&g.gate(G5_DOWN)?)?)?;
        Ok([o3, o4, o5])
    }

    pub fn forward(&self, f3: &Tensor, f4: &Tensor, f5: &Tensor) -> Result<[Tensor; 3]> {
        let g = self.gates(f3, f4, f5)?;
        self.fuse(f3, f4, f5, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::randomize;
    use crate::testutil::{random_tensor, rng, SeededRng};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_ssff(seed: u64, c: usize, edge: bool) -> Ssff {
        let mut s = Ssff::new(c, edge);
        randomize(&mut s, &mut rng(seed));
        s
    }

    fn inputs(r: &mut SeededRng, n: usize, c: usize, h: usize, w: usize) -> [Tensor; 3] {
        [
            random_tensor(r, Shape::new(n, c, h, w)),
            random_tensor(r, Shape::new(n, c, h / 2, w / 2)),
            random_tensor(r, Shape::new(n, c, h / 4, w / 4)),
        ]
    }

    #[test]
    fn gate_annihilation_leaves_per_scale_path() {
        let c = 8;
        let mut s = random_ssff(1, c, false);
        s.mix2.weight.iter_mut().for_each(|w| *w = 0.0);
        let bias = s.mix2.bias.as_mut().unwrap();
        bias[..3 * c].iter_mut().for_each(|b| *b = 60.0);
        bias[3 * c..].iter_mut().for_each(|b| *b = -60.0);
        let [f3, f4, f5] = inputs(&mut rng(2), 1, c, 8, 8);
        let out = s.forward(&f3, &f4, &f5).unwrap();
        for (o, (f, conv)) in out.iter().zip([(&f3, &s.self3), (&f4, &s.self4), (&f5, &s.self5)]) {
            assert!(o.max_abs_diff(&conv2d(f, conv).unwrap()).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn zero_deep_inputs_leave_only_own_term_at_p3() {
        let c = 8;
        let mut s = random_ssff(3, c, false);
        [&mut s.td3, &mut s.td4]
            .into_iter()
            .for_each(|l| l.bias = Some(vec![0.0; c]));
        let [f3, _, _] = inputs(&mut rng(4), 1, c, 8, 8);
        let f4 = Tensor::zeros(Shape::new(1, c, 4, 4));
        let f5 = Tensor::zeros(Shape::new(1, c, 2, 2));
        let g = s.gates(&f3, &f4, &f5).unwrap();
        let out = s.fuse(&f3, &f4, &f5, &g).unwrap();
        let own = conv2d(&f3.mul_channels(&g.alpha[0]).unwrap(), &s.self3).unwrap();
        assert_eq!(out[0], own);
    }

    #[test]
    fn shape_audit_over_random_configs() {
        let mut r = rng(5);
        for _ in 0..20 {
            let c = 4 * r.random_range(1..6);
            let n = r.random_range(1..3);
            let (h, w) = (4 * r.random_range(1..5), 4 * r.random_range(1..5));
            let s = random_ssff(r.random(), c, r.random());
            let f = inputs(&mut r, n, c, h, w);
            let out = s.forward(&f[0], &f[1], &f[2]).unwrap();
            for (o, i) in out.iter().zip(&f) {
                assert_eq!(o.shape(), i.shape());
            }
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let s = Ssff::new(8, false);
        let f3 = Tensor::zeros(Shape::new(1, 8, 8, 8));
        let f4 = Tensor::zeros(Shape::new(1, 8, 4, 4));
        assert!(s.forward(&f3, &f4, &Tensor::zeros(Shape::new(1, 8, 3, 2))).is_err());
        assert!(s.forward(&f3, &f4, &Tensor::zeros(Shape::new(1, 4, 2, 2))).is_err());
    }

    #[test]
    fn scale_locality() {
        let c = 8;
        let s = random_ssff(6, c, true);
        let f = inputs(&mut rng(7), 1, c, 16, 16);
        let g = s.gates(&f[0], &f[1], &f[2]).unwrap();
        // Gates touching each scale: the ones carrying its features elsewhere.
        let touching: [&[usize]; 3] = [&[G4_DOWN], &[G3_UP, G5_DOWN], &[G4_UP]];
        for l in 0..3 {
            let mut gl = g.clone();
            touching[l].iter().for_each(|&i| gl.set_direction(i, 0.0));
            let mut zeroed = f.clone();
            zeroed[l] = Tensor::zeros(f[l].shape());
            let a = s.fuse(&f[0], &f[1], &f[2], &gl).unwrap();
            let b = s.fuse(&zeroed[0], &zeroed[1], &zeroed[2], &gl).unwrap();
            for k in (0..3).filter(|&k| k != l) {
                assert_eq!(a[k], b[k], "scale {l} leaked into output {k}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gates_strictly_inside_unit_interval(seed in 0u64..10_000, scale in 0.01f32..4.0) {
            let s = random_ssff(seed, 8, false);
            let f = inputs(&mut rng(seed + 1), 2, 8, 8, 8).map(|t| t.scale(scale));
            let g = s.gates(&f[0], &f[1], &f[2]).unwrap();
            for t in g.alpha.iter().chain([&g.direction]) {
                prop_assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let out = s.fuse(&f[0], &f[1], &f[2], &g).unwrap();
            prop_assert!(out.iter().all(Tensor::all_finite));
        }
    }
}
