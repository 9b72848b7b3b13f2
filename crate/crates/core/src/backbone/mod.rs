//! Stem, four downsampling C2f-Pro stages and LMFE channel alignment.

mod blocks;
mod c2f;
mod ema;

pub use blocks::{Act, ConvNorm};
pub use c2f::{C2fProBlock, RvbEmaUnit, RvbUnit, TokenMixer};
pub use ema::{Ema, EmaGates};

use crate::config::{ModelConfig, UNITS_PER_STAGE};
use crate::error::{Error, Result};
use crate::params::{impl_params, ParamKind, Params};
use crate::reparam::{measure_norm_stats, Form};
use crate::tensor::{conv2d, group_norm, ConvLayer, GroupNorm, Shape, Tensor};

pub const CALIBRATION_VAR_FLOOR: f32 = 1e-2;

/// The (P3, P4, P5) taps at strides 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.p3, &self.p4, &self.p5]
    }

    pub fn channels(&self) -> [usize; 3] {
        self.levels().map(|t| t.shape().c)
    }

    /// Checks `P3 = 2 P4 = 4 P5` in both spatial dimensions.
    pub fn check_strides(&self) -> Result<()> {
        let [a, b, c] = self.levels().map(Tensor::shape);
        if a.h != 2 * b.h || a.w != 2 * b.w || b.h != 2 * c.h || b.w != 2 * c.w {
            return Err(Error::contract(
                "feature pyramid",
                format!("strides broken: P3 {a}, P4 {b}, P5 {c}"),
            ));
        }
        Ok(())
    }
}

/// Stride-2 depthwise-separable downsampling: DW 3x3 s2, then PW to the stage width.
#[derive(Clone, Debug, PartialEq)]
pub struct DownSample {
    pub dw: ConvNorm,
    pub pw: ConvNorm,
}

impl_params!(DownSample { dw, pw });

impl DownSample {
    pub fn new(in_ch: usize, out_ch: usize) -> Self {
        DownSample {
            dw: ConvNorm::new(ConvLayer::depthwise(in_ch, 3).with_stride(2), Act::Relu),
            pw: ConvNorm::new(ConvLayer::pointwise(in_ch, out_ch), Act::Relu),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pw.forward(&self.dw.forward(x)?)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(DownSample {
            dw: self.dw.fuse()?,
            pw: self.pw.fuse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub down: DownSample,
    pub block: C2fProBlock,
}

impl_params!(Stage { down, block });

impl Stage {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.block.forward(&self.down.forward(x)?)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(Stage {
            down: self.down.fuse()?,
            block: self.block.fuse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: ConvNorm,
    pub stages: Vec<Stage>,
}

impl_params!(Backbone { stem, stages });

impl Backbone {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_ch = cfg.stem_channels();
        let stem = ConvNorm::new(ConvLayer::new(3, stem_ch, 3).with_stride(2).with_padding(1), Act::Relu);
        let mut prev = stem_ch;
        let mut stages = Vec::new();
        for (i, ch) in cfg.stage_channels().into_iter().enumerate() {
            let ema = cfg
                .ema_at(cfg.stage_stride(i))
                .then_some((cfg.ema_reduction, cfg.spatial_k));
            stages.push(Stage {
                down: DownSample::new(prev, ch),
                block: C2fProBlock::new(ch, UNITS_PER_STAGE, ema)?,
            });
            prev = ch;
        }
        Ok(Backbone { stem, stages })
    }

    pub fn form(&self) -> Form {
        self.stages.first().map_or(Form::Deploy, |s| s.block.form())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &C2fProBlock> {
        self.stages.iter().map(|s| &s.block)
    }

    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.c != 3 {
            return Err(Error::shape("backbone", "3 input channels", s));
        }
        if s.h % 32 != 0 || s.w % 32 != 0 {
            return Err(Error::contract(
                "backbone",
                format!("input {}x{} must be a multiple of 32 in both dimensions", s.h, s.w),
            ));
        }
        let mut x = self.stem.forward(image)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.forward(&x)?;
            taps.push(x.clone());
        }
        let n = taps.len();
        if n < 3 {
            return Err(Error::contract("backbone", format!("need at least 3 stages, have {n}")));
        }
        let p5 = taps.pop().expect("n >= 3");
        let p4 = taps.pop().expect("n >= 3");
        let p3 = taps.pop().expect("n >= 3");
        let pyramid = FeaturePyramid { p3, p4, p5 };
        pyramid.check_strides()?;
        Ok(pyramid)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(Backbone {
            stem: self.stem.fuse()?,
            stages: self.stages.iter().map(Stage::fuse).collect::<Result<_>>()?,
        })
    }

    /// Multiplies the output-norm scale and shift of every residual unit by `s`.
    pub fn scale_residual_branches(&mut self, s: f32) {
        for unit in self.stages.iter_mut().flat_map(|st| st.block.units.iter_mut()) {
            if let Some(norm) = unit.rvb.project.norm.as_mut() {
                norm.gamma.iter_mut().chain(norm.beta.iter_mut()).for_each(|v| *v *= s);
            }
        }
    }

    /// Replaces every frozen normalization mean and variance with the
    /// statistics it sees on `image`, layer by layer in forward order.
    /// Variances are floored at [`CALIBRATION_VAR_FLOOR`] so channels that are
    /// nearly constant on the calibration image do not get an extreme gain.
    pub fn calibrate(&mut self, image: &Tensor) -> Result<()> {
        let (out, stats) = measure_norm_stats(|| self.forward(image));
        out?;
        let mut stats = stats.into_iter();
        let mut current: Option<(Vec<f32>, Vec<f32>)> = None;
        let mut mismatch = false;
        self.visit_mut("", &mut |_, _, data, kind| match kind {
            ParamKind::NormMean => {
                current = stats.next();
                match &current {
                    Some((m, _)) if m.len() == data.len() => data.copy_from_slice(m),
                    _ => mismatch = true,
                }
            }
            ParamKind::NormVar => match &current {
                Some((_, v)) if v.len() == data.len() => data
                    .iter_mut()
                    .zip(v)
                    .for_each(|(d, &v)| *d = v.max(CALIBRATION_VAR_FLOOR)),
                _ => mismatch = true,
            },
            _ => {}
        });
        if mismatch || stats.next().is_some() {
            return Err(Error::contract(
                "calibrate",
                "normalization order differs from forward order",
            ));
        }
        Ok(())
    }

    /// Input shape of every stage's C2f-Pro block for an `input x input` image.
    pub fn block_inputs(&self, input: usize) -> Vec<Shape> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let side = input / (4 << i);
                Shape::new(1, s.block.in_channels(), side, side)
            })
            .collect()
    }
}

/// LMFE alignment: `ReLU(GN(Conv1x1(P)))` to the neck width.
#[derive(Clone, Debug, PartialEq)]
pub struct Lmfe {
    pub conv: ConvLayer,
    pub norm: GroupNorm,
}

impl_params!(Lmfe { conv, norm });

impl Lmfe {
    pub fn new(in_ch: usize, target_ch: usize, groups: usize) -> Self {
        Lmfe {
            conv: ConvLayer::pointwise(in_ch, target_ch),
            norm: GroupNorm::new(target_ch, groups),
        }
    }

    pub fn forward(&self, p: &Tensor) -> Result<Tensor> {
        lmfe_align(p, &self.conv, &self.norm)
    }
}

pub fn lmfe_align(p: &Tensor, conv: &ConvLayer, norm: &GroupNorm) -> Result<Tensor> {
    Ok(group_norm(&conv2d(p, conv)?, norm)?.relu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::randomize;
    use crate::testutil::{random_tensor, rng};

    #[test]
    fn pyramid_strides_for_default_and_small_inputs() {
        let cfg = ModelConfig::default();
        let bb = Backbone::new(&cfg).unwrap();
        let p = bb.forward(&Tensor::symbolic(Shape::new(1, 3, 640, 640))).unwrap();
        assert_eq!([p.p3.shape().h, p.p4.shape().h, p.p5.shape().h], [80, 40, 20]);
        assert_eq!(p.channels().to_vec(), cfg.pyramid_channels().to_vec());
        let p = bb.forward(&Tensor::symbolic(Shape::new(1, 3, 64, 64))).unwrap();
        assert_eq!([p.p3.shape().h, p.p4.shape().h, p.p5.shape().h], [8, 4, 2]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let bb = Backbone::new(&ModelConfig::tiny()).unwrap();
        let err = bb
            .forward(&Tensor::zeros(Shape::new(1, 3, 48, 64)))
            .unwrap_err()
            .to_string();
        assert!(err.contains("multiple of 32"), "{err}");
    }

    #[test]
    fn ema_only_at_deep_strides() {
        let bb = Backbone::new(&ModelConfig::default()).unwrap();
        let flags: Vec<bool> = bb.blocks().map(C2fProBlock::ema_enabled).collect();
        assert_eq!(flags, [false, false, true, true]);
    }

    #[test]
    fn ema_at_stride_8_adds_closed_form_params() {
        let base = ModelConfig::tiny();
        let with = ModelConfig {
            ema_strides: vec![8, 16, 32],
            ..base.clone()
        };
        let c = base.pyramid_channels()[0] / 2;
        let delta = Backbone::new(&with).unwrap().param_count() - Backbone::new(&base).unwrap().param_count();
        assert_eq!(
            delta,
            UNITS_PER_STAGE as u64 * Ema::closed_form_params(c, base.ema_reduction, base.spatial_k)
        );
    }

    /// Unnormalized activations grow with depth here, so the comparison is
    /// relative to the output magnitude.
    #[test]
    fn fused_backbone_matches_train_form() {
        let mut bb = Backbone::new(&ModelConfig::tiny()).unwrap();
        randomize(&mut bb, &mut rng(11));
        let fused = bb.fuse().unwrap();
        assert_eq!(fused.form(), Form::Deploy);
        assert!(fused.param_count() < bb.param_count());
        for seed in 0..3 {
            let x = random_tensor(&mut rng(seed), Shape::new(1, 3, 64, 64));
            let a = bb.forward(&x).unwrap();
            let b = fused.forward(&x).unwrap();
            for (ta, tb) in a.levels().into_iter().zip(b.levels()) {
                assert!(ta.max_abs_diff(tb).unwrap() <= 1e-5 * ta.max_abs().max(1.0));
            }
        }
    }

    #[test]
    fn calibration_freezes_measured_statistics() {
        let mut bb = Backbone::new(&ModelConfig::tiny()).unwrap();
        randomize(&mut bb, &mut rng(12));
        let x = random_tensor(&mut rng(13), Shape::new(1, 3, 64, 64));
        let stem_out = conv2d(&x, &bb.stem.conv).unwrap();
        bb.calibrate(&x).unwrap();
        let norm = bb.stem.norm.as_ref().unwrap();
        for c in 0..stem_out.shape().c {
            let plane = stem_out.plane(0, c);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane.len() as f64;
            assert!((norm.mean[c] as f64 - mean).abs() < 1e-5);
            assert!((norm.var[c] as f64 - var.max(CALIBRATION_VAR_FLOOR as f64)).abs() < 1e-4);
        }
        bb.scale_residual_branches(0.2);
        let frozen = bb.forward(&x).unwrap();
        assert!(frozen.p5.max_abs() < 50.0, "{}", frozen.p5.max_abs());
    }

    #[test]
    fn lmfe_matches_composition_and_zero() {
        let mut lmfe = Lmfe::new(8, 16, 4);
        randomize(&mut lmfe, &mut rng(5));
        let x = random_tensor(&mut rng(6), Shape::new(1, 8, 5, 5));
        let manual = group_norm(&conv2d(&x, &lmfe.conv).unwrap(), &lmfe.norm).unwrap().relu();
        assert_eq!(lmfe.forward(&x).unwrap(), manual);
        lmfe.norm.beta.iter_mut().for_each(|b| *b = 0.0);
        let z = lmfe.forward(&Tensor::zeros(Shape::new(1, 8, 5, 5))).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lmfe_identity_whitens() {
        let mut lmfe = Lmfe::new(4, 4, 2);
        for i in 0..4 {
            let idx = lmfe.conv.weight_index(i, i, 0, 0);
            lmfe.conv.weight[idx] = 1.0;
        }
        let x = random_tensor(&mut rng(9), Shape::new(1, 4, 6, 6)).map(f32::abs);
        let expected = group_norm(&x, &lmfe.norm).unwrap().relu();
        assert_eq!(lmfe.forward(&x).unwrap(), expected);
    }
}
