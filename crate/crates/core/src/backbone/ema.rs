//! Efficient multi-scale attention: a pooled channel gate times a depthwise
//! spatial gate, both logistic, applied multiplicatively.

use crate::error::{Error, Result};
use crate::params::impl_params;
use crate::tensor::{conv2d, resample, ConvLayer, Resample, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    /// Bottleneck `C -> C/r` of the channel mixer.
    pub mix1: ConvLayer,
    /// Expansion `C/r -> C` of the channel mixer.
    pub mix2: ConvLayer,
    /// Depthwise `k x k` producing the spatial gate.
    pub spatial: ConvLayer,
}

impl_params!(Ema { mix1, mix2, spatial });

/// Intermediate gates of one EMA application.
pub struct EmaGates {
    /// Channel weights, `n x C x 1 x 1`.
    pub channel: Tensor,
    /// Spatial gate, `n x 1 x h x w`.
    pub spatial: Tensor,
}

impl Ema {
    pub fn new(channels: usize, reduction: usize, k: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::contract(
                "ema",
                format!("reduction {reduction} must divide {channels}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::contract("ema", format!("spatial kernel {k} must be odd")));
        }
        let hidden = channels / reduction;
        Ok(Ema {
            mix1: ConvLayer::pointwise(channels, hidden).with_bias(),
            mix2: ConvLayer::pointwise(hidden, channels).with_bias(),
            spatial: ConvLayer::depthwise(channels, k).with_bias(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mix1.in_ch
    }

    /// `2C^2/r + C/r + C + k^2 C + C`.
    pub fn closed_form_params(channels: usize, reduction: usize, k: usize) -> u64 {
        let (c, h) = (channels as u64, (channels / reduction) as u64);
        c * h + h + h * c + c + (k * k) as u64 * c + c
    }

    pub fn forward_with_gates(&self, y: &Tensor) -> Result<(Tensor, EmaGates)> {
        let z = resample(y, Resample::GlobalAvgPool)?;
        let hidden = conv2d(&z, &self.mix1)?.relu();
        let channel = conv2d(&hidden, &self.mix2)?.sigmoid();
        let spatial = conv2d(y, &self.spatial)?.channel_mean().sigmoid();
        let out = y.mul_channels(&channel)?.mul_plane(&spatial)?;
        Ok((out, EmaGates { channel, spatial }))
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_gates(y)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;
    use crate::tensor::Shape;
    use crate::testutil::{random_conv, random_tensor, rng};
    use proptest::prelude::*;

    fn random_ema(seed: u64, c: usize) -> Ema {
        let mut r = rng(seed);
        let e = Ema::new(c, 4, 5).unwrap();
        Ema {
            mix1: random_conv(&mut r, e.mix1),
            mix2: random_conv(&mut r, e.mix2),
            spatial: random_conv(&mut r, e.spatial),
        }
    }

    #[test]
    fn zero_params_quarter_the_input() {
        let ema = Ema::new(8, 4, 5).unwrap();
        let y = random_tensor(&mut rng(1), Shape::new(1, 8, 6, 6));
        let out = ema.forward(&y).unwrap();
        assert!(out.max_abs_diff(&y.scale(0.25)).unwrap() <= 1e-7);
    }

    #[test]
    fn zero_input_gives_zero() {
        let ema = random_ema(2, 8);
        let out = ema.forward(&Tensor::zeros(Shape::new(2, 8, 5, 5))).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let ema = Ema::new(32, 4, 5).unwrap();
        assert_eq!(ema.param_count(), Ema::closed_form_params(32, 4, 5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gates_bounded_and_contractive(seed in 0u64..10_000, scale in 0.01f32..3.0) {
            let ema = random_ema(seed, 8);
            let y = random_tensor(&mut rng(seed ^ 0xabc), Shape::new(1, 8, 7, 5)).scale(scale);
            let (out, gates) = ema.forward_with_gates(&y).unwrap();
            prop_assert!(gates.channel.data().iter().all(|&a| a > 0.0 && a < 1.0));
            prop_assert!(gates.spatial.data().iter().all(|&s| s > 0.0 && s < 1.0));
            prop_assert!(out.max_abs() <= y.max_abs());
            for (o, v) in out.data().iter().zip(y.data()) {
                if *v != 0.0 {
                    let ratio = o / v;
                    prop_assert!(ratio > 0.0 && ratio < 1.0);
                }
            }
        }
    }
}
