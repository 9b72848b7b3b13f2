//! Seeded random tensors and layers for tests, certificates and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{ConvLayer, Shape, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with i.i.d. `N(0, 1)` entries.
pub fn random_tensor(rng: &mut impl Rng, shape: Shape) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Fills weights and bias (if present) with `U(-1, 1)` values.
pub fn random_conv(rng: &mut impl Rng, mut layer: ConvLayer) -> ConvLayer {
    layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
    if let Some(b) = layer.bias.as_mut() {
        b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    layer
}

pub fn uniform_vec(rng: &mut impl Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}
