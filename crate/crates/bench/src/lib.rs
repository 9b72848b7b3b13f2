//! Shared fixtures for the benchmarks in `benches/`.

use lmsf_core::sampling::{random_conv, random_tensor, rng};
use lmsf_core::tensor::{ConvLayer, Shape, Tensor};
use lmsf_core::{Model, ModelConfig};

pub fn input(shape: Shape, seed: u64) -> Tensor {
    random_tensor(&mut rng(seed), shape)
}

pub fn layer(layer: ConvLayer, seed: u64) -> ConvLayer {
    random_conv(&mut rng(seed), layer)
}

/// Default widths at a reduced input side, both forms.
pub fn models(side: usize) -> (Model, Model) {
    let cfg = ModelConfig {
        input_size: side,
        ..ModelConfig::default()
    };
    let train = Model::build(&cfg, 0).expect("default config builds");
    let deploy = train.fuse().expect("fusion succeeds");
    (train, deploy)
}
