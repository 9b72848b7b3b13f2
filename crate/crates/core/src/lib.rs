//! Forward-inference engine for the LMSF-A instance-segmentation network.

pub mod backbone;
pub mod config;
pub mod error;
pub mod head;
pub mod init;
pub mod model;
pub mod neck;
pub mod params;
pub mod pnm;
pub mod profile;
pub mod reference;
pub mod reparam;
pub mod runtime;
pub mod sampling;
pub mod selfcheck;
pub mod tensor;
pub mod weights;

#[cfg(test)]
pub(crate) use sampling as testutil;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use head::OutStride;
pub use model::Model;
pub use params::Params;
pub use reparam::Form;
pub use tensor::{Shape, Tensor};
