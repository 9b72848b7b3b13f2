//! Scale-sequence fusion followed by stride-8 target-focused enhancement.

mod ssff;
mod tfe;

pub use ssff::{Ssff, SsffGates, G3_UP, G4_DOWN, G4_UP, G5_DOWN};
pub use tfe::{grad_consistency_loss, image_at_stride8, Tfe, TfeGates};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::impl_params;
use crate::profile::section;
use crate::tensor::Tensor;

/// What the head consumes: the refined stride-8 map and the fused deeper maps.
#[derive(Clone, Debug)]
pub struct NeckOutput {
    pub f3: Tensor,
    pub f4: Tensor,
    pub f5: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub ssff: Ssff,
    pub tfe: Tfe,
}

impl_params!(Neck { ssff, tfe });

impl Neck {
    pub fn new(cfg: &ModelConfig) -> Self {
        Neck {
            ssff: Ssff::new(cfg.c_f, cfg.edge_gate_p3),
            tfe: Tfe::new(cfg.c_f, cfg.ema_reduction),
        }
    }

    /// `aligned` are the channel-aligned pyramid maps at strides 8, 16, 32.
    pub fn forward(&self, aligned: [&Tensor; 3]) -> Result<NeckOutput> {
        let [f3, f4, f5] = section("ssff", || self.ssff.forward(aligned[0], aligned[1], aligned[2]))?;
        let f3 = section("tfe", || self.tfe.forward(&f3, &f4, &f5))?;
        Ok(NeckOutput { f3, f4, f5 })
    }

    /// Deploy form has no auxiliary edge projection.
    pub fn without_aux(&self) -> Self {
        let mut n = self.clone();
        n.tfe.edge_proj = None;
        n
    }
}
