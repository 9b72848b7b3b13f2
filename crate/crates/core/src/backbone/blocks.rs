use crate::error::Result;
use crate::params::impl_params;
use crate::reparam::{fuse_conv_norm, AffineNorm};
use crate::tensor::{conv2d, ConvLayer, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
}

impl Act {
    pub fn apply(self, x: Tensor) -> Tensor {
        match self {
            Act::Identity => x,
            Act::Relu => x.relu(),
        }
    }
}

/// Convolution followed by frozen normalization and an activation. In deploy
/// form the normalization has been folded into the convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm {
    pub conv: ConvLayer,
    pub norm: Option<AffineNorm>,
    pub act: Act,
}

impl_params!(ConvNorm { conv, norm });

impl ConvNorm {
    pub fn new(conv: ConvLayer, act: Act) -> Self {
        let norm = Some(AffineNorm::new(conv.out_ch));
        ConvNorm { conv, norm, act }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.conv)?;
        let y = match &self.norm {
            Some(n) => n.apply(&y)?,
            None => y,
        };
        Ok(self.act.apply(y))
    }

    pub fn fuse(&self) -> Result<Self> {
        let conv = match &self.norm {
            Some(n) => fuse_conv_norm(&self.conv, n)?,
            None => self.conv.clone(),
        };
        Ok(ConvNorm {
            conv,
            norm: None,
            act: self.act,
        })
    }
}
