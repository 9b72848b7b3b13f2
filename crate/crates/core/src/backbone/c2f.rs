//! C2f-Pro: a shortcut/transform channel split whose transform half runs
//! through a chain of RVB-EMA units before all partial outputs are merged.

use super::blocks::{Act, ConvNorm};
use super::ema::Ema;
use crate::error::{Error, Result};
use crate::params::{impl_params, join, Params, Visit, VisitMut};
use crate::reparam::{fuse_branches, AffineNorm, Branch, BranchSpec, Form};
use crate::tensor::{conv2d, ConvLayer, Tensor};

/// Depthwise token mixer: `{3x3 DW, 1x1 DW, identity}` each with frozen
/// normalization in train form, one 3x3 depthwise kernel in deploy form.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenMixer {
    Branches(BranchSpec),
    Fused(ConvLayer),
}

impl TokenMixer {
    pub fn new(channels: usize) -> Self {
        let norm = || Some(AffineNorm::new(channels));
        TokenMixer::Branches(BranchSpec {
            branches: vec![
                Branch::conv(ConvLayer::depthwise(channels, 3), norm()),
                Branch::conv(ConvLayer::depthwise(channels, 1), norm()),
                Branch::identity(channels, norm()),
            ],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self {
            TokenMixer::Branches(spec) => spec.forward(x)?,
            TokenMixer::Fused(conv) => conv2d(x, conv)?,
        };
        Ok(y.relu())
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(match self {
            TokenMixer::Branches(spec) => TokenMixer::Fused(fuse_branches(spec)?),
            TokenMixer::Fused(conv) => TokenMixer::Fused(conv.clone()),
        })
    }

    pub fn form(&self) -> Form {
        match self {
            TokenMixer::Branches(_) => Form::Train,
            TokenMixer::Fused(_) => Form::Deploy,
        }
    }
}

impl Params for TokenMixer {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        match self {
            TokenMixer::Branches(spec) => spec.visit(&join(prefix, "branches"), f),
            TokenMixer::Fused(conv) => conv.visit(&join(prefix, "fused"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        match self {
            TokenMixer::Branches(spec) => spec.visit_mut(&join(prefix, "branches"), f),
            TokenMixer::Fused(conv) => conv.visit_mut(&join(prefix, "fused"), f),
        }
    }
}

/// Re-parameterizable unit: token mixer, then a `C -> 2C -> C` pointwise
/// channel mixer, with a residual connection around both.
#[derive(Clone, Debug, PartialEq)]
pub struct RvbUnit {
    pub token: TokenMixer,
    pub expand: ConvNorm,
    pub project: ConvNorm,
}

impl_params!(RvbUnit { token, expand, project });

impl RvbUnit {
    pub fn new(channels: usize) -> Self {
        RvbUnit {
            token: TokenMixer::new(channels),
            expand: ConvNorm::new(ConvLayer::pointwise(channels, 2 * channels), Act::Relu),
            project: ConvNorm::new(ConvLayer::pointwise(2 * channels, channels), Act::Identity),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.token.forward(x)?;
        let c = self.project.forward(&self.expand.forward(&t)?)?;
        x.add(&c)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(RvbUnit {
            token: self.token.fuse()?,
            expand: self.expand.fuse()?,
            project: self.project.fuse()?,
        })
    }
}

/// EMA reweighting of the unit input (when enabled) followed by the RVB mix.
#[derive(Clone, Debug, PartialEq)]
pub struct RvbEmaUnit {
    pub ema: Option<Ema>,
    pub rvb: RvbUnit,
}

impl_params!(RvbEmaUnit { ema, rvb });

impl RvbEmaUnit {
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        match &self.ema {
            Some(ema) => self.rvb.forward(&ema.forward(y)?),
            None => self.rvb.forward(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct C2fProBlock {
    pub in_conv: ConvNorm,
    pub units: Vec<RvbEmaUnit>,
    pub out_conv: ConvNorm,
}

impl_params!(C2fProBlock {
    in_conv,
    units,
    out_conv
});

impl C2fProBlock {
    /// `channels` in and out; the units run at `channels / 2`.
    pub fn new(channels: usize, units: usize, ema: Option<(usize, usize)>) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::contract("c2f_pro", format!("odd channel count {channels}")));
        }
        let half = channels / 2;
        let units = (0..units)
            .map(|_| {
                Ok(RvbEmaUnit {
                    ema: ema.map(|(r, k)| Ema::new(half, r, k)).transpose()?,
                    rvb: RvbUnit::new(half),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = half * (units.len() + 1);
        Ok(C2fProBlock {
            in_conv: ConvNorm::new(ConvLayer::pointwise(channels, channels), Act::Relu),
            units,
            out_conv: ConvNorm::new(ConvLayer::pointwise(merged, channels), Act::Relu),
        })
    }

    pub fn ema_enabled(&self) -> bool {
        self.units.iter().any(|u| u.ema.is_some())
    }

    pub fn in_channels(&self) -> usize {
        self.in_conv.conv.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_conv.conv.out_ch
    }

    pub fn form(&self) -> Form {
        self.units.first().map_or(Form::Deploy, |u| u.rvb.token.form())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x0 = self.in_conv.forward(x)?;
        let (xs, xt) = x0.split_halves()?;
        let mut parts = Vec::with_capacity(self.units.len() + 1);
        parts.push(xs);
        let mut y = xt;
        for unit in &self.units {
            y = unit.forward(&y)?;
            parts.push(y.clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        self.out_conv.forward(&Tensor::concat_channels(&refs)?)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(C2fProBlock {
            in_conv: self.in_conv.fuse()?,
            units: self
                .units
                .iter()
                .map(|u| {
                    Ok(RvbEmaUnit {
                        ema: u.ema.clone(),
                        rvb: u.rvb.fuse()?,
                    })
                })
                .collect::<Result<_>>()?,
            out_conv: self.out_conv.fuse()?,
        })
    }
}
