//! Named-parameter traversal shared by initialization, weight files and
//! parameter counting.

use crate::reparam::{AffineNorm, Branch, BranchOp, BranchSpec};
use crate::tensor::{ConvLayer, GroupNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Frozen running statistics; stored but not counted as parameters.
    NormMean,
    NormVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::NormMean | ParamKind::NormVar)
    }
}

/// Visitor over `(name, dims, data, kind)` for every parameter tensor.
pub type Visit<'a> = dyn FnMut(&str, &[usize], &[f32], ParamKind) + 'a;
pub type VisitMut<'a> = dyn FnMut(&str, &[usize], &mut Vec<f32>, ParamKind) + 'a;

pub trait Params {
    fn visit(&self, prefix: &str, f: &mut Visit);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut);

    fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit("", &mut |_, _, data, kind| {
            if kind.learnable() {
                total += data.len() as u64;
            }
        });
        total
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(prefix, &mut |name, _, _, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        f(
            &join(prefix, "weight"),
            &self.weight_shape(),
            &self.weight,
            ParamKind::Weight,
        );
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), &[self.out_ch], b, ParamKind::Bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        let shape = self.weight_shape();
        f(&join(prefix, "weight"), &shape, &mut self.weight, ParamKind::Weight);
        let out = self.out_ch;
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), &[out], b, ParamKind::Bias);
        }
    }
}

impl Params for AffineNorm {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        let c = [self.channels()];
        f(&join(prefix, "gamma"), &c, &self.gamma, ParamKind::NormScale);
        f(&join(prefix, "beta"), &c, &self.beta, ParamKind::NormShift);
        f(&join(prefix, "mean"), &c, &self.mean, ParamKind::NormMean);
        f(&join(prefix, "var"), &c, &self.var, ParamKind::NormVar);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        let c = [self.channels()];
        f(&join(prefix, "gamma"), &c, &mut self.gamma, ParamKind::NormScale);
        f(&join(prefix, "beta"), &c, &mut self.beta, ParamKind::NormShift);
        f(&join(prefix, "mean"), &c, &mut self.mean, ParamKind::NormMean);
        f(&join(prefix, "var"), &c, &mut self.var, ParamKind::NormVar);
    }
}

impl Params for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        let c = [self.channels()];
        f(&join(prefix, "gamma"), &c, &self.gamma, ParamKind::NormScale);
        f(&join(prefix, "beta"), &c, &self.beta, ParamKind::NormShift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        let c = [self.channels()];
        f(&join(prefix, "gamma"), &c, &mut self.gamma, ParamKind::NormScale);
        f(&join(prefix, "beta"), &c, &mut self.beta, ParamKind::NormShift);
    }
}

impl Params for Branch {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        if let BranchOp::Conv(c) = &self.op {
            c.visit(&join(prefix, "conv"), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        if let BranchOp::Conv(c) = &mut self.op {
            c.visit_mut(&join(prefix, "conv"), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

impl Params for BranchSpec {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        self.branches.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        self.branches.visit_mut(prefix, f);
    }
}

impl<T: Params> Params for Option<T> {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        if let Some(v) = self {
            v.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        if let Some(v) = self {
            v.visit_mut(prefix, f);
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut Visit) {
        for (i, v) in self.iter().enumerate() {
            v.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut) {
        for (i, v) in self.iter_mut().enumerate() {
            v.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Params`] for a struct by delegating to the listed fields,
/// using the field names as path components.
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Params for $ty {
            fn visit(
                &self,
                prefix: &str,
                f: &mut $crate::params::Visit,
            ) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut $crate::params::VisitMut,
            ) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;
