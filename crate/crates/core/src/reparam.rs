//! Structural re-parameterization: folding inference-mode normalization into
//! the preceding convolution and collapsing parallel branches into one kernel.

use std::cell::RefCell;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampling::{random_tensor, rng};
use crate::tensor::{conv2d, ConvLayer, Shape, Tensor};

/// Which parameterization a model or block carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Form {
    /// Multi-branch blocks with separate frozen normalization.
    Train,
    /// Single-path fused convolutions.
    Deploy,
}

impl Form {
    pub fn as_str(self) -> &'static str {
        match self {
            Form::Train => "train",
            Form::Deploy => "deploy",
        }
    }
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Form::Train),
            "deploy" => Ok(Form::Deploy),
            other => Err(Error::contract(
                "form",
                format!("expected `train` or `deploy`, got `{other}`"),
            )),
        }
    }
}

pub const DEFAULT_NORM_EPS: f32 = 1e-5;

/// Per-channel normalization with frozen statistics:
/// `y = (x - mean) * gamma / sqrt(var + eps) + beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl AffineNorm {
    pub fn identity(channels: usize) -> Self {
        AffineNorm {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 0.0,
        }
    }

    /// Identity statistics with `eps = DEFAULT_NORM_EPS`, as used inside models.
    pub fn new(channels: usize) -> Self {
        AffineNorm {
            eps: DEFAULT_NORM_EPS,
            ..Self::identity(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Learnable parameters only; the running statistics are buffers.
    pub fn param_count(&self) -> u64 {
        (self.gamma.len() + self.beta.len()) as u64
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        let c = self.channels();
        if self.mean.len() != c || self.var.len() != c || self.beta.len() != c {
            return Err(Error::contract(op, "normalization statistics differ in length"));
        }
        if self.eps < 0.0 || self.eps.is_nan() {
            return Err(Error::contract(
                op,
                format!("eps must be non-negative, got {}", self.eps),
            ));
        }
        if let Some(i) = self
            .var
            .iter()
            .position(|&v| (v + self.eps).partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::contract(
                op,
                format!("var + eps must be positive, channel {i} has {}", self.var[i] + self.eps),
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `y = x * scale + shift`.
    pub fn scale_shift(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        self.validate("affine_norm")?;
        let scale: Vec<f32> = (0..self.channels())
            .map(|c| self.gamma[c] / (self.var[c] + self.eps).sqrt())
            .collect();
        let shift = (0..self.channels())
            .map(|c| self.beta[c] - self.mean[c] * scale[c])
            .collect();
        Ok((scale, shift))
    }

    /// Applies the frozen statistics, or inside [`measure_norm_stats`] the
    /// statistics of `x` itself.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::shape("affine_norm", format!("{} channels", self.channels()), s));
        }
        self.validate("affine_norm")?;
        if x.is_symbolic() {
            return Ok(x.clone());
        }
        let measured = MEASURED.with(|m| {
            let mut m = m.borrow_mut();
            let list = m.as_mut()?;
            let stats = channel_stats(x);
            list.push(stats.clone());
            Some(stats)
        });
        let (mean, var) = match &measured {
            Some((m, v)) => (m.as_slice(), v.as_slice()),
            None => (self.mean.as_slice(), self.var.as_slice()),
        };
        let mut out = x.data().to_vec();
        for (i, plane) in out.chunks_mut(s.plane()).enumerate() {
            let c = i % s.c;
            let inv = 1.0 / (var[c] + self.eps).sqrt();
            let (m, g, b) = (mean[c], self.gamma[c], self.beta[c]);
            plane.iter_mut().for_each(|v| *v = (*v - m) * inv * g + b);
        }
        Tensor::new(s, out)
    }
}

/// Per-channel `(mean, var)` of each measured norm input.
pub type NormStats = Vec<(Vec<f32>, Vec<f32>)>;

thread_local! {
    static MEASURED: RefCell<Option<NormStats>> = const { RefCell::new(None) };
}

/// Runs `f` with every [`AffineNorm`] on this thread normalizing by the
/// per-channel mean and variance of its actual input, and returns those
/// statistics in application order.
pub fn measure_norm_stats<R>(f: impl FnOnce() -> R) -> (R, NormStats) {
    let outer = MEASURED.with(|m| m.borrow_mut().replace(Vec::new()));
    let out = f();
    let stats = MEASURED
        .with(|m| std::mem::replace(&mut *m.borrow_mut(), outer))
        .unwrap_or_default();
    (out, stats)
}

fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    (0..s.c)
        .map(|c| {
            let vals = || (0..s.n).flat_map(move |n| x.plane(n, c).iter().map(|&v| v as f64));
            let mean = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            (mean as f32, var as f32)
        })
        .unzip()
}

/// Folds `norm` into `conv`: `W' = W * gamma / sqrt(var + eps)`,
/// `b' = beta + (b - mean) * gamma / sqrt(var + eps)`.
pub fn fuse_conv_norm(conv: &ConvLayer, norm: &AffineNorm) -> Result<ConvLayer> {
    conv.validate()?;
    norm.validate("fuse_conv_norm")?;
    if norm.channels() != conv.out_ch {
        return Err(Error::shape(
            "fuse_conv_norm",
            format!("norm over {} channels", conv.out_ch),
            format!("norm over {} channels", norm.channels()),
        ));
    }
    let per_out = conv.weight_len() / conv.out_ch;
    let mut fused = conv.clone();
    let mut bias = conv.bias.clone().unwrap_or_else(|| vec![0.0; conv.out_ch]);
    for (o, (b, rows)) in bias.iter_mut().zip(fused.weight.chunks_mut(per_out)).enumerate() {
        let scale = norm.gamma[o] / (norm.var[o] + norm.eps).sqrt();
        rows.iter_mut().for_each(|w| *w *= scale);
        *b = norm.beta[o] + (*b - norm.mean[o]) * scale;
    }
    fused.bias = Some(bias);
    Ok(fused)
}

#[derive(Clone, Debug, PartialEq)]
pub enum BranchOp {
    Conv(ConvLayer),
    /// Passes the input through unchanged; requires matching channels and stride 1.
    Identity {
        channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub op: BranchOp,
    pub norm: Option<AffineNorm>,
}

impl Branch {
    pub fn conv(conv: ConvLayer, norm: Option<AffineNorm>) -> Self {
        Branch {
            op: BranchOp::Conv(conv),
            norm,
        }
    }

    pub fn identity(channels: usize, norm: Option<AffineNorm>) -> Self {
        Branch {
            op: BranchOp::Identity { channels },
            norm,
        }
    }

    pub fn param_count(&self) -> u64 {
        let op = match &self.op {
            BranchOp::Conv(c) => c.param_count(),
            BranchOp::Identity { .. } => 0,
        };
        op + self.norm.as_ref().map_or(0, AffineNorm::param_count)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match &self.op {
            BranchOp::Conv(c) => conv2d(x, c)?,
            BranchOp::Identity { channels } => {
                if x.shape().c != *channels {
                    return Err(Error::shape(
                        "identity branch",
                        format!("{channels} channels"),
                        x.shape(),
                    ));
                }
                x.clone()
            }
        };
        match &self.norm {
            Some(n) => n.apply(&y),
            None => Ok(y),
        }
    }
}

/// Parallel branches whose outputs are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSpec {
    pub branches: Vec<Branch>,
}

impl BranchSpec {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut iter = self.branches.iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::contract("branch forward", "no branches"))?;
        let mut acc = first.forward(x)?;
        for b in iter {
            acc = acc.add(&b.forward(x)?)?;
        }
        Ok(acc)
    }

    pub fn param_count(&self) -> u64 {
        self.branches.iter().map(Branch::param_count).sum()
    }
}

/// Collapses a branch set into a single convolution with bias.
///
/// The widest kernel fixes the fused kernel size; narrower kernels are
/// zero-padded into its center and the identity branch becomes a centered
/// delta kernel. Normalization on each branch is folded in first.
pub fn fuse_branches(spec: &BranchSpec) -> Result<ConvLayer> {
    let op = "fuse_branches";
    if spec.branches.is_empty() {
        return Err(Error::contract(op, "no branches"));
    }
    if spec
        .branches
        .iter()
        .filter(|b| matches!(b.op, BranchOp::Identity { .. }))
        .count()
        > 1
    {
        return Err(Error::contract(op, "at most one identity branch"));
    }
    let convs: Vec<&ConvLayer> = spec
        .branches
        .iter()
        .filter_map(|b| match &b.op {
            BranchOp::Conv(c) => Some(c),
            BranchOp::Identity { .. } => None,
        })
        .collect();
    let template = match convs.iter().max_by_key(|c| c.kh.max(c.kw)) {
        Some(c) => (*c).clone(),
        None => {
            let BranchOp::Identity { channels } = spec.branches[0].op else {
                unreachable!("identity-only spec")
            };
            ConvLayer::depthwise(channels, 1)
        }
    };
    let target = ConvLayer {
        weight: vec![0.0; template.weight_len()],
        bias: Some(vec![0.0; template.out_ch]),
        ..template
    };
    if target.dilation != 1 {
        return Err(Error::contract(op, "dilated branches are not supported"));
    }
    let offset = |c: &ConvLayer| c.padding as isize - (c.kh as isize - 1) / 2;
    let base_offset = offset(&target);
    for c in &convs {
        c.validate()?;
        if c.stride != target.stride {
            return Err(Error::contract(
                op,
                format!("mixed strides {} and {}", c.stride, target.stride),
            ));
        }
        if c.groups != target.groups || c.in_ch != target.in_ch || c.out_ch != target.out_ch {
            return Err(Error::contract(
                op,
                format!(
                    "incompatible branch {}->{} groups {} vs {}->{} groups {}",
                    c.in_ch, c.out_ch, c.groups, target.in_ch, target.out_ch, target.groups
                ),
            ));
        }
        if c.kh != c.kw || c.kh % 2 == 0 || c.dilation != 1 || offset(c) != base_offset {
            return Err(Error::contract(
                op,
                "branch kernels must be odd, square and center-aligned",
            ));
        }
    }

    let mut fused = target.clone();
    for branch in &spec.branches {
        let conv = match &branch.op {
            BranchOp::Conv(c) => c.clone(),
            BranchOp::Identity { channels } => {
                if target.stride != 1 || target.in_ch != target.out_ch || *channels != target.in_ch {
                    return Err(Error::contract(op, "identity branch needs equal channels and stride 1"));
                }
                delta_kernel(&target)
            }
        };
        let conv = match &branch.norm {
            Some(n) => fuse_conv_norm(&conv, n)?,
            None => conv,
        };
        accumulate_centered(&mut fused, &conv);
    }
    Ok(fused)
}

/// Per-channel identity laid out in `template`'s kernel size and grouping.
fn delta_kernel(template: &ConvLayer) -> ConvLayer {
    let mut k = ConvLayer {
        weight: vec![0.0; template.weight_len()],
        bias: None,
        ..template.clone()
    };
    let icpg = k.in_per_group();
    let (cy, cx) = (k.kh / 2, k.kw / 2);
    for o in 0..k.out_ch {
        let i = k.weight_index(o, o % icpg, cy, cx);
        k.weight[i] = 1.0;
    }
    k
}

fn accumulate_centered(dst: &mut ConvLayer, src: &ConvLayer) {
    let dy = (dst.kh - src.kh) / 2;
    let dx = (dst.kw - src.kw) / 2;
    for o in 0..src.out_ch {
        for i in 0..src.in_per_group() {
            for y in 0..src.kh {
                for x in 0..src.kw {
                    let d = dst.weight_index(o, i, y + dy, x + dx);
                    dst.weight[d] += src.weight[src.weight_index(o, i, y, x)];
                }
            }
        }
    }
    if let (Some(db), Some(sb)) = (dst.bias.as_mut(), src.bias.as_ref()) {
        db.iter_mut().zip(sb).for_each(|(d, s)| *d += s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub input_shape: String,
    pub trials: usize,
    pub tol: f32,
    pub max_abs_diff: f32,
    pub pass: bool,
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input={} trials={} tol={:e} max_abs_diff={:e} pass={}",
            self.input_shape, self.trials, self.tol, self.max_abs_diff, self.pass
        )
    }
}

pub const DEFAULT_CERT_TOL: f32 = 1e-4;

/// Evaluates both forms on `trials` inputs drawn from `N(0, 1)` and compares
/// outputs elementwise. A mismatch is reported, not raised.
pub fn certify_equivalence(
    train_form: impl Fn(&Tensor) -> Result<Tensor>,
    deploy_form: impl Fn(&Tensor) -> Result<Tensor>,
    input: Shape,
    trials: usize,
    tol: f32,
    seed: u64,
) -> Result<EquivalenceReport> {
    let mut r = rng(seed);
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let x = random_tensor(&mut r, input);
        let a = train_form(&x)?;
        let b = deploy_form(&x)?;
        let d = a.max_abs_diff(&b)?;
        worst = if d.is_nan() { f32::INFINITY } else { worst.max(d) };
    }
    Ok(EquivalenceReport {
        input_shape: input.to_string(),
        trials,
        tol,
        max_abs_diff: worst,
        pass: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_conv, uniform_vec};
    use rand::Rng;

    fn random_norm(r: &mut impl Rng, c: usize) -> AffineNorm {
        AffineNorm {
            mean: uniform_vec(r, c, -0.5, 0.5),
            var: uniform_vec(r, c, 0.2, 2.0),
            gamma: uniform_vec(r, c, 0.5, 1.5),
            beta: uniform_vec(r, c, -0.5, 0.5),
            eps: 1e-5,
        }
    }

    fn rvb_spec(r: &mut impl Rng, c: usize) -> BranchSpec {
        BranchSpec {
            branches: vec![
                Branch::conv(random_conv(r, ConvLayer::depthwise(c, 3)), Some(random_norm(r, c))),
                Branch::conv(random_conv(r, ConvLayer::depthwise(c, 1)), Some(random_norm(r, c))),
                Branch::identity(c, Some(random_norm(r, c))),
            ],
        }
    }

    #[test]
    fn identity_norm_leaves_conv_unchanged() {
        let mut r = rng(1);
        let conv = random_conv(&mut r, ConvLayer::new(3, 4, 3).with_bias());
        let fused = fuse_conv_norm(&conv, &AffineNorm::identity(4)).unwrap();
        assert_eq!(fused, conv);
    }

    #[test]
    fn mean_cancels_bias() {
        let mut conv = ConvLayer::pointwise(2, 2).with_bias();
        conv.bias = Some(vec![0.7, -1.3]);
        let norm = AffineNorm {
            mean: vec![0.7, -1.3],
            ..AffineNorm::identity(2)
        };
        let fused = fuse_conv_norm(&conv, &norm).unwrap();
        assert_eq!(fused.bias, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn negative_eps_is_rejected() {
        let norm = AffineNorm {
            eps: -1e-3,
            ..AffineNorm::identity(1)
        };
        assert!(fuse_conv_norm(&ConvLayer::pointwise(1, 1), &norm).is_err());
        let norm = AffineNorm {
            var: vec![0.0],
            ..AffineNorm::identity(1)
        };
        assert!(fuse_conv_norm(&ConvLayer::pointwise(1, 1), &norm).is_err());
    }

    #[test]
    fn conv_norm_folding_matches_sequential() {
        let mut r = rng(2);
        let conv = random_conv(&mut r, ConvLayer::new(4, 6, 3).with_padding(1).with_bias());
        let norm = random_norm(&mut r, 6);
        let fused = fuse_conv_norm(&conv, &norm).unwrap();
        let report = certify_equivalence(
            |x| norm.apply(&conv2d(x, &conv)?),
            |x| conv2d(x, &fused),
            Shape::new(1, 4, 9, 7),
            100,
            1e-5,
            3,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn identity_alone_is_delta() {
        let spec = BranchSpec {
            branches: vec![Branch::identity(3, None)],
        };
        let fused = fuse_branches(&spec).unwrap();
        let x = random_tensor(&mut rng(4), Shape::new(2, 3, 5, 5));
        assert_eq!(conv2d(&x, &fused).unwrap(), x);
    }

    #[test]
    fn zero_dw_plus_identity_is_delta() {
        let spec = BranchSpec {
            branches: vec![
                Branch::conv(ConvLayer::depthwise(4, 3), None),
                Branch::identity(4, None),
            ],
        };
        let fused = fuse_branches(&spec).unwrap();
        let mut expected = vec![0.0; 4 * 9];
        for c in 0..4 {
            expected[c * 9 + 4] = 1.0;
        }
        assert_eq!(fused.weight, expected);
        let x = random_tensor(&mut rng(5), Shape::new(1, 4, 6, 6));
        assert_eq!(conv2d(&x, &fused).unwrap(), x);
    }

    #[test]
    fn rvb_branch_fusion_matches_branch_sum() {
        let mut r = rng(6);
        let spec = rvb_spec(&mut r, 8);
        let fused = fuse_branches(&spec).unwrap();
        let report = certify_equivalence(
            |x| spec.forward(x),
            |x| conv2d(x, &fused),
            Shape::new(1, 8, 10, 10),
            100,
            1e-5,
            7,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn dense_branches_with_identity_fuse() {
        let mut r = rng(16);
        let spec = BranchSpec {
            branches: vec![
                Branch::conv(
                    random_conv(&mut r, ConvLayer::new(4, 4, 3).with_padding(1)),
                    Some(random_norm(&mut r, 4)),
                ),
                Branch::conv(
                    random_conv(&mut r, ConvLayer::pointwise(4, 4)),
                    Some(random_norm(&mut r, 4)),
                ),
                Branch::identity(4, Some(random_norm(&mut r, 4))),
            ],
        };
        let fused = fuse_branches(&spec).unwrap();
        let report = certify_equivalence(
            |x| spec.forward(x),
            |x| conv2d(x, &fused),
            Shape::new(1, 4, 7, 7),
            20,
            1e-5,
            8,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn fusion_reduces_param_count() {
        let spec = rvb_spec(&mut rng(9), 16);
        let fused = fuse_branches(&spec).unwrap();
        assert!(fused.param_count() < spec.param_count());
        assert_eq!(fused.param_count(), 16 * 9 + 16);
    }

    #[test]
    fn fusing_a_fused_layer_is_idempotent() {
        let spec = rvb_spec(&mut rng(10), 6);
        let fused = fuse_branches(&spec).unwrap();
        let again = fuse_branches(&BranchSpec {
            branches: vec![Branch::conv(fused.clone(), None)],
        })
        .unwrap();
        assert_eq!(again, fused);
    }

    #[test]
    fn mixed_strides_rejected() {
        let spec = BranchSpec {
            branches: vec![
                Branch::conv(ConvLayer::depthwise(2, 3).with_stride(2), None),
                Branch::conv(ConvLayer::depthwise(2, 1), None),
            ],
        };
        assert!(fuse_branches(&spec).is_err());
        let spec = BranchSpec {
            branches: vec![
                Branch::conv(ConvLayer::depthwise(2, 3), None),
                Branch::conv(ConvLayer::new(2, 2, 1), None),
            ],
        };
        assert!(fuse_branches(&spec).is_err());
    }

    #[test]
    fn certificate_reflexive_and_offset() {
        let f = |x: &Tensor| Ok(x.scale(2.0));
        let same = certify_equivalence(f, f, Shape::new(1, 2, 3, 3), 10, 1e-4, 0).unwrap();
        assert_eq!(same.max_abs_diff, 0.0);
        assert!(same.pass);
        let off = certify_equivalence(
            f,
            |x: &Tensor| Ok(f(x)?.map(|v| v + 1.0)),
            Shape::new(1, 2, 3, 3),
            10,
            1e-4,
            0,
        )
        .unwrap();
        assert!((off.max_abs_diff - 1.0).abs() < 1e-5);
        assert!(!off.pass);
    }
}
