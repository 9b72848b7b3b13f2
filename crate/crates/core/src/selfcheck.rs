//! The invariant battery behind `lmsf selfcheck`.
//!
//! Each suite returns a [`SuiteResult`]; a failed check is reported, never
//! raised, so one broken suite does not hide the others.

use std::fmt;

use rand::Rng;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{bce_with_logits, edge_loss, gate_blend, LabelMap, OutStride};
use crate::model::Model;
use crate::neck::grad_consistency_loss;
use crate::params::Params;
use crate::profile::{count_macs, count_multiplies};
use crate::reference;
use crate::reparam::{certify_equivalence, DEFAULT_CERT_TOL};
use crate::sampling::{random_conv, random_tensor, rng, uniform_vec, SeededRng};
use crate::tensor::{conv2d, group_norm, resample, sobel_grad, ConvLayer, GroupNorm, Resample, Shape, Tensor};

/// Tolerance between an optimized kernel and its reference oracle.
pub const ORACLE_TOL: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &'static str, failures: Vec<String>, ok: String) -> Self {
        match failures.first() {
            None => SuiteResult {
                name,
                pass: true,
                detail: ok,
            },
            Some(first) => SuiteResult {
                name,
                pass: false,
                detail: format!("{} failure(s); first: {first}", failures.len()),
            },
        }
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

pub struct SelfcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl SelfcheckReport {
    pub fn all_pass(&self) -> bool {
        self.suites.iter().all(|s| s.pass)
    }
}

impl fmt::Display for SelfcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        let passed = self.suites.iter().filter(|s| s.pass).count();
        write!(f, "selfcheck: {passed}/{} suites passed", self.suites.len())
    }
}

pub struct SelfcheckOptions {
    /// Random inputs per re-parameterized block certificate.
    pub block_trials: usize,
    /// Random images for the whole-model certificate.
    pub model_trials: usize,
    /// Randomized shapes per kernel oracle.
    pub oracle_cases: usize,
    pub seed: u64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            block_trials: 100,
            model_trials: 10,
            oracle_cases: 60,
            seed: 0,
        }
    }
}

/// Runs every suite against a train-form `model`. `tamper` is applied to the
/// fused copy before certification; it exists to prove the certificates can fail.
pub fn run(model: &Model, opts: &SelfcheckOptions, tamper: Option<&dyn Fn(&mut Model)>) -> Result<SelfcheckReport> {
    let mut deploy = model.fuse()?;
    if let Some(t) = tamper {
        t(&mut deploy);
    }
    let seed = opts.seed;
    let suites = vec![
        conv_oracle(opts.oracle_cases, seed),
        group_norm_oracle(opts.oracle_cases, seed + 1),
        sobel_oracle(opts.oracle_cases, seed + 2),
        block_certificates(model, &deploy, opts.block_trials, seed + 3)?,
        model_certificate(model, &deploy, opts.model_trials, seed + 4)?,
        gate_ranges(model, seed + 5)?,
        ema_contractivity(model, seed + 6)?,
        tfe_residual_bound(model, seed + 7)?,
        lmsh_convexity(model, seed + 8)?,
        pyramid_strides(&model.config)?,
        resample_identity(seed + 9),
        loss_cases(model, seed + 10)?,
        profiler_spot_checks(model, &deploy)?,
        config_rejection(),
    ];
    Ok(SelfcheckReport { suites })
}

fn random_layer(r: &mut SeededRng) -> ConvLayer {
    let k = [1, 3, 5][r.random_range(0..3)];
    let groups = [1, 2, 3][r.random_range(0..3)];
    let depthwise = r.random_bool(0.3);
    let (in_ch, out_ch, groups) = if depthwise {
        let c = r.random_range(1..=6);
        (c, c, c)
    } else {
        (groups * r.random_range(1..=3), groups * r.random_range(1..=3), groups)
    };
    let mut layer = ConvLayer::new(in_ch, out_ch, k)
        .with_groups(groups)
        .with_stride(r.random_range(1..=2))
        .with_padding(r.random_range(0..=k / 2 + 1));
    layer.dilation = if k > 1 && r.random_bool(0.2) { 2 } else { 1 };
    if r.random_bool(0.5) {
        layer = layer.with_bias();
    }
    random_conv(r, layer)
}

/// Optimized convolution against the nested-loop oracle on random
/// grouped, depthwise, strided, padded and dilated layers.
pub fn conv_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let (mut failures, mut worst, mut done) = (Vec::new(), 0.0f32, 0);
    while done < cases {
        let layer = random_layer(&mut r);
        let span = layer.dilation * (layer.kh - 1) + 1;
        let (h, w) = (r.random_range(span..span + 9), r.random_range(span..span + 9));
        let n = r.random_range(1..=2);
        let x = random_tensor(&mut r, Shape::new(n, layer.in_ch, h, w));
        let fast = match conv2d(&x, &layer) {
            Ok(y) => y,
            Err(e) => {
                failures.push(e.to_string());
                done += 1;
                continue;
            }
        };
        let (slow, _) = reference::conv2d_counting(&x, &layer);
        match fast.max_abs_diff(&slow) {
            Ok(d) if d <= ORACLE_TOL => worst = worst.max(d),
            Ok(d) => failures.push(format!(
                "{} k{} g{} s{}: diff {d:e}",
                x.shape(),
                layer.kh,
                layer.groups,
                layer.stride
            )),
            Err(e) => failures.push(e.to_string()),
        }
        done += 1;
    }
    SuiteResult::new("conv-oracle", failures, format!("{cases} shapes, max diff {worst:e}"))
}

pub fn group_norm_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let (mut failures, mut worst) = (Vec::new(), 0.0f32);
    for _ in 0..cases {
        let groups = r.random_range(1..=4);
        let c = groups * r.random_range(1..=4);
        let mut layer = GroupNorm::new(c, groups);
        layer.gamma = uniform_vec(&mut r, c, 0.5, 1.5);
        layer.beta = uniform_vec(&mut r, c, -0.5, 0.5);
        let shape = Shape::new(r.random_range(1..=2), c, r.random_range(1..9), r.random_range(1..9));
        let scale = [0.01, 1.0, 10.0][r.random_range(0..3)];
        let x = random_tensor(&mut r, shape).scale(scale);
        let d = group_norm(&x, &layer).and_then(|y| y.max_abs_diff(&reference::group_norm(&x, &layer)));
        match d {
            Ok(d) if d <= ORACLE_TOL => worst = worst.max(d),
            Ok(d) => failures.push(format!("{shape} groups {groups}: diff {d:e}")),
            Err(e) => failures.push(e.to_string()),
        }
    }
    SuiteResult::new(
        "groupnorm-oracle",
        failures,
        format!("{cases} shapes, max diff {worst:e}"),
    )
}

pub fn sobel_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let (mut failures, mut worst) = (Vec::new(), 0.0f32);
    for _ in 0..cases {
        let shape = Shape::new(
            r.random_range(1..=2),
            r.random_range(1..=4),
            r.random_range(1..10),
            r.random_range(1..10),
        );
        let x = random_tensor(&mut r, shape);
        let d = sobel_grad(&x).and_then(|y| y.max_abs_diff(&reference::sobel_grad(&x)));
        match d {
            Ok(d) if d <= ORACLE_TOL => worst = worst.max(d),
            Ok(d) => failures.push(format!("{shape}: diff {d:e}")),
            Err(e) => failures.push(e.to_string()),
        }
    }
    SuiteResult::new("sobel-oracle", failures, format!("{cases} shapes, max diff {worst:e}"))
}

fn block_certificates(model: &Model, deploy: &Model, trials: usize, seed: u64) -> Result<SuiteResult> {
    let reports = model.certify_blocks(deploy, model.config.input_size, trials, DEFAULT_CERT_TOL, seed)?;
    let worst = reports.iter().map(|r| r.max_abs_diff).fold(0.0f32, f32::max);
    let failures = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.pass)
        .map(|(i, r)| format!("block {i}: {r}"))
        .collect();
    Ok(SuiteResult::new(
        "fusion-blocks",
        failures,
        format!("{} blocks x {trials} inputs, max diff {worst:e}", reports.len()),
    ))
}

fn model_certificate(model: &Model, deploy: &Model, trials: usize, seed: u64) -> Result<SuiteResult> {
    let r = certify_equivalence(
        |x| model.forward(x, OutStride::S1),
        |x| deploy.forward(x, OutStride::S1),
        model.input_shape(),
        trials,
        DEFAULT_CERT_TOL,
        seed,
    )?;
    let failures = if r.pass { vec![] } else { vec![r.to_string()] };
    Ok(SuiteResult::new("fusion-model", failures, r.to_string()))
}

fn open_unit(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v > 0.0 && v < 1.0)
}

fn small_input(model: &Model) -> Shape {
    let side = model.config.input_size.min(128);
    Shape::new(1, 3, side, side)
}

/// Every sigmoid gate in the neck and head on random images of several
/// magnitudes, plus every EMA gate on random stage-width inputs.
fn gate_ranges(model: &Model, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for scale in [0.1f32, 1.0, 4.0] {
        let image = random_tensor(&mut r, small_input(model)).scale(scale);
        let t = model.trace(&image, OutStride::S8)?;
        let [a3, a4, a5] = &t.aligned;
        let ssff = model.neck.ssff.gates(a3, a4, a5)?;
        let [f3, f4, f5] = model.neck.ssff.forward(a3, a4, a5)?;
        let (_, tfe) = model.neck.tfe.forward_with_gates(&f3, &f4, &f5)?;
        let named = [
            ("ssff alpha3", &ssff.alpha[0]),
            ("ssff alpha4", &ssff.alpha[1]),
            ("ssff alpha5", &ssff.alpha[2]),
            ("ssff direction", &ssff.direction),
            ("tfe channel", &tfe.channel),
            ("tfe spatial", &tfe.spatial),
            ("lmsh gate", &t.head.gate),
        ];
        for (name, g) in named {
            checked += g.data().len();
            if !open_unit(g) {
                failures.push(format!("{name} at input scale {scale}"));
            }
        }
        for (i, ema) in emas(&model.backbone).enumerate() {
            let y = random_tensor(&mut r, Shape::new(1, ema.channels(), 8, 8)).scale(scale);
            let (_, g) = ema.forward_with_gates(&y)?;
            checked += g.channel.data().len() + g.spatial.data().len();
            if !open_unit(&g.channel) || !open_unit(&g.spatial) {
                failures.push(format!("ema {i} at input scale {scale}"));
            }
        }
    }
    Ok(SuiteResult::new(
        "gate-ranges",
        failures,
        format!("{checked} gate values in (0, 1)"),
    ))
}

fn emas(bb: &Backbone) -> impl Iterator<Item = &crate::backbone::Ema> {
    bb.blocks().flat_map(|b| b.units.iter().filter_map(|u| u.ema.as_ref()))
}

/// EMA rescales each element by a factor in `(0, 1)`.
fn ema_contractivity(model: &Model, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    let mut n = 0;
    for (i, ema) in emas(&model.backbone).enumerate() {
        for scale in [0.01f32, 1.0, 3.0] {
            let y = random_tensor(&mut r, Shape::new(1, ema.channels(), 7, 5)).scale(scale);
            let out = ema.forward(&y)?;
            let ok = out
                .data()
                .iter()
                .zip(y.data())
                .all(|(&o, &v)| v == 0.0 || (o / v > 0.0 && o / v < 1.0));
            if !ok || out.max_abs() > y.max_abs() {
                failures.push(format!("ema {i} at scale {scale}"));
            }
            n += 1;
        }
    }
    Ok(SuiteResult::new(
        "ema-contractivity",
        failures,
        format!("{n} EMA evaluations"),
    ))
}

/// `|TFE(F3) - F3| <= |F3| * max w * max M < |F3|` elementwise.
fn tfe_residual_bound(model: &Model, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let t = model.trace(&random_tensor(&mut r, small_input(model)), OutStride::S8)?;
    let [a3, a4, a5] = &t.aligned;
    let [f3, f4, f5] = model.neck.ssff.forward(a3, a4, a5)?;
    let (out, g) = model.neck.tfe.forward_with_gates(&f3, &f4, &f5)?;
    let k = g.channel.max_abs() * g.spatial.max_abs();
    let mut failures = Vec::new();
    for (&o, &f) in out.data().iter().zip(f3.data()) {
        if (o - f).abs() > f.abs() * k * (1.0 + 1e-6) {
            failures.push(format!("|{o} - {f}| exceeds bound factor {k}"));
        }
    }
    if k >= 1.0 {
        failures.push(format!("gate product {k} not below 1"));
    }
    Ok(SuiteResult::new(
        "tfe-residual-bound",
        failures,
        format!("bound factor {k:.4}"),
    ))
}

/// The fused head feature lies between `U3` and the deep mix elementwise.
fn lmsh_convexity(model: &Model, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let t = model.trace(&random_tensor(&mut r, small_input(model)), OutStride::S8)?;
    let h = &t.head;
    let mut failures = Vec::new();
    for ((&g, &u), &d) in h.g.data().iter().zip(h.u[0].data()).zip(h.deep.data()) {
        let slack = 1e-6 * (1.0 + u.abs().max(d.abs()));
        if g < u.min(d) - slack || g > u.max(d) + slack {
            failures.push(format!("G {g} outside [{u}, {d}]"));
        }
    }
    let recomputed = gate_blend(&h.gate, &h.u[0], &h.deep)?;
    if recomputed != h.g {
        failures.push("G differs from gate blend of its parts".into());
    }
    Ok(SuiteResult::new(
        "lmsh-convexity",
        failures,
        format!("{} elements", h.g.data().len()),
    ))
}

/// P3/P4/P5 at strides 8/16/32 for three input sizes; a non-multiple of 32 is refused.
pub fn pyramid_strides(cfg: &ModelConfig) -> Result<SuiteResult> {
    let bb = Backbone::new(cfg)?;
    let mut failures = Vec::new();
    for side in [64usize, 160, cfg.input_size] {
        let p = bb.forward(&Tensor::symbolic(Shape::new(1, 3, side, side)))?;
        for (stride, level) in [8usize, 16, 32].into_iter().zip(p.levels()) {
            let s = level.shape();
            if s.h * stride != side || s.w * stride != side {
                failures.push(format!("input {side}: level at stride {stride} is {s}"));
            }
        }
    }
    if bb.forward(&Tensor::symbolic(Shape::new(1, 3, 80, 80))).is_ok() {
        failures.push("80x80 input accepted".into());
    }
    Ok(SuiteResult::new(
        "pyramid-strides",
        failures,
        format!("inputs 64, 160, {}", cfg.input_size),
    ))
}

pub fn resample_identity(seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    for _ in 0..20 {
        let shape = Shape::new(1, r.random_range(1..4), r.random_range(1..12), r.random_range(1..12));
        let x = random_tensor(&mut r, shape);
        let back = resample(&x, Resample::NearestUp2).and_then(|u| resample(&u, Resample::MeanDown2));
        if back.as_ref().ok() != Some(&x) {
            failures.push(format!("{shape}"));
        }
    }
    SuiteResult::new("resample-identity", failures, "20 shapes, bitwise".into())
}

fn loss_cases(model: &Model, seed: u64) -> Result<SuiteResult> {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    let side = small_input(model).h;
    let image = random_tensor(&mut r, small_input(model)).map(|v| v.abs().min(1.0));
    let labels = (0..side * side).map(|i| ((i / side) * 4 / side) as u8).collect();
    let gt = LabelMap::new(side, side, labels)?;
    let aux = model.aux_losses(&image, &gt)?;
    for (name, v) in [("grad-consistency", aux.grad_consistency), ("edge", aux.edge)] {
        if !(v >= 0.0 && v.is_finite()) {
            failures.push(format!("{name} loss {v}"));
        }
    }
    let (Some(proj), Some(edge_head)) = (&model.neck.tfe.edge_proj, &model.head.edge_head) else {
        unreachable!("aux_losses succeeded");
    };
    let t = model.trace(&image, OutStride::S8)?;
    if grad_consistency_loss(&t.neck.f3, proj, &image, 0.0)? != 0.0 {
        failures.push("grad-consistency with zero weight".into());
    }
    if edge_loss(&t.head.g, edge_head, &gt, 0.0)? != 0.0 {
        failures.push("edge loss with zero weight".into());
    }
    // A flat image and flat features have matching (zero) gradients.
    let flat = Tensor::full(t.neck.f3.shape(), 0.5);
    let flat_image = Tensor::full(image.shape(), 0.25);
    if grad_consistency_loss(&flat, proj, &flat_image, 1.0)? != 0.0 {
        failures.push("grad-consistency nonzero on matching flat inputs".into());
    }
    let targets: Vec<f32> = (0..64).map(|i| (i % 2) as f32).collect();
    let confident: Vec<f32> = targets.iter().map(|&t| if t > 0.5 { 90.0 } else { -90.0 }).collect();
    if bce_with_logits(&confident, &targets) > 1e-30 {
        failures.push("BCE not ~0 on matching confident logits".into());
    }
    let noise = random_tensor(&mut r, Shape::new(1, 1, 8, 8)).scale(20.0);
    if bce_with_logits(noise.data(), &targets) < 0.0 {
        failures.push("BCE negative".into());
    }
    Ok(SuiteResult::new(
        "loss-cases",
        failures,
        format!("gc {:.4}, edge {:.4}", aux.grad_consistency, aux.edge),
    ))
}

fn profiler_spot_checks(model: &Model, deploy: &Model) -> Result<SuiteResult> {
    let mut failures = Vec::new();
    let layer = ConvLayer::pointwise(16, 32).with_bias();
    let (_, tally) = count_macs(|| conv2d(&Tensor::symbolic(Shape::new(1, 16, 80, 80)), &layer));
    if layer.param_count() != 544 || 2 * tally.total() != 6_553_600 {
        failures.push(format!(
            "1x1 conv: {} params, {} FLOPs",
            layer.param_count(),
            2 * tally.total()
        ));
    }
    let (train, fused) = (model.profile()?, deploy.profile()?);
    for p in [&train, &fused] {
        let (params, flops) = p.modules.iter().fold((0, 0), |(a, b), m| (a + m.params, b + m.flops));
        if params != p.total_params || flops != p.total_flops {
            failures.push(format!("{} totals are not the sum of modules", p.form));
        }
    }
    if fused.total_params > train.total_params || fused.total_flops > train.total_flops {
        failures.push("deploy form costs more than train form".into());
    }
    let tiny = Model::build(&ModelConfig::tiny(), 0)?.fuse()?;
    let image = random_tensor(&mut rng(1), tiny.input_shape());
    let (out, multiplies) = count_multiplies(|| tiny.forward(&image, OutStride::S1));
    out?;
    let symbolic = tiny.profile()?.total_flops;
    if symbolic != 2 * multiplies {
        failures.push(format!("symbolic {symbolic} FLOPs vs {multiplies} literal multiplies"));
    }
    if model.param_count() != train.total_params {
        failures.push("profile params differ from the parameter walk".into());
    }
    Ok(SuiteResult::new(
        "profiler",
        failures,
        format!(
            "train {} / deploy {} params, deploy {:.3} GFLOPs",
            train.total_params,
            fused.total_params,
            fused.total_flops as f64 / 1e9
        ),
    ))
}

fn config_rejection() -> SuiteResult {
    let mut failures = Vec::new();
    let empty = ModelConfig {
        stage_widths: vec![],
        ..ModelConfig::tiny()
    };
    if Model::build(&empty, 0).is_ok() {
        failures.push("model with no stages built".into());
    }
    let odd = ModelConfig {
        input_size: 630,
        ..ModelConfig::tiny()
    };
    match Model::build(&odd, 0) {
        Ok(_) => failures.push("input 630 accepted".into()),
        Err(e) if !e.to_string().contains("32") => failures.push(format!("unhelpful error: {e}")),
        Err(_) => {}
    }
    SuiteResult::new(
        "config-rejection",
        failures,
        "empty stages and input 630 refused".into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SelfcheckOptions {
        SelfcheckOptions {
            block_trials: 3,
            model_trials: 2,
            oracle_cases: 20,
            seed: 1,
        }
    }

    #[test]
    fn fresh_tiny_build_passes_every_suite() {
        let m = Model::build(&ModelConfig::tiny(), 3).unwrap();
        let report = run(&m, &quick(), None).unwrap();
        assert!(report.all_pass(), "{report}");
        assert_eq!(report.suites.len(), 14);
    }

    #[test]
    fn tampered_fusion_fails_the_certificate() {
        let m = Model::build(&ModelConfig::tiny(), 3).unwrap();
        let tamper = |d: &mut Model| {
            let units = &mut d.backbone.stages[1].block.units;
            units[0].rvb.expand.conv.weight[0] += 0.5;
        };
        let report = run(&m, &quick(), Some(&tamper)).unwrap();
        assert!(!report.all_pass());
        let failed: Vec<_> = report.suites.iter().filter(|s| !s.pass).map(|s| s.name).collect();
        assert_eq!(failed, ["fusion-blocks", "fusion-model"]);
    }
}
