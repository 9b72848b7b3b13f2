//! Acceptance criteria 1-7 on the default configuration. Runs as a plain
//! binary so every criterion prints its own PASS/FAIL line.

use std::collections::VecDeque;
use std::process::ExitCode;
use std::time::Instant;

use lmsf_core::head::{extract_instances, LabelMap};
use lmsf_core::pnm::Image;
use lmsf_core::reparam::certify_equivalence;
use lmsf_core::runtime::{bench, infer};
use lmsf_core::sampling::rng;
use lmsf_core::selfcheck::{self, SelfcheckOptions};
use lmsf_core::weights::WeightStore;
use lmsf_core::{Model, ModelConfig, OutStride};
use rand::Rng;

const SEED: u64 = 2024;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fused_pair() -> (Model, Model) {
    let train = Model::build(&ModelConfig::default(), SEED).expect("default config builds");
    let deploy = train.fuse().expect("default model fuses");
    (train, deploy)
}

fn reparam_equivalence(train: &Model, deploy: &Model) -> Outcome {
    let blocks = train
        .certify_blocks(deploy, train.config.input_size, 100, 1e-4, SEED)
        .unwrap();
    let whole = certify_equivalence(
        |x| train.forward(x, OutStride::S1),
        |x| deploy.forward(x, OutStride::S1),
        train.input_shape(),
        10,
        1e-4,
        SEED + 100,
    )
    .unwrap();
    let worst = blocks.iter().map(|r| r.max_abs_diff).fold(0.0f32, f32::max);
    let pass = blocks.iter().all(|r| r.pass) && whole.pass;
    outcome(
        pass,
        format!(
            "{} blocks x 100 inputs max diff {worst:e}; whole model x 10 images max diff {:e} (tol 1e-4)",
            blocks.len(),
            whole.max_abs_diff
        ),
    )
}

fn efficiency_envelope(deploy: &Model) -> Outcome {
    let p = deploy.profile().unwrap();
    let params = p.total_params as f64;
    let flops = p.total_flops as f64;
    let pass = (1.6e6..=2.0e6).contains(&params) && (7.9e9..=9.7e9).contains(&flops) && p.input_size == 640;
    outcome(
        pass,
        format!(
            "deploy @640: {:.3} M params in [1.6, 2.0], {:.3} GFLOPs in [7.9, 9.7]",
            params / 1e6,
            flops / 1e9
        ),
    )
}

fn fusion_speedup(train: &Model, deploy: &Model) -> Outcome {
    let t = bench(train, 50, SEED).unwrap();
    let d = bench(deploy, 50, SEED).unwrap();
    outcome(
        d.median_ms <= 1.05 * t.median_ms,
        format!(
            "median train {:.2} ms, deploy {:.2} ms over 50 runs (limit 1.05x)",
            t.median_ms, d.median_ms
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let suites = [
        selfcheck::conv_oracle(60, SEED),
        selfcheck::group_norm_oracle(60, SEED + 1),
        selfcheck::sobel_oracle(60, SEED + 2),
    ];
    let detail = suites
        .iter()
        .map(|s| format!("{}: {}", s.name, s.detail))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(suites.iter().all(|s| s.pass), detail)
}

fn invariant_battery(train: &Model) -> Outcome {
    let opts = SelfcheckOptions {
        seed: SEED,
        ..SelfcheckOptions::default()
    };
    let report = selfcheck::run(train, &opts, None).unwrap();
    let failed: Vec<_> = report
        .suites
        .iter()
        .filter(|s| !s.pass)
        .map(|s| s.to_string())
        .collect();
    let passed = report.suites.len() - failed.len();
    let detail = if failed.is_empty() {
        format!("{passed}/{} suites", report.suites.len())
    } else {
        format!("{passed}/{} suites; {}", report.suites.len(), failed.join("; "))
    };
    outcome(failed.is_empty(), detail)
}

fn determinism_and_persistence(train: &Model) -> Outcome {
    let cfg = ModelConfig::default();
    let a = Model::build(&cfg, SEED).unwrap().to_store().to_bytes().unwrap();
    let b = train.to_store().to_bytes().unwrap();
    let build_ok = a == b;

    let dir = tempfile::tempdir().unwrap();
    let mut round_trip_ok = true;
    for model in [train.clone(), train.fuse().unwrap()] {
        let path = dir.path().join(format!("{}.lmsf", model.form()));
        let store = model.to_store();
        store.save(&path).unwrap();
        let loaded = WeightStore::load(&path).unwrap();
        let reloaded = Model::from_store(&loaded).unwrap().to_store();
        round_trip_ok &= loaded == store && reloaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    }

    let mut r = rng(SEED);
    let (w, h) = (333, 250);
    let img = Image::new(w, h, 3, (0..w * h * 3).map(|_| r.random::<u8>()).collect()).unwrap();
    let deploy = train.fuse().unwrap();
    let first = infer(&deploy, &img).unwrap().mask_image().to_bytes().unwrap();
    let second = infer(&deploy, &img).unwrap().mask_image().to_bytes().unwrap();
    let infer_ok = first == second;

    outcome(
        build_ok && round_trip_ok && infer_ok,
        format!("build bitwise {build_ok}, save/load bitwise {round_trip_ok}, repeated infer mask bytes {infer_ok}"),
    )
}

/// Breadth-first flood fill over 4-neighbours: `(class, pixels)` per component,
/// pixels ascending.
fn flood_fill(map: &LabelMap) -> Vec<(u8, Vec<usize>)> {
    let (h, w) = (map.h, map.w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let class = map.labels[start];
        if class == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = (p / w, p % w);
            let mut next = Vec::with_capacity(4);
            if y > 0 {
                next.push(p - w);
            }
            if y + 1 < h {
                next.push(p + w);
            }
            if x > 0 {
                next.push(p - 1);
            }
            if x + 1 < w {
                next.push(p + 1);
            }
            for q in next {
                if !seen[q] && map.labels[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push((class, pixels));
    }
    out
}

fn bbox(pixels: &[usize], w: usize) -> [usize; 4] {
    let xs = pixels.iter().map(|p| p % w);
    let ys = pixels.iter().map(|p| p / w);
    [
        xs.clone().min().unwrap(),
        ys.clone().min().unwrap(),
        xs.max().unwrap(),
        ys.max().unwrap(),
    ]
}

fn instance_extraction() -> Outcome {
    let mut r = rng(SEED);
    let mut mismatches = 0;
    let mut invariant_breaks = 0;
    let mut components = 0;
    for i in 0..100 {
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let classes = r.random_range(1..=4u8);
        let fg = [0.2, 0.5, 0.8][i % 3];
        let labels = (0..h * w)
            .map(|_| {
                if r.random_bool(fg) {
                    r.random_range(1..=classes)
                } else {
                    0
                }
            })
            .collect();
        let map = LabelMap::new(h, w, labels).unwrap();

        let mut oracle = flood_fill(&map);
        oracle.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.len().cmp(&a.1.len())).then(a.1[0].cmp(&b.1[0])));
        let got = extract_instances(&map, 1);
        components += got.len();
        let agree = got.len() == oracle.len()
            && got.iter().zip(&oracle).all(|(g, (class, pixels))| {
                let mut gp = g.pixels.clone();
                gp.sort_unstable();
                g.class == *class && g.area == pixels.len() && gp == *pixels && g.bbox == bbox(pixels, w)
            });
        mismatches += usize::from(!agree);

        let mut owner = vec![0usize; h * w];
        for inst in &got {
            for &p in &inst.pixels {
                owner[p] += 1;
            }
        }
        let disjoint_and_covering = owner.iter().zip(&map.labels).all(|(&o, &l)| o == usize::from(l != 0));
        let min_area = r.random_range(2..8);
        let filtered = extract_instances(&map, min_area);
        let kept = got.iter().filter(|g| g.area >= min_area).count();
        invariant_breaks += usize::from(!disjoint_and_covering || filtered.len() != kept);
    }
    outcome(
        mismatches == 0 && invariant_breaks == 0,
        format!(
            "100 maps, {components} components; oracle mismatches {mismatches}, invariant breaks {invariant_breaks}"
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let (train, deploy) = fused_pair();
    let criteria: [Criterion; 7] = [
        (
            "re-parameterization equivalence",
            Box::new(|| reparam_equivalence(&train, &deploy)),
        ),
        ("efficiency envelope", Box::new(|| efficiency_envelope(&deploy))),
        ("fusion speedup ordering", Box::new(|| fusion_speedup(&train, &deploy))),
        ("kernel oracle equivalence", Box::new(oracle_equivalence)),
        ("invariant battery", Box::new(|| invariant_battery(&train))),
        (
            "determinism and persistence",
            Box::new(|| determinism_and_persistence(&train)),
        ),
        ("instance extraction", Box::new(instance_extraction)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {tag} {name}: {} [{:.1}s]",
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/7 criteria passed in {:.1}s",
        7 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
