//! End-to-end inference on images and the latency harness.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::head::{class_map, extract_instances, Instance, LabelMap, OutStride};
use crate::model::Model;
use crate::pnm::Image;
use crate::sampling::{random_tensor, rng};
use crate::tensor::{Shape, Tensor};

pub const WARMUP_RUNS: usize = 5;
pub const MIN_BENCH_RUNS: usize = 10;

/// Nearest-neighbour resize of an RGB image to `size x size`, scaled to
/// `[0, 1]`, as a `1 x 3 x size x size` tensor.
pub fn preprocess(img: &Image, size: usize) -> Result<Tensor> {
    if img.channels != 3 {
        return Err(Error::Image(format!(
            "expected an RGB image, got {} channels",
            img.channels
        )));
    }
    let (h, w) = (img.height, img.width);
    Ok(Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let (sy, sx) = (y * h / size, x * w / size);
        img.data[(sy * w + sx) * 3 + c] as f32 / 255.0
    }))
}

pub struct Prediction {
    /// Class ids at the original image resolution.
    pub mask: LabelMap,
    pub instances: Vec<Instance>,
}

impl Prediction {
    pub fn mask_image(&self) -> Image {
        Image {
            width: self.mask.w,
            height: self.mask.h,
            channels: 1,
            data: self.mask.labels.clone(),
        }
    }

    /// A JSON array with one instance object per line.
    pub fn instances_json(&self) -> String {
        if self.instances.is_empty() {
            return "[]".into();
        }
        let rows: Vec<String> = self
            .instances
            .iter()
            .map(|i| format!("  {}", serde_json::to_string(i).expect("instances serialize")))
            .collect();
        format!("[\n{}\n]", rows.join(",\n"))
    }
}

pub fn infer(model: &Model, img: &Image) -> Result<Prediction> {
    let size = model.config.input_size;
    let logits = model.forward(&preprocess(img, size)?, OutStride::S1)?;
    let mask = class_map(&logits)?.resize_nearest(img.height, img.width);
    let instances = extract_instances(&mask, model.config.min_area);
    Ok(Prediction { mask, instances })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub form: String,
    pub input_size: usize,
    pub runs: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub fps: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "bench: form {0} input {1}x{1} runs {2} median {3:.3} ms p90 {4:.3} ms fps {5:.2}",
            self.form, self.input_size, self.runs, self.median_ms, self.p90_ms, self.fps
        )
    }
}

/// Median and nearest-rank 90th percentile of `samples` (milliseconds).
pub fn summarize(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let rank = (0.9 * n as f64).ceil() as usize;
    (median, samples[rank.clamp(1, n) - 1])
}

/// Times batch-1 forwards at the configured input size on a single worker
/// thread, after [`WARMUP_RUNS`] untimed runs.
pub fn bench(model: &Model, runs: usize, seed: u64) -> Result<BenchReport> {
    if runs < MIN_BENCH_RUNS {
        return Err(Error::contract(
            "bench",
            format!("runs must be >= {MIN_BENCH_RUNS}, got {runs}"),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::contract("bench", e.to_string()))?;
    let image = random_tensor(&mut rng(seed), model.input_shape()).map(|v| v.abs().min(1.0));
    let samples = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..WARMUP_RUNS {
            model.forward(&image, OutStride::S1)?;
        }
        (0..runs)
            .map(|_| {
                let t = Instant::now();
                model.forward(&image, OutStride::S1)?;
                Ok(t.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    })?;
    let (median_ms, p90_ms) = summarize(samples);
    Ok(BenchReport {
        form: model.form().to_string(),
        input_size: model.config.input_size,
        runs,
        median_ms,
        p90_ms,
        fps: 1e3 / median_ms,
    })
}
