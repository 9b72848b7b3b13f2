use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-5;

/// Group normalization with per-channel affine parameters. Statistics are
/// computed per sample, so results never depend on batch composition.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        GroupNorm {
            groups,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> u64 {
        (self.gamma.len() + self.beta.len()) as u64
    }

    fn validate(&self, shape: Shape) -> Result<()> {
        let op = "group_norm";
        if self.groups == 0 || shape.c % self.groups != 0 {
            return Err(Error::contract(
                op,
                format!("{} channels not divisible by {} groups", shape.c, self.groups),
            ));
        }
        if self.gamma.len() != shape.c || self.beta.len() != shape.c {
            return Err(Error::shape(
                op,
                format!("affine params for {} channels", self.gamma.len()),
                shape,
            ));
        }
        if self.eps <= 0.0 {
            return Err(Error::contract(op, format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

pub fn group_norm(x: &Tensor, layer: &GroupNorm) -> Result<Tensor> {
    let shape = x.shape();
    layer.validate(shape)?;
    if x.is_symbolic() {
        return Ok(x.clone());
    }
    let cpg = shape.c / layer.groups;
    let span = cpg * shape.plane();
    let mut out = x.data().to_vec();
    for n in 0..shape.n {
        for g in 0..layer.groups {
            let start = (n * shape.c + g * cpg) * shape.plane();
            let chunk = &mut out[start..start + span];
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = chunk
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / span as f64;
            let inv = 1.0 / (var + layer.eps as f64).sqrt();
            let mean = mean as f32;
            for (i, plane) in chunk.chunks_mut(shape.plane()).enumerate() {
                let c = g * cpg + i;
                let a = (inv * layer.gamma[c] as f64) as f32;
                let b = layer.beta[c];
                plane.iter_mut().for_each(|v| *v = (*v - mean) * a + b);
            }
        }
    }
    Tensor::new(shape, out)
}
