//! Seeded parameter initialization.

use rand::Rng;

use crate::params::{ParamKind, Params};

/// Fills every parameter of `p` in visiting order.
///
/// Weights are `U(-b, b)` with `b = sqrt(6 / fan_in)`; biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// using the most recent weight's fan-in. Frozen normalization gets scales and
/// variances in `[0.8, 1.2)` and shifts and means in `[-0.1, 0.1)`.
pub fn randomize<P: Params + ?Sized>(p: &mut P, rng: &mut impl Rng) {
    let mut fan_in = 1usize;
    p.visit_mut("", &mut |_, shape, data, kind| {
        let (lo, hi) = match kind {
            ParamKind::Weight => {
                fan_in = shape[1..].iter().product::<usize>().max(1);
                let b = (6.0 / fan_in as f32).sqrt();
                (-b, b)
            }
            ParamKind::Bias => {
                let b = 1.0 / (fan_in as f32).sqrt();
                (-b, b)
            }
            ParamKind::NormScale | ParamKind::NormVar => (0.8, 1.2),
            ParamKind::NormShift | ParamKind::NormMean => (-0.1, 0.1),
        };
        data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    });
}

/// Sets every parameter to zero, including normalization scales.
pub fn zero<P: Params + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, _, data, kind| {
        let v = if kind == ParamKind::NormVar { 1.0 } else { 0.0 };
        data.iter_mut().for_each(|x| *x = v);
    });
}
