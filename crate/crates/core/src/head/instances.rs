//! Label maps, per-pixel class decisions and connected-component instances.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dense `h x w` map of class ids, 0 meaning background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || labels.len() != h * w {
            return Err(Error::contract(
                "label map",
                format!("{} labels for a {h}x{w} map", labels.len()),
            ));
        }
        Ok(LabelMap { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Self {
        LabelMap {
            h,
            w,
            labels: vec![label; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    /// Most frequent label in every `factor x factor` block; ties go to the
    /// smaller id. Partial blocks at the border vote with what they have.
    pub fn majority_downsample(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.h.div_ceil(factor), self.w.div_ceil(factor));
        let mut labels = Vec::with_capacity(h * w);
        let mut counts = [0u32; 256];
        for by in 0..h {
            for bx in 0..w {
                counts.fill(0);
                for y in by * factor..((by + 1) * factor).min(self.h) {
                    for x in bx * factor..((bx + 1) * factor).min(self.w) {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let best = (0..256).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0);
                labels.push(best as u8);
            }
        }
        LabelMap { h, w, labels }
    }

    /// Nearest-neighbour resize to `h x w`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> LabelMap {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = y * self.h / h;
            for x in 0..w {
                labels.push(self.get(sy, x * self.w / w));
            }
        }
        LabelMap { h, w, labels }
    }

    /// 1 where some 4-neighbour carries a different label, else 0.
    pub fn edges(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let l = self.get(y, x);
                let differs = (y > 0 && self.get(y - 1, x) != l)
                    || (y + 1 < self.h && self.get(y + 1, x) != l)
                    || (x > 0 && self.get(y, x - 1) != l)
                    || (x + 1 < self.w && self.get(y, x + 1) != l);
                if differs {
                    out[y * self.w + x] = 1.0;
                }
            }
        }
        out
    }
}

/// Per-pixel decision for sample 0 of `logits`: `1 + argmax` when the largest
/// logit is positive, background otherwise. Ties go to the lower class.
pub fn class_map(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    if logits.is_symbolic() {
        return Err(Error::contract("class_map", "symbolic logits carry no values"));
    }
    if s.c > 255 {
        return Err(Error::contract(
            "class_map",
            format!("{} classes do not fit one byte", s.c),
        ));
    }
    let mut labels = vec![0u8; s.plane()];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = (f32::NEG_INFINITY, 0usize);
        for c in 0..s.c {
            let v = logits.plane(0, c)[i];
            if v > best.0 {
                best = (v, c);
            }
        }
        if best.0 > 0.0 {
            *label = best.1 as u8 + 1;
        }
    }
    LabelMap::new(s.h, s.w, labels)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub class: u8,
    pub area: usize,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    /// Row-major pixel indices, ascending.
    #[serde(skip)]
    pub pixels: Vec<usize>,
}

/// 4-connected components of every non-background class with at least
/// `min_area` pixels, ordered by class, then area descending, then the
/// raster position of the first pixel.
pub fn extract_instances(map: &LabelMap, min_area: usize) -> Vec<Instance> {
    let comp = component_ids(map);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &c) in comp.iter().enumerate() {
        if let Some(c) = c {
            if c == groups.len() {
                groups.push(Vec::new());
            }
            groups[c].push(i);
        }
    }
    let mut out: Vec<Instance> = groups
        .into_iter()
        .filter(|p| p.len() >= min_area.max(1))
        .map(|pixels| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &i in &pixels {
                let (y, x) = (i / map.w, i % map.w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            Instance {
                class: map.labels[pixels[0]],
                area: pixels.len(),
                bbox: [x0, y0, x1, y1],
                pixels,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(b.area.cmp(&a.area))
            .then(a.pixels[0].cmp(&b.pixels[0]))
    });
    out
}

/// Two-pass union-find labelling. Component ids are dense and numbered in
/// order of each component's first pixel; background pixels get `None`.
fn component_ids(map: &LabelMap) -> Vec<Option<usize>> {
    let n = map.h * map.w;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for y in 0..map.h {
        for x in 0..map.w {
            let i = y * map.w + x;
            let l = map.labels[i];
            if l == 0 {
                continue;
            }
            for j in [(x > 0).then(|| i - 1), (y > 0).then(|| i - map.w)]
                .into_iter()
                .flatten()
            {
                if map.labels[j] == l {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut dense = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            if map.labels[i] == 0 {
                return None;
            }
            let root = find(&mut parent, i);
            if dense[root] == usize::MAX {
                dense[root] = next;
                next += 1;
            }
            Some(dense[root])
        })
        .collect()
}
