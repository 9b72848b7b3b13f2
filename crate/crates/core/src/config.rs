//! Model hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of RVB-EMA units inside every C2f-Pro stage.
pub const UNITS_PER_STAGE: usize = 3;
/// Pyramid taps are the outputs of the last three backbone stages.
pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub width_multiplier: f32,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    /// Neck width after channel alignment.
    pub c_f: usize,
    /// Head width.
    pub c_h: usize,
    /// Shared depthwise-separable blocks in the head.
    pub head_blocks: usize,
    pub ema_reduction: usize,
    pub spatial_k: usize,
    pub gn_groups: usize,
    pub lambda_gc: f32,
    pub lambda_edge: f32,
    pub num_classes: usize,
    pub min_area: usize,
    pub ema_strides: Vec<usize>,
    pub edge_gate_p3: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 640,
            width_multiplier: 1.25,
            stem_width: 16,
            stage_widths: vec![32, 64, 128, 256],
            c_f: 96,
            c_h: 224,
            head_blocks: 2,
            ema_reduction: 4,
            spatial_k: 5,
            gn_groups: 8,
            lambda_gc: 0.1,
            lambda_edge: 0.1,
            num_classes: 4,
            min_area: 16,
            ema_strides: vec![16, 32],
            edge_gate_p3: false,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests: narrow widths, 64x64 input.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 64,
            width_multiplier: 1.0,
            stem_width: 8,
            stage_widths: vec![8, 16, 16, 32],
            c_f: 16,
            c_h: 16,
            gn_groups: 4,
            min_area: 4,
            ..Self::default()
        }
    }

    /// Channel count after applying the width multiplier, rounded to a multiple of 8.
    pub fn scaled(&self, width: usize) -> usize {
        let w = (width as f32 * self.width_multiplier / 8.0).round() as usize * 8;
        w.max(8)
    }

    pub fn stem_channels(&self) -> usize {
        self.scaled(self.stem_width)
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stage_widths.iter().map(|&w| self.scaled(w)).collect()
    }

    /// Output stride of backbone stage `i` (the stem already halves the input).
    pub fn stage_stride(&self, i: usize) -> usize {
        4 << i
    }

    pub fn pyramid_channels(&self) -> [usize; 3] {
        let s = self.stage_channels();
        let n = s.len();
        [s[n - 3], s[n - 2], s[n - 1]]
    }

    pub fn ema_at(&self, stride: usize) -> bool {
        self.ema_strides.contains(&stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config(
                "input_size",
                format!("{} must be a positive multiple of 32", self.input_size),
            ));
        }
        if self.stage_widths.is_empty() {
            return Err(Error::config("stage_widths", "a model needs stages; got an empty list"));
        }
        if self.stage_widths.len() != 4 {
            return Err(Error::config(
                "stage_widths",
                format!(
                    "exactly 4 stages are needed for strides 4/8/16/32, got {}",
                    self.stage_widths.len()
                ),
            ));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::config("width_multiplier", "must be a positive finite number"));
        }
        let counts: [(&'static str, usize); 10] = [
            ("stem_width", self.stem_width),
            ("c_f", self.c_f),
            ("c_h", self.c_h),
            ("head_blocks", self.head_blocks),
            ("ema_reduction", self.ema_reduction),
            ("spatial_k", self.spatial_k),
            ("gn_groups", self.gn_groups),
            ("num_classes", self.num_classes),
            ("min_area", self.min_area),
            ("stage_widths", self.stage_widths.iter().copied().min().unwrap_or(0)),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.spatial_k % 2 == 0 {
            return Err(Error::config("spatial_k", format!("{} must be odd", self.spatial_k)));
        }
        for (field, c) in [("c_f", self.c_f), ("c_h", self.c_h)] {
            if c % self.gn_groups != 0 {
                return Err(Error::config(
                    field,
                    format!("{c} not divisible by gn_groups {}", self.gn_groups),
                ));
            }
            if c % self.ema_reduction != 0 {
                return Err(Error::config(
                    field,
                    format!("{c} not divisible by ema_reduction {}", self.ema_reduction),
                ));
            }
        }
        for c in self.stage_channels() {
            if (c / 2) % self.ema_reduction != 0 {
                return Err(Error::config(
                    "ema_reduction",
                    format!("unit width {} not divisible by {}", c / 2, self.ema_reduction),
                ));
            }
        }
        if let Some(s) = self.ema_strides.iter().find(|s| !PYRAMID_STRIDES.contains(s)) {
            return Err(Error::config("ema_strides", format!("{s} is not one of 8, 16, 32")));
        }
        if self.num_classes > 255 {
            return Err(Error::config("num_classes", "class ids must fit in one byte"));
        }
        if !(self.lambda_gc >= 0.0 && self.lambda_edge >= 0.0) {
            return Err(Error::config("lambda_gc", "loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "width_multiplier = {}", self.width_multiplier);
        let _ = writeln!(s, "stem_width = {}", self.stem_width);
        let _ = writeln!(s, "stage_widths = {}", list(&self.stage_widths));
        let _ = writeln!(s, "c_f = {}", self.c_f);
        let _ = writeln!(s, "c_h = {}", self.c_h);
        let _ = writeln!(s, "head_blocks = {}", self.head_blocks);
        let _ = writeln!(s, "ema_reduction = {}", self.ema_reduction);
        let _ = writeln!(s, "spatial_k = {}", self.spatial_k);
        let _ = writeln!(s, "gn_groups = {}", self.gn_groups);
        let _ = writeln!(s, "lambda_gc = {}", self.lambda_gc);
        let _ = writeln!(s, "lambda_edge = {}", self.lambda_edge);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "min_area = {}", self.min_area);
        let _ = writeln!(s, "ema_strides = {}", list(&self.ema_strides));
        let _ = writeln!(s, "edge_gate_p3 = {}", self.edge_gate_p3);
        s
    }

    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep
    /// their defaults, unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    "config",
                    format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
                )
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(field: &'static str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(field, format!("cannot parse `{v}`")))
        }
        fn list(field: &'static str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(field, s))
                .collect()
        }
        match key {
            "input_size" => self.input_size = num("input_size", value)?,
            "width_multiplier" => self.width_multiplier = num("width_multiplier", value)?,
            "stem_width" => self.stem_width = num("stem_width", value)?,
            "stage_widths" => self.stage_widths = list("stage_widths", value)?,
            "c_f" => self.c_f = num("c_f", value)?,
            "c_h" => self.c_h = num("c_h", value)?,
            "head_blocks" => self.head_blocks = num("head_blocks", value)?,
            "ema_reduction" => self.ema_reduction = num("ema_reduction", value)?,
            "spatial_k" => self.spatial_k = num("spatial_k", value)?,
            "gn_groups" => self.gn_groups = num("gn_groups", value)?,
            "lambda_gc" => self.lambda_gc = num("lambda_gc", value)?,
            "lambda_edge" => self.lambda_edge = num("lambda_edge", value)?,
            "num_classes" => self.num_classes = num("num_classes", value)?,
            "min_area" => self.min_area = num("min_area", value)?,
            "ema_strides" => self.ema_strides = list("ema_strides", value)?,
            "edge_gate_p3" => self.edge_gate_p3 = num("edge_gate_p3", value)?,
            _ => return Err(Error::config("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}
