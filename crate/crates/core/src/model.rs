//! The assembled network: backbone, LMFE alignment, neck and head.

use crate::backbone::{Backbone, FeaturePyramid, Lmfe};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{edge_loss, HeadFeatures, LabelMap, Lmsh, OutStride};
use crate::init::randomize;
use crate::neck::{grad_consistency_loss, Neck, NeckOutput};
use crate::params::{impl_params, Params};
use crate::profile::{count_macs, section, ModuleProfile, ProfileReport};
use crate::reparam::{certify_equivalence, EquivalenceReport, Form};
use crate::sampling::{random_tensor, rng};
use crate::tensor::{Shape, Tensor};
use crate::weights::{Entry, WeightStore};

pub const CALIBRATION_SIZE: usize = 256;

/// Scale applied to the last layer of every residual branch after
/// calibration, so a fresh model starts close to its identity paths.
pub const RESIDUAL_BRANCH_SCALE: f32 = 0.2;

/// Top-level modules in forward order; also the profiler's section names.
pub const MODULES: [&str; 5] = ["backbone", "lmfe", "ssff", "tfe", "lmsh"];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub lmfe: Vec<Lmfe>,
    pub neck: Neck,
    pub head: Lmsh,
}

impl_params!(Model {
    backbone,
    lmfe,
    neck,
    head
});

/// Everything one forward pass produces on the way to the logits.
pub struct Trace {
    pub pyramid: FeaturePyramid,
    pub aligned: [Tensor; 3],
    pub neck: NeckOutput,
    pub head: HeadFeatures,
    pub logits: Tensor,
}

/// Auxiliary training-loss values for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxLosses {
    pub grad_consistency: f32,
    pub edge: f32,
}

impl Model {
    /// Train-form model with all weights zero (normalization variances one).
    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let lmfe = cfg
            .pyramid_channels()
            .iter()
            .map(|&c| Lmfe::new(c, cfg.c_f, cfg.gn_groups))
            .collect();
        let mut m = Model {
            config: cfg.clone(),
            backbone: Backbone::new(cfg)?,
            lmfe,
            neck: Neck::new(cfg),
            head: Lmsh::new(cfg.c_f, cfg.c_h, cfg.head_blocks, cfg.gn_groups, cfg.num_classes),
        };
        crate::init::zero(&mut m);
        Ok(m)
    }

    /// Deterministic train-form model: the same `(cfg, seed)` gives bitwise
    /// identical weights.
    ///
    /// Weights are He-uniform; the backbone's frozen normalization statistics
    /// are then measured on one seeded `N(0, 1)` image of side
    /// `min(input_size, CALIBRATION_SIZE)` so activations stay at unit scale.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(cfg)?;
        let mut r = rng(seed);
        randomize(&mut m, &mut r);
        let side = cfg.input_size.min(CALIBRATION_SIZE);
        let image = random_tensor(&mut r, Shape::new(1, 3, side, side));
        m.backbone.calibrate(&image)?;
        m.backbone.scale_residual_branches(RESIDUAL_BRANCH_SCALE);
        m.head.shared.scale_residual_branches(RESIDUAL_BRANCH_SCALE);
        Ok(m)
    }

    pub fn form(&self) -> Form {
        self.backbone.form()
    }

    /// Deploy form: fused re-parameterizable blocks, no auxiliary heads.
    pub fn fuse(&self) -> Result<Self> {
        Ok(Model {
            config: self.config.clone(),
            backbone: self.backbone.fuse()?,
            lmfe: self.lmfe.clone(),
            neck: self.neck.without_aux(),
            head: self.head.without_aux(),
        })
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(1, 3, self.config.input_size, self.config.input_size)
    }

    pub fn trace(&self, image: &Tensor, stride: OutStride) -> Result<Trace> {
        let pyramid = section("backbone", || self.backbone.forward(image))?;
        let aligned = section("lmfe", || -> Result<[Tensor; 3]> {
            let [p3, p4, p5] = pyramid.levels();
            Ok([
                self.lmfe[0].forward(p3)?,
                self.lmfe[1].forward(p4)?,
                self.lmfe[2].forward(p5)?,
            ])
        })?;
        let neck = self.neck.forward([&aligned[0], &aligned[1], &aligned[2]])?;
        let (head, logits) = section("lmsh", || -> Result<_> {
            let f = self.head.features(&neck.f3, &neck.f4, &neck.f5)?;
            let logits = self.head.decode(&f.g, stride)?;
            Ok((f, logits))
        })?;
        Ok(Trace {
            pyramid,
            aligned,
            neck,
            head,
            logits,
        })
    }

    pub fn forward(&self, image: &Tensor, stride: OutStride) -> Result<Tensor> {
        Ok(self.trace(image, stride)?.logits)
    }

    /// Gradient-consistency and edge losses; needs the train-form auxiliary heads.
    pub fn aux_losses(&self, image: &Tensor, gt: &LabelMap) -> Result<AuxLosses> {
        let (Some(edge_proj), Some(edge_head)) = (&self.neck.tfe.edge_proj, &self.head.edge_head) else {
            return Err(Error::contract(
                "aux_losses",
                "deploy-form model has no auxiliary heads",
            ));
        };
        let t = self.trace(image, OutStride::S8)?;
        Ok(AuxLosses {
            grad_consistency: grad_consistency_loss(&t.neck.f3, edge_proj, image, self.config.lambda_gc)?,
            edge: edge_loss(&t.head.g, edge_head, gt, self.config.lambda_edge)?,
        })
    }

    fn module_params(&self) -> [u64; 5] {
        [
            self.backbone.param_count(),
            self.lmfe.param_count(),
            self.neck.ssff.param_count(),
            self.neck.tfe.param_count(),
            self.head.param_count(),
        ]
    }

    /// Parameter counts and the FLOPs of a symbolic forward at the configured
    /// input size, full-resolution logits.
    pub fn profile(&self) -> Result<ProfileReport> {
        let (out, tally) = count_macs(|| self.forward(&Tensor::symbolic(self.input_shape()), OutStride::S1));
        out?;
        let modules = MODULES
            .iter()
            .zip(self.module_params())
            .map(|(&name, params)| ModuleProfile {
                name: name.to_string(),
                params,
                flops: 2 * tally.under(name),
            })
            .collect();
        Ok(ProfileReport::new(
            self.config.input_size,
            self.form().as_str(),
            modules,
        ))
    }

    pub fn to_store(&self) -> WeightStore {
        let mut entries = Vec::new();
        self.visit("", &mut |name, shape, data, _| {
            entries.push(Entry {
                name: name.to_string(),
                dims: shape.iter().map(|&d| d as u32).collect(),
                data: data.to_vec(),
            })
        });
        WeightStore {
            form: self.form(),
            config: self.config.to_text(),
            entries,
        }
    }

    /// Rebuilds a model of the stored form, checking every entry name and shape.
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let cfg = ModelConfig::parse(&store.config)?;
        let mut m = Self::skeleton(&cfg)?;
        if store.form == Form::Deploy {
            m = m.fuse()?;
        }
        let mut used = vec![false; store.entries.len()];
        let mut err: Option<Error> = None;
        m.visit_mut("", &mut |name, shape, data, _| {
            if err.is_some() {
                return;
            }
            let Some(i) = store.entries.iter().position(|e| e.name == name) else {
                err = Some(Error::Weights(format!("missing entry `{name}`")));
                return;
            };
            let e = &store.entries[i];
            if used[i] {
                err = Some(Error::Weights(format!("duplicate entry `{name}`")));
                return;
            }
            used[i] = true;
            if e.dims.len() != shape.len() || e.dims.iter().zip(shape).any(|(&a, &b)| a as usize != b) {
                err = Some(Error::Weights(format!(
                    "shape mismatch for `{name}`: file has {:?}, model expects {shape:?}",
                    e.dims
                )));
                return;
            }
            data.copy_from_slice(&e.data);
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Weights(format!(
                "entry `{}` does not belong to a {} model",
                store.entries[i].name, store.form
            )));
        }
        Ok(m)
    }

    /// Train-vs-deploy certificate of every C2f-Pro block at its own input shape.
    pub fn certify_blocks(
        &self,
        deploy: &Model,
        input: usize,
        trials: usize,
        tol: f32,
        seed: u64,
    ) -> Result<Vec<EquivalenceReport>> {
        let shapes = self.backbone.block_inputs(input);
        self.backbone
            .blocks()
            .zip(deploy.backbone.blocks())
            .zip(shapes)
            .enumerate()
            .map(|(i, ((a, b), shape))| {
                certify_equivalence(|x| a.forward(x), |x| b.forward(x), shape, trials, tol, seed + i as u64)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::count_multiplies;

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = Model::build(&cfg, 3).unwrap().to_store().to_bytes().unwrap();
        let b = Model::build(&cfg, 3).unwrap().to_store().to_bytes().unwrap();
        let c = Model::build(&cfg, 4).unwrap().to_store().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ModelConfig {
            input_size: 630,
            ..ModelConfig::tiny()
        };
        let err = Model::build(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("input_size") && err.contains("32"), "{err}");
        let empty = ModelConfig {
            stage_widths: vec![],
            ..ModelConfig::tiny()
        };
        assert!(Model::build(&empty, 0).is_err());
    }

    #[test]
    fn symbolic_macs_equal_literal_multiplies() {
        let m = Model::build(&ModelConfig::tiny(), 1).unwrap();
        for model in [m.clone(), m.fuse().unwrap()] {
            let symbolic = model.profile().unwrap().total_flops;
            let image = random_tensor(&mut rng(2), model.input_shape());
            let (out, multiplies) = count_multiplies(|| model.forward(&image, OutStride::S1));
            out.unwrap();
            assert_eq!(symbolic, 2 * multiplies);
        }
    }

    #[test]
    fn deploy_is_smaller_and_equivalent() {
        let cfg = ModelConfig {
            input_size: 128,
            ..ModelConfig::tiny()
        };
        let m = Model::build(&cfg, 5).unwrap();
        let d = m.fuse().unwrap();
        let (pt, pd) = (m.profile().unwrap(), d.profile().unwrap());
        assert!(pd.total_params < pt.total_params);
        assert!(pd.total_flops <= pt.total_flops);
        let report = certify_equivalence(
            |x| m.forward(x, OutStride::S1),
            |x| d.forward(x, OutStride::S1),
            m.input_shape(),
            3,
            1e-4,
            6,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn store_round_trip_both_forms() {
        let m = Model::build(&ModelConfig::tiny(), 7).unwrap();
        for model in [m.clone(), m.fuse().unwrap()] {
            let store = model.to_store();
            let bytes = store.to_bytes().unwrap();
            let back = Model::from_store(&WeightStore::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.to_store().to_bytes().unwrap(), bytes);
        }
        let deploy = m.fuse().unwrap().to_store();
        assert!(deploy
            .entries
            .iter()
            .all(|e| !e.name.contains("branches") && !e.name.contains("edge")));
    }

    #[test]
    fn store_errors_name_the_entry() {
        let mut store = Model::build(&ModelConfig::tiny(), 8).unwrap().to_store();
        store.entries[3].dims[0] += 1;
        let name = store.entries[3].name.clone();
        let err = Model::from_store(&store).unwrap_err().to_string();
        assert!(err.contains(&name) && err.contains("shape"), "{err}");
        let mut store = Model::build(&ModelConfig::tiny(), 8).unwrap().to_store();
        store.form = Form::Deploy;
        assert!(Model::from_store(&store).is_err());
    }

    #[test]
    fn aux_losses_train_only() {
        let m = Model::build(&ModelConfig::tiny(), 9).unwrap();
        let image = random_tensor(&mut rng(10), m.input_shape());
        let gt = LabelMap::filled(64, 64, 1);
        let l = m.aux_losses(&image, &gt).unwrap();
        assert!(l.grad_consistency >= 0.0 && l.edge >= 0.0);
        assert!(m.fuse().unwrap().aux_losses(&image, &gt).is_err());
    }

    #[test]
    fn profile_totals_are_sums() {
        let r = Model::build(&ModelConfig::tiny(), 1).unwrap().profile().unwrap();
        assert_eq!(r.total_params, r.modules.iter().map(|m| m.params).sum::<u64>());
        assert_eq!(r.total_flops, r.modules.iter().map(|m| m.flops).sum::<u64>());
        assert!(r.modules.iter().all(|m| m.flops > 0 && m.params > 0));
    }
}
