//! Full multi-task model: backbone, per-stage attention, shared pyramid,
//! dual decoders, and the optional height refinement stage, with ablation
//! switches that add or remove each contribution.

use crate::blocks::{Backbone, BlockConfig};
use crate::error::Result;
use crate::fpn::{Fpn, FpnConfig, RefineMode};
use crate::heads::{Heads, Mhr, MhrConfig};
use crate::layers::Ctx;
use crate::mam::Mam;
use crate::params::{Bound, ParamStore, Scope};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BlockConfig,
    pub fpn_width: usize,
    pub local_width: usize,
    pub mhr: MhrConfig,
    pub use_mam: bool,
    pub use_smamba_fpn: bool,
    pub use_spatial_branch: bool,
    pub use_mhr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BlockConfig::default(),
            fpn_width: 32,
            local_width: 16,
            mhr: MhrConfig::default(),
            use_mam: true,
            use_smamba_fpn: true,
            use_spatial_branch: true,
            use_mhr: true,
        }
    }
}

impl ModelConfig {
    /// This config rebased onto one rung of the cumulative ablation ladder
    /// (scale fields kept, switches overwritten).
    pub fn with_arm(&self, arm: &str) -> Option<ModelConfig> {
        let mut cfg = ModelConfig {
            use_mam: false,
            use_smamba_fpn: false,
            use_spatial_branch: false,
            use_mhr: false,
            ..self.clone()
        };
        match arm {
            "backbone" => {}
            "mam" => cfg.use_mam = true,
            "smamba_fpn" => {
                cfg.use_mam = true;
                cfg.use_smamba_fpn = true;
                cfg.use_spatial_branch = true;
            }
            "mhr" => {
                cfg.use_mam = true;
                cfg.use_smamba_fpn = true;
                cfg.use_spatial_branch = true;
                cfg.use_mhr = true;
            }
            _ => return None,
        }
        Some(cfg)
    }

    /// The four-arm ladder used in the ablation study, cumulative.
    pub fn ladder_arm(arm: &str) -> Option<ModelConfig> {
        ModelConfig::default().with_arm(arm)
    }

    pub fn arm_names() -> [&'static str; 4] {
        ["backbone", "mam", "smamba_fpn", "mhr"]
    }
}

pub struct Predictions {
    /// Soft building mask in (0,1), [B,1,H,W].
    pub s: Tensor,
    /// Raw nonnegative height, meters.
    pub h_raw: Tensor,
    /// Refined height (equals h_raw when refinement is disabled).
    pub h_ref: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    mams: Vec<Mam>,
    fpn: Fpn,
    heads: Heads,
    mhr: Option<Mhr>,
}

impl Model {
    /// Allocates every parameter into a fresh store. Initialization is keyed
    /// by (seed, name), so two configs at the same seed share bit-identical
    /// weights on their common module subset.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore, Model)> {
        let mut store = ParamStore::new();
        let mut scope = Scope::root(&mut store, seed);
        let backbone = Backbone::new(&mut scope, &cfg.backbone)?;
        let mams = if cfg.use_mam {
            (0..4)
                .map(|i| Mam::new(&mut scope, &format!("mam{}", i), cfg.backbone.channels[i]))
                .collect()
        } else {
            Vec::new()
        };
        let refine = match (cfg.use_smamba_fpn, cfg.use_spatial_branch) {
            (false, _) => RefineMode::Conv,
            (true, false) => RefineMode::Mamba,
            (true, true) => RefineMode::SpatialMamba,
        };
        let fpn = Fpn::new(
            &mut scope,
            &cfg.backbone.channels,
            &FpnConfig {
                width: cfg.fpn_width,
                refine,
                d_state: cfg.backbone.d_state,
                ffn_ratio: cfg.backbone.ffn_ratio,
                drop_path: 0.0,
            },
        )?;
        let heads = Heads::new(&mut scope, cfg.fpn_width, cfg.local_width, cfg.backbone.patch_size)?;
        let mhr = match cfg.use_mhr {
            true => Some(Mhr::new(&mut scope, cfg.mhr)?),
            false => None,
        };
        Ok((store, Model { cfg: cfg.clone(), backbone, mams, fpn, heads, mhr }))
    }

    pub fn fwd(&self, p: &Bound, img: &Tensor, ctx: &mut Ctx) -> Result<Predictions> {
        let mut pyr = self.backbone.fwd(p, img, ctx)?;
        for (i, mam) in self.mams.iter().enumerate() {
            pyr[i] = mam.fwd(p, &pyr[i])?;
        }
        let maps = self.fpn.fwd(p, &pyr, ctx)?;
        let (s, h_raw) = self.heads.fwd(p, &maps, img)?;
        let h_ref = match &self.mhr {
            Some(m) => m.fwd(p, &h_raw, &s)?.1,
            None => h_raw.clone(),
        };
        Ok(Predictions { s, h_raw, h_ref })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BlockConfig {
                patch_size: 2,
                channels: [4, 6, 8, 10],
                depths: [1, 1, 1, 1],
                d_state: 2,
                ffn_ratio: 2,
                drop_path: 0.0,
            },
            fpn_width: 6,
            local_width: 4,
            ..Default::default()
        }
    }

    fn tiny_arm(arm: &str) -> ModelConfig {
        let full = tiny();
        ModelConfig { backbone: full.backbone.clone(), fpn_width: 6, local_width: 4, ..ModelConfig::ladder_arm(arm).unwrap() }
    }

    fn rand_img(b: usize, e: usize, seed: u64) -> Tensor {
        let mut rng = crate::params::Rng64::seed_from_u64(seed);
        Tensor::new((0..b * 3 * e * e).map(|_| rng.gen_range(0.0..1.0)).collect(), &[b, 3, e, e]).unwrap()
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let (store, model) = Model::build(&tiny(), 3).unwrap();
        let p = store.bind();
        let img = rand_img(2, 16, 5);
        let out = model.fwd(&p, &img, &mut Ctx::eval()).unwrap();
        assert_eq!(out.s.shape(), &[2, 1, 16, 16]);
        assert_eq!(out.h_raw.shape(), &[2, 1, 16, 16]);
        assert_eq!(out.h_ref.shape(), &[2, 1, 16, 16]);
        assert!(out.s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.h_raw.data().iter().all(|&v| v > 0.0));
        assert!(out.h_ref.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn switches_control_parameter_names() {
        let (store, _) = Model::build(&tiny_arm("backbone"), 0).unwrap();
        assert!(store.names().all(|n| !n.starts_with("mam")));
        assert!(store.names().all(|n| !n.starts_with("mhr")));
        assert!(store.names().all(|n| !(n.starts_with("fpn.") && n.contains("ss2d"))));
        assert!(store.names().all(|n| !n.contains(".gate.")));

        let (store2, _) = Model::build(&tiny_arm("smamba_fpn"), 0).unwrap();
        assert!(store2.names().any(|n| n.starts_with("mam")));
        assert!(store2.names().any(|n| n.starts_with("fpn.") && n.contains("ss2d")));
        assert!(store2.names().any(|n| n.contains(".gate.")));
        assert!(store2.names().all(|n| !n.starts_with("mhr")));

        let (store3, _) = Model::build(&tiny_arm("mhr"), 0).unwrap();
        assert!(store3.names().any(|n| n.starts_with("mhr")));
    }

    #[test]
    fn ladder_parameter_count_strictly_increases() {
        let counts: Vec<usize> = ModelConfig::arm_names()
            .iter()
            .map(|a| Model::build(&tiny_arm(a), 0).unwrap().0.param_count())
            .collect();
        for w in counts.windows(2) {
            assert!(w[1] > w[0], "counts not increasing: {:?}", counts);
        }
    }

    #[test]
    fn arms_share_common_subset_weights_at_equal_seed() {
        let (base, _) = Model::build(&tiny_arm("backbone"), 42).unwrap();
        let (full, _) = Model::build(&tiny_arm("mhr"), 42).unwrap();
        let full_by_name: std::collections::BTreeMap<&str, &[f64]> =
            full.slots().iter().map(|s| (s.name.as_str(), s.value.as_slice())).collect();
        let mut shared = 0;
        for s in base.slots() {
            if let Some(v) = full_by_name.get(s.name.as_str()) {
                assert_eq!(&s.value.as_slice(), v, "mismatch at {}", s.name);
                shared += 1;
            }
        }
        // the whole backbone and the heads overlap; refine blocks do not
        assert!(shared > 20, "suspiciously small overlap: {}", shared);
    }

    #[test]
    fn no_mhr_arm_returns_h_raw() {
        let (store, model) = Model::build(&tiny_arm("smamba_fpn"), 9).unwrap();
        let p = store.bind();
        let out = model.fwd(&p, &rand_img(1, 16, 2), &mut Ctx::eval()).unwrap();
        assert_eq!(out.h_ref.data(), out.h_raw.data());
    }

    #[test]
    fn unknown_arm_rejected() {
        assert!(ModelConfig::ladder_arm("everything").is_none());
    }
}
