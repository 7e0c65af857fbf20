//! Top-down feature pyramid shared by both decoders. Per-level refinement is
//! selectable: a plain 3x3 conv, a state-space block, or a state-space block
//! whose scan branch is gated by a dual depthwise-conv spatial branch.

use crate::blocks::{Ffn, Ss2d};
use crate::error::{Error, Result};
use crate::layers::{drop_path, Conv, Ctx, LayerNorm};
use crate::params::{Bound, Init, Scope};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineMode {
    /// Plain 3x3 smoothing conv (the non-Mamba baseline arm).
    Conv,
    /// State-space refinement without the spatial branch.
    Mamba,
    /// Full spatially gated state-space refinement.
    SpatialMamba,
}

#[derive(Debug, Clone)]
pub struct FpnConfig {
    pub width: usize,
    pub refine: RefineMode,
    pub d_state: usize,
    pub ffn_ratio: usize,
    pub drop_path: f64,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig { width: 32, refine: RefineMode::SpatialMamba, d_state: 8, ffn_ratio: 2, drop_path: 0.0 }
    }
}

/// SiLU(fuse_1x1(concat(DW3x3(x), DW7x7(x)))) pushed through its own scan
/// module. The output multiplies the main scan branch, so its projection is
/// initialized live: a zero gate against a zero branch would freeze both.
struct SpatialGate {
    dw3: Conv,
    dw7: Conv,
    fuse: Conv,
    ss2d: Ss2d,
}

impl SpatialGate {
    fn new(scope: &mut Scope, c: usize, n: usize) -> SpatialGate {
        let mut s = scope.sub("gate");
        SpatialGate {
            dw3: Conv::new(&mut s, "dw3", c, c, 3, Conv2dSpec { padding: 1, groups: c, ..Default::default() }, true, None),
            dw7: Conv::new(&mut s, "dw7", c, c, 7, Conv2dSpec { padding: 3, groups: c, ..Default::default() }, true, None),
            fuse: Conv::new(&mut s, "fuse", 2 * c, c, 1, Conv2dSpec::default(), true, None),
            ss2d: Ss2d::new(&mut s, "ss2d", c, n, Init::FanIn(c)),
        }
    }

    fn fwd(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let d3 = self.dw3.fwd(p, x)?;
        let d7 = self.dw7.fwd(p, x)?;
        let fused = self.fuse.fwd(p, &Tensor::concat_channels(&[d3, d7])?)?.silu();
        self.ss2d.fwd(p, &fused)
    }
}

enum RefineImpl {
    Conv(Conv),
    Mamba {
        ln1: LayerNorm,
        ss2d: Ss2d,
        ln2: LayerNorm,
        ffn: Ffn,
        gate: Option<SpatialGate>,
        drop_rate: f64,
    },
}

pub struct RefineBlock {
    inner: RefineImpl,
}

impl RefineBlock {
    pub fn new(scope: &mut Scope, name: &str, cfg: &FpnConfig) -> RefineBlock {
        let mut s = scope.sub(name);
        let inner = match cfg.refine {
            // residual with a zero-init conv so every mode starts as identity
            RefineMode::Conv => RefineImpl::Conv(Conv::new(
                &mut s,
                "conv",
                cfg.width,
                cfg.width,
                3,
                Conv2dSpec { padding: 1, ..Default::default() },
                true,
                Some(Init::Zeros),
            )),
            mode => RefineImpl::Mamba {
                ln1: LayerNorm::new(&mut s, "ln1", cfg.width),
                ss2d: Ss2d::new(&mut s, "ss2d", cfg.width, cfg.d_state, Init::Zeros),
                ln2: LayerNorm::new(&mut s, "ln2", cfg.width),
                ffn: Ffn::new(&mut s, "ffn", cfg.width, cfg.ffn_ratio),
                gate: (mode == RefineMode::SpatialMamba).then(|| SpatialGate::new(&mut s, cfg.width, cfg.d_state)),
                drop_rate: cfg.drop_path,
            },
        };
        RefineBlock { inner }
    }

    pub fn fwd(&self, p: &Bound, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        match &self.inner {
            RefineImpl::Conv(c) => x.add(&c.fwd(p, x)?),
            RefineImpl::Mamba { ln1, ss2d, ln2, ffn, gate, drop_rate } => {
                let scan = ss2d.fwd(p, &ln1.fwd(p, x)?)?;
                let branch = match gate {
                    Some(g) => scan.mul(&g.fwd(p, x)?)?,
                    None => scan,
                };
                let y = x.add(&drop_path(&branch, *drop_rate, ctx)?)?;
                let branch2 = ffn.fwd(p, &ln2.fwd(p, &y)?)?;
                y.add(&drop_path(&branch2, *drop_rate, ctx)?)
            }
        }
    }
}

pub struct Fpn {
    pub cfg: FpnConfig,
    laterals: Vec<Conv>,
    refines: Vec<RefineBlock>,
}

impl Fpn {
    pub fn new(scope: &mut Scope, pyramid_channels: &[usize; 4], cfg: &FpnConfig) -> Result<Fpn> {
        if cfg.width == 0 {
            return Err(Error::invalid("fpn", "width must be positive"));
        }
        let mut s = scope.sub("fpn");
        let laterals = (0..4)
            .map(|i| Conv::new(&mut s, &format!("lat{}", i), pyramid_channels[i], cfg.width, 1, Conv2dSpec::default(), true, None))
            .collect();
        let refines = (0..4).map(|i| RefineBlock::new(&mut s, &format!("refine{}", i), cfg)).collect();
        Ok(Fpn { cfg: cfg.clone(), laterals, refines })
    }

    /// Lateral projections plus coarse-to-fine nearest-neighbor merging;
    /// these are the maps handed to per-level refinement.
    pub fn topdown(&self, p: &Bound, pyr: &[Tensor]) -> Result<Vec<Tensor>> {
        if pyr.len() != 4 {
            return Err(Error::invalid("fpn", format!("expected 4 pyramid levels, got {}", pyr.len())));
        }
        let mut merged: Vec<Tensor> = pyr
            .iter()
            .enumerate()
            .map(|(i, f)| self.laterals[i].fwd(p, f))
            .collect::<Result<_>>()?;
        for i in (0..3).rev() {
            let up = merged[i + 1].upsample_nearest(2)?;
            merged[i] = merged[i].add(&up)?;
        }
        Ok(merged)
    }

    pub fn fwd(&self, p: &Bound, pyr: &[Tensor], ctx: &mut Ctx) -> Result<Vec<Tensor>> {
        self.topdown(p, pyr)?
            .iter()
            .zip(&self.refines)
            .map(|(m, r)| r.fwd(p, m, ctx))
            .collect()
    }
}
