//! Task decoders and the mask-aware height refinement gate.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, Init, Scope};
use crate::tensor::{Conv2dSpec, Tensor};

/// Three stride-4 conv layers supplying local texture detail to both
/// decoders.
pub struct LocalCnn {
    c1: Conv,
    c2: Conv,
    c3: Conv,
}

impl LocalCnn {
    pub fn new(scope: &mut Scope, width: usize) -> LocalCnn {
        let mut s = scope.sub("local");
        let sp2 = Conv2dSpec { stride: 2, padding: 1, ..Default::default() };
        let sp1 = Conv2dSpec { padding: 1, ..Default::default() };
        LocalCnn {
            c1: Conv::new(&mut s, "c1", 3, width, 3, sp2, true, None),
            c2: Conv::new(&mut s, "c2", width, width, 3, sp2, true, None),
            c3: Conv::new(&mut s, "c3", width, width, 3, sp1, true, None),
        }
    }

    pub fn fwd(&self, p: &Bound, img: &Tensor) -> Result<Tensor> {
        let a = self.c1.fwd(p, img)?.silu();
        let b = self.c2.fwd(p, &a)?.silu();
        Ok(self.c3.fwd(p, &b)?.silu())
    }
}

/// One task decoder: sum the pyramid at stride 4, fold in the projected
/// local features, smooth, and predict a single-channel map at input
/// resolution.
pub struct Decoder {
    proj_local: Conv,
    c1: Conv,
    c2: Conv,
    head: Conv,
    up: usize,
    local_up: usize,
}

impl Decoder {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        fpn_w: usize,
        local_w: usize,
        up: usize,
        local_up: usize,
        head_bias: f64,
    ) -> Decoder {
        let mut s = scope.sub(name);
        let sp1 = Conv2dSpec { padding: 1, ..Default::default() };
        Decoder {
            proj_local: Conv::new(&mut s, "proj_local", local_w, fpn_w, 1, Conv2dSpec::default(), true, None),
            c1: Conv::new(&mut s, "c1", fpn_w, fpn_w, 3, sp1, true, None),
            c2: Conv::new(&mut s, "c2", fpn_w, fpn_w, 3, sp1, true, None),
            head: Conv::with_bias_init(&mut s, "head", fpn_w, 1, 1, Conv2dSpec::default(), head_bias, None),
            up,
            local_up,
        }
    }

    /// Pre-activation map [B,1,H,W] from four FPN levels and the stride-4
    /// local features. Extent mismatches between the branches are rejected.
    pub fn fwd(&self, p: &Bound, fpn_maps: &[Tensor], local: &Tensor) -> Result<Tensor> {
        if fpn_maps.len() != 4 {
            return Err(Error::invalid("decoder", format!("expected 4 maps, got {}", fpn_maps.len())));
        }
        let mut acc = fpn_maps[0].clone();
        for (i, m) in fpn_maps.iter().enumerate().skip(1) {
            acc = acc.add(&m.upsample_nearest(1 << i)?)?;
        }
        let mut loc = self.proj_local.fwd(p, local)?;
        if self.local_up > 1 {
            loc = loc.upsample_nearest(self.local_up)?;
        }
        if loc.shape() != acc.shape() {
            return Err(Error::ShapeMismatch {
                op: "decoder_fuse",
                left: acc.shape().to_vec(),
                right: loc.shape().to_vec(),
            });
        }
        let fused = acc.add(&loc)?;
        let z = self.c2.fwd(p, &self.c1.fwd(p, &fused)?.silu())?.silu();
        // bilinear for the last hop to full resolution: nearest leaves the
        // map blocky at the patch stride, which caps boundary accuracy
        self.head.fwd(p, &z)?.upsample_bilinear(self.up)
    }
}

/// Where the height map starts, in meters. Softplus has a near-dead zone for
/// strongly negative activations; biasing the head to a plausible scene mean
/// keeps both the push-down (background) and pull-up (roofs) gradients alive
/// from the first step instead of gambling on escaping the flat region.
pub const HEIGHT_PRIOR_M: f64 = 2.0;

/// Shared local stem plus the two task decoders.
pub struct Heads {
    local: LocalCnn,
    seg: Decoder,
    hgt: Decoder,
}

impl Heads {
    pub fn new(scope: &mut Scope, fpn_w: usize, local_w: usize, patch: usize) -> Result<Heads> {
        // the finest pyramid level sits at stride `patch`, the local stem at
        // stride 4; they can only meet when patch divides 4
        if patch == 0 || 4 % patch != 0 {
            return Err(Error::invalid("heads", format!("patch size {} does not divide the local stem stride 4", patch)));
        }
        let local_up = 4 / patch;
        let mut s = scope.sub("heads");
        // softplus(b) = prior  =>  b = ln(e^prior - 1)
        let hgt_bias = HEIGHT_PRIOR_M.exp_m1().ln();
        Ok(Heads {
            local: LocalCnn::new(&mut s, local_w),
            seg: Decoder::new(&mut s, "seg", fpn_w, local_w, patch, local_up, 0.0),
            hgt: Decoder::new(&mut s, "hgt", fpn_w, local_w, patch, local_up, hgt_bias),
        })
    }

    /// Returns (S, H_raw): soft mask in (0,1) and nonnegative raw heights,
    /// both [B,1,H,W] at image resolution.
    pub fn fwd(&self, p: &Bound, fpn_maps: &[Tensor], img: &Tensor) -> Result<(Tensor, Tensor)> {
        let local = self.local.fwd(p, img)?;
        let s = self.seg.fwd(p, fpn_maps, &local)?.sigmoid();
        let h = self.hgt.fwd(p, fpn_maps, &local)?.softplus();
        Ok((s, h))
    }
}

// ── mask-aware height refinement ──

#[derive(Debug, Clone, Copy)]
pub struct MhrConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub width: usize,
}

impl Default for MhrConfig {
    fn default() -> Self {
        MhrConfig { epsilon: 0.1, gamma: 1.0, width: 8 }
    }
}

impl MhrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("mhr", "epsilon must lie in (0,1)"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::invalid("mhr", "gamma must be positive"));
        }
        if self.width == 0 {
            return Err(Error::invalid("mhr", "width must be positive"));
        }
        Ok(())
    }
}

struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new(scope: &mut Scope, name: &str, w: usize, dilation: usize) -> ResBlock {
        let mut s = scope.sub(name);
        let sp = Conv2dSpec { padding: dilation, dilation, ..Default::default() };
        ResBlock {
            a: Conv::new(&mut s, "a", w, w, 3, sp, true, None),
            b: Conv::new(&mut s, "b", w, w, 3, sp, true, None),
        }
    }

    fn fwd(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.add(&self.b.fwd(p, &self.a.fwd(p, x)?.silu())?)
    }
}

/// Confidence gate over the mask: epsilon + (1-epsilon) * S^gamma, rising
/// monotonically from the conservative floor at S=0 to full strength at S=1.
pub fn mhr_gate(s: &Tensor, epsilon: f64, gamma: f64) -> Tensor {
    s.powf(gamma).scale(1.0 - epsilon).add_scalar(epsilon)
}

/// Residual height corrector. Sees the mask only as a frozen input: no
/// gradient reaches the segmentation pathway, so enabling refinement leaves
/// segmentation training untouched.
pub struct Mhr {
    pub cfg: MhrConfig,
    stem: Conv,
    rb1: ResBlock,
    rb2: ResBlock,
    out: Conv,
}

impl Mhr {
    pub fn new(scope: &mut Scope, cfg: MhrConfig) -> Result<Mhr> {
        cfg.validate()?;
        let mut s = scope.sub("mhr");
        let sp1 = Conv2dSpec { padding: 1, ..Default::default() };
        Ok(Mhr {
            cfg,
            stem: Conv::new(&mut s, "stem", 2, cfg.width, 3, sp1, true, None),
            rb1: ResBlock::new(&mut s, "rb1", cfg.width, 1),
            rb2: ResBlock::new(&mut s, "rb2", cfg.width, 2),
            out: Conv::new(&mut s, "out", cfg.width, 1, 1, Conv2dSpec::default(), true, Some(Init::Zeros)),
        })
    }

    /// Correction field from [H_raw, S]; zero at init (zero-init head).
    pub fn residual(&self, p: &Bound, h_raw: &Tensor, s_frozen: &Tensor) -> Result<Tensor> {
        if h_raw.shape() != s_frozen.shape() {
            return Err(Error::ShapeMismatch {
                op: "mhr",
                left: h_raw.shape().to_vec(),
                right: s_frozen.shape().to_vec(),
            });
        }
        let z = Tensor::concat_channels(&[h_raw.clone(), s_frozen.clone()])?;
        let z = self.stem.fwd(p, &z)?.silu();
        let z = self.rb2.fwd(p, &self.rb1.fwd(p, &z)?)?;
        self.out.fwd(p, &z)
    }

    /// (delta_h, h_ref) with h_ref = relu(h_raw + gate * delta_h).
    pub fn fwd(&self, p: &Bound, h_raw: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        let s_frozen = s.detach();
        let delta = self.residual(p, h_raw, &s_frozen)?;
        let g = mhr_gate(&s_frozen, self.cfg.epsilon, self.cfg.gamma);
        let h_ref = h_raw.add(&g.mul(&delta)?)?.relu();
        Ok((delta, h_ref))
    }
}
