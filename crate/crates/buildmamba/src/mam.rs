//! Dual-axis pooled spatial attention with a learnable gain and residual.

use crate::error::Result;
use crate::layers::LinearSeq;
use crate::params::{Bound, Init, ParamId, Scope};
use crate::tensor::Tensor;

/// Pools the map along each spatial axis, lifts both profiles through
/// channel-wise fully connected layers, and forms an H*W spatial
/// distribution from their outer product. The gained, attention-weighted
/// map is added back residually; alpha starts at zero so the module is an
/// exact identity at initialization.
pub struct Mam {
    fc_h: LinearSeq,
    fc_w: LinearSeq,
    pub alpha: ParamId,
}

impl Mam {
    pub fn new(scope: &mut Scope, name: &str, c: usize) -> Mam {
        let mut s = scope.sub(name);
        Mam {
            fc_h: LinearSeq::new(&mut s, "fc_h", c, c, true, None),
            fc_w: LinearSeq::new(&mut s, "fc_w", c, c, true, None),
            alpha: s.add("alpha", &[1], Init::Zeros),
        }
    }

    /// Attention map [B,1,H,W]; entries positive, summing to 1 per item.
    pub fn attention(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ph = x.adaptive_avg_pool(h, 1)?.reshape(&[b, c, h])?.permute(&[0, 2, 1])?; // [B,H,C]
        let pw = x.adaptive_avg_pool(1, w)?.reshape(&[b, c, w])?.permute(&[0, 2, 1])?; // [B,W,C]
        let qh = self.fc_h.fwd(p, &ph)?; // [B,H,C]
        let qw = self.fc_w.fwd(p, &pw)?; // [B,W,C]
        let logits = qh.matmul(&qw.permute(&[0, 2, 1])?)?; // [B,H,W]
        logits.reshape(&[b, 1, h * w])?.softmax_last()?.reshape(&[b, 1, h, w])
    }

    pub fn fwd(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let attn = self.attention(p, x)?;
        x.add(&x.mul(&attn)?.mul(&p[self.alpha])?)
    }
}
