//! Small parameterized layers shared by every model module.

use crate::error::Result;
use crate::params::{Bound, Init, ParamId, Rng64, Scope};
use crate::tensor::{Conv2dSpec, Tensor};
use rand::Rng;

/// Per-forward context: training mode drives stochastic depth.
pub struct Ctx {
    pub training: bool,
    pub rng: Rng64,
}

impl Ctx {
    pub fn eval() -> Ctx {
        use rand::SeedableRng;
        Ctx { training: false, rng: Rng64::seed_from_u64(0) }
    }

    pub fn train(rng: Rng64) -> Ctx {
        Ctx { training: true, rng }
    }
}

pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        w_init: Option<Init>,
    ) -> Conv {
        let mut s = scope.sub(name);
        let cig = ci / spec.groups;
        let init = w_init.unwrap_or(Init::FanIn(cig * k * k));
        let w = s.add("w", &[co, cig, k, k], init);
        let b = bias.then(|| s.add("b", &[co], Init::Zeros));
        Conv { w, b, spec }
    }

    /// Same as `new`, but the bias starts at a fixed constant instead of zero.
    pub fn with_bias_init(
        scope: &mut Scope,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        spec: Conv2dSpec,
        bias0: f64,
        w_init: Option<Init>,
    ) -> Conv {
        let mut s = scope.sub(name);
        let cig = ci / spec.groups;
        let w = s.add("w", &[co, cig, k, k], w_init.unwrap_or(Init::FanIn(cig * k * k)));
        let b = Some(s.add("b", &[co], Init::Const(bias0)));
        Conv { w, b, spec }
    }

    pub fn fwd(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&p[self.w], self.b.map(|b| &p[b]), self.spec)
    }
}

/// Linear map over the trailing channel axis of [B,L,C] sequences.
pub struct LinearSeq {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearSeq {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        ci: usize,
        co: usize,
        bias: bool,
        w_init: Option<Init>,
    ) -> LinearSeq {
        let mut s = scope.sub(name);
        let w = s.add("w", &[ci, co], w_init.unwrap_or(Init::FanIn(ci)));
        let b = bias.then(|| s.add("b", &[co], Init::Zeros));
        LinearSeq { w, b }
    }

    pub fn fwd(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&p[self.w])?;
        match self.b {
            Some(b) => y.add(&p[b]),
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, name: &str, c: usize) -> LayerNorm {
        let mut s = scope.sub(name);
        LayerNorm {
            g: s.add("g", &[c], Init::Const(1.0)),
            b: s.add("b", &[c], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn fwd(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_channels(&p[self.g], &p[self.b], self.eps)
    }
}

/// Stochastic depth on the residual branch. Per-sample Bernoulli at train
/// time with survivor scaling 1/(1-rate); exact identity at eval.
pub fn drop_path(x: &Tensor, rate: f64, ctx: &mut Ctx) -> Result<Tensor> {
    if !ctx.training || rate == 0.0 {
        return Ok(x.clone());
    }
    let b = x.shape()[0];
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..b)
        .map(|_| if ctx.rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mut mshape = vec![b];
    mshape.extend(std::iter::repeat(1).take(x.shape().len() - 1));
    let m = Tensor::new(mask, &mshape)?;
    x.mul(&m)
}
