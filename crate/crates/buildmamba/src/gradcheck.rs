//! Finite-difference verification harness for every differentiable op.
//!
//! Each check builds random leaf tensors, projects the op output onto a
//! random direction to get a scalar, and compares analytic gradients against
//! the central-difference oracle for every input. Inputs are sampled away
//! from kinks (relu corners, clamp edges) so the oracle itself is valid.

use crate::blocks::{Backbone, Ss2d, VmambaBlock};
use crate::error::Result;
use crate::layers::Ctx;
use crate::mam::Mam;
use crate::params::{Init, ParamStore, Scope};
use crate::tensor::{fd_gradient, fd_gradient_sampled, max_rel_err, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Sampling recipe for one input tensor.
#[derive(Clone, Copy)]
pub enum Draw {
    /// Uniform in [lo, hi].
    Uniform(f64, f64),
    /// Uniform in [lo, hi] but at least `margin` away from each listed kink.
    AwayFrom(f64, f64, f64, &'static [f64]),
    /// Uniform in [lo, hi], strictly positive use cases.
    Positive(f64, f64),
}

pub fn draw_vec(rng: &mut StdRng, n: usize, d: Draw) -> Vec<f64> {
    (0..n)
        .map(|_| match d {
            Draw::Uniform(lo, hi) => rng.gen_range(lo..hi),
            Draw::Positive(lo, hi) => rng.gen_range(lo..hi),
            Draw::AwayFrom(lo, hi, margin, kinks) => loop {
                let v: f64 = rng.gen_range(lo..hi);
                if kinks.iter().all(|&k| (v - k).abs() > margin) {
                    break v;
                }
            },
        })
        .collect()
}

fn shuffled_prefix(rng: &mut StdRng, n: usize, keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    idx.truncate(keep);
    idx
}

/// One FD-vs-AD trial of `f` over pre-drawn leaf data. Returns the worst
/// relative error across all inputs' gradients.
pub fn check_prepared(
    rng: &mut StdRng,
    shapes: &[Vec<usize>],
    datas: &[Vec<f64>],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let leaves: Vec<Tensor> = datas
        .iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::param(d.clone(), s))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = Tensor::new(w.clone(), &[out.numel()])?;
    let loss = out.reshape(&[out.numel()])?.mul(&wt)?.sum_all();
    loss.backward()?;

    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let ad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let coords = (leaf.numel() > 96).then(|| shuffled_prefix(rng, leaf.numel(), 64));
        let mut probe_f = |x: &[f64]| -> Result<f64> {
            let mut ins: Vec<Tensor> = Vec::with_capacity(leaves.len());
            for (j, s) in shapes.iter().enumerate() {
                let d = if j == k { x.to_vec() } else { datas[j].clone() };
                ins.push(Tensor::new(d, s)?);
            }
            let o = f(&ins)?;
            Ok(o.data().iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let fd = match &coords {
            // large inputs: spot-check a deterministic random subset
            Some(c) => fd_gradient_sampled(&mut probe_f, &datas[k], FD_EPS, c)?,
            None => fd_gradient(&mut probe_f, &datas[k], FD_EPS)?,
        };
        worst = worst.max(max_rel_err(&ad, &fd));
    }
    Ok(worst)
}

/// One FD-vs-AD trial of `f` over freshly drawn leaf inputs.
pub fn check_fn(
    rng: &mut StdRng,
    shapes: &[(&[usize], Draw)],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|(s, d)| draw_vec(rng, s.iter().product(), *d))
        .collect();
    let owned: Vec<Vec<usize>> = shapes.iter().map(|(s, _)| s.to_vec()).collect();
    check_prepared(rng, &owned, &datas, f)
}

/// Replace every parameter with fresh random values so zero-initialized
/// projections do not mask gradient paths. State matrices (names ending in
/// ".a") stay negative for a contractive recurrence.
pub fn randomize_store(rng: &mut StdRng, store: &mut crate::params::ParamStore, scale: f64) {
    for i in 0..store.len() {
        let neg = store.slots()[i].name.ends_with(".a");
        let n = store.slots()[i].value.len();
        let vals = if neg {
            draw_vec(rng, n, Draw::Uniform(-2.0, -0.1))
        } else {
            draw_vec(rng, n, Draw::Uniform(-scale, scale))
        };
        *store.value_mut(i) = vals;
    }
}

/// FD-vs-AD trial for a parameterized module: gradients are verified for the
/// drawn input leaves and for a random subset of parameter slots (at most
/// `max_slots`, spot-checking `max_coords` coordinates of any large slot).
pub fn check_module(
    rng: &mut StdRng,
    store: &mut crate::params::ParamStore,
    inputs: &[(&[usize], Draw)],
    max_slots: usize,
    max_coords: usize,
    f: &dyn Fn(&crate::params::Bound, &[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let datas: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(s, d)| draw_vec(rng, s.iter().product(), *d))
        .collect();
    let leaves: Vec<Tensor> = datas
        .iter()
        .zip(inputs)
        .map(|(d, (s, _))| Tensor::param(d.clone(), s))
        .collect::<Result<_>>()?;
    let bound = store.bind();
    let out = f(&bound, &leaves)?;
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wt = Tensor::new(w.clone(), &[out.numel()])?;
    out.reshape(&[out.numel()])?.mul(&wt)?.sum_all().backward()?;
    let slot_grads = store.grads(&bound);
    let project = |o: &Tensor| -> f64 { o.data().iter().zip(&w).map(|(a, b)| a * b).sum() };

    let mut worst = 0.0f64;
    let picked = shuffled_prefix(rng, store.len(), max_slots.min(store.len()));
    for &k in &picked {
        let orig = store.slots()[k].value.clone();
        let ad = slot_grads[k].clone().unwrap_or_else(|| vec![0.0; orig.len()]);
        let coords = (orig.len() > max_coords).then(|| shuffled_prefix(rng, orig.len(), max_coords));
        let fd = {
            let mut probe = |x: &[f64]| -> Result<f64> {
                *store.value_mut(k) = x.to_vec();
                let b = store.bind();
                let ins: Vec<Tensor> = datas
                    .iter()
                    .zip(inputs)
                    .map(|(d, (s, _))| Tensor::new(d.clone(), s))
                    .collect::<Result<_>>()?;
                Ok(project(&f(&b, &ins)?))
            };
            match &coords {
                Some(c) => fd_gradient_sampled(&mut probe, &orig, FD_EPS, c)?,
                None => fd_gradient(&mut probe, &orig, FD_EPS)?,
            }
        };
        *store.value_mut(k) = orig;
        worst = worst.max(max_rel_err(&ad, &fd));
    }

    for (k, leaf) in leaves.iter().enumerate() {
        let ad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let coords = (leaf.numel() > max_coords).then(|| shuffled_prefix(rng, leaf.numel(), max_coords));
        let mut probe = |x: &[f64]| -> Result<f64> {
            let b = store.bind();
            let mut ins = Vec::with_capacity(leaves.len());
            for (j, (s, _)) in inputs.iter().enumerate() {
                let d = if j == k { x.to_vec() } else { datas[j].clone() };
                ins.push(Tensor::new(d, s)?);
            }
            Ok(project(&f(&b, &ins)?))
        };
        let fd = match &coords {
            Some(c) => fd_gradient_sampled(&mut probe, &datas[k], FD_EPS, c)?,
            None => fd_gradient(&mut probe, &datas[k], FD_EPS)?,
        };
        worst = worst.max(max_rel_err(&ad, &fd));
    }
    Ok(worst)
}

pub struct Check {
    pub name: &'static str,
    pub module: &'static str,
    pub tolerance: f64,
    pub run: Box<dyn Fn(&mut StdRng) -> Result<f64>>,
}

fn simple(
    name: &'static str,
    module: &'static str,
    shapes: Vec<(Vec<usize>, Draw)>,
    f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
) -> Check {
    Check {
        name,
        module,
        tolerance: DEFAULT_TOL,
        run: Box::new(move |rng| {
            let refs: Vec<(&[usize], Draw)> = shapes.iter().map(|(s, d)| (s.as_slice(), *d)).collect();
            check_fn(rng, &refs, &f)
        }),
    }
}

const SAFE: Draw = Draw::Uniform(-1.5, 1.5);

/// The full registry. `module` filters ("all" keeps everything).
pub fn registry(module: &str) -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();

    // ── tensor core ──
    checks.push(simple("add_broadcast", "tensor",
        vec![(vec![2, 3, 4], SAFE), (vec![3, 1], SAFE)],
        |t| t[0].add(&t[1])));
    checks.push(simple("sub", "tensor",
        vec![(vec![4, 5], SAFE), (vec![4, 5], SAFE)],
        |t| t[0].sub(&t[1])));
    checks.push(simple("mul_broadcast", "tensor",
        vec![(vec![2, 4, 3], SAFE), (vec![1, 3], SAFE)],
        |t| t[0].mul(&t[1])));
    checks.push(simple("div", "tensor",
        vec![(vec![3, 4], SAFE), (vec![3, 4], Draw::AwayFrom(-2.0, 2.0, 0.35, &[0.0]))],
        |t| t[0].div(&t[1])));
    checks.push(simple("relu", "tensor",
        vec![(vec![5, 5], Draw::AwayFrom(-1.5, 1.5, 0.05, &[0.0]))],
        |t| Ok(t[0].relu())));
    checks.push(simple("sigmoid", "tensor", vec![(vec![4, 4], SAFE)], |t| Ok(t[0].sigmoid())));
    checks.push(simple("silu", "tensor", vec![(vec![4, 4], SAFE)], |t| Ok(t[0].silu())));
    checks.push(simple("softplus", "tensor", vec![(vec![4, 4], SAFE)], |t| Ok(t[0].softplus())));
    checks.push(simple("exp", "tensor", vec![(vec![4, 4], SAFE)], |t| Ok(t[0].exp())));
    checks.push(simple("ln", "tensor",
        vec![(vec![4, 4], Draw::Positive(0.05, 3.0))],
        |t| Ok(t[0].ln())));
    checks.push(simple("abs", "tensor",
        vec![(vec![4, 4], Draw::AwayFrom(-1.5, 1.5, 0.05, &[0.0]))],
        |t| Ok(t[0].abs())));
    checks.push(simple("pow", "tensor",
        vec![(vec![4, 4], Draw::Positive(0.1, 2.0))],
        |t| Ok(t[0].powf(1.7))));
    checks.push(simple("clamp", "tensor",
        vec![(vec![5, 5], Draw::AwayFrom(-1.5, 1.5, 0.05, &[-1.0, 1.0]))],
        |t| Ok(t[0].clamp(-1.0, 1.0))));
    checks.push(simple("matmul_batched", "tensor",
        vec![(vec![2, 3, 4], SAFE), (vec![4, 5], SAFE)],
        |t| t[0].matmul(&t[1])));
    checks.push(simple("matmul_bcast_batch", "tensor",
        vec![(vec![3, 2, 4], SAFE), (vec![3, 4, 2], SAFE)],
        |t| t[0].matmul(&t[1])));
    checks.push(simple("conv2d_basic", "tensor",
        vec![(vec![2, 3, 6, 6], SAFE), (vec![4, 3, 3, 3], SAFE), (vec![4], SAFE)],
        |t| t[0].conv2d(&t[1], Some(&t[2]), crate::tensor::Conv2dSpec { padding: 1, ..Default::default() })));
    checks.push(simple("conv2d_strided", "tensor",
        vec![(vec![1, 2, 7, 7], SAFE), (vec![3, 2, 3, 3], SAFE), (vec![3], SAFE)],
        |t| t[0].conv2d(&t[1], Some(&t[2]), crate::tensor::Conv2dSpec::new(2, 1, 1, 1))));
    checks.push(simple("conv2d_dilated", "tensor",
        vec![(vec![1, 2, 8, 8], SAFE), (vec![2, 2, 3, 3], SAFE)],
        |t| t[0].conv2d(&t[1], None, crate::tensor::Conv2dSpec::new(1, 2, 2, 1))));
    checks.push(simple("conv2d_depthwise", "tensor",
        vec![(vec![2, 4, 5, 5], SAFE), (vec![4, 1, 3, 3], SAFE), (vec![4], SAFE)],
        |t| t[0].conv2d(&t[1], Some(&t[2]), crate::tensor::Conv2dSpec { padding: 1, groups: 4, ..Default::default() })));
    checks.push(simple("adaptive_avg_pool", "tensor",
        vec![(vec![2, 3, 5, 7], SAFE)],
        |t| t[0].adaptive_avg_pool(2, 3)));
    checks.push(simple("pool_strip", "tensor",
        vec![(vec![1, 2, 6, 4], SAFE)],
        |t| t[0].adaptive_avg_pool(6, 1)));
    checks.push(simple("upsample_nearest", "tensor",
        vec![(vec![1, 2, 3, 3], SAFE)],
        |t| t[0].upsample_nearest(2)));
    checks.push(simple("upsample_bilinear", "tensor",
        vec![(vec![1, 2, 3, 3], SAFE)],
        |t| t[0].upsample_bilinear(4)));
    checks.push(simple("softmax", "tensor",
        vec![(vec![3, 6], Draw::Uniform(-3.0, 3.0))],
        |t| t[0].softmax_last()));
    checks.push(simple("layer_norm", "tensor",
        vec![(vec![2, 5, 3, 3], SAFE), (vec![5], Draw::Uniform(0.5, 1.5)), (vec![5], SAFE)],
        |t| t[0].layer_norm_channels(&t[1], &t[2], 1e-5)));
    checks.push(simple("movement_chain", "tensor",
        vec![(vec![2, 3, 2, 4], SAFE)],
        |t| {
            let p = t[0].permute(&[0, 1, 3, 2])?;
            let f = p.flip(2)?;
            f.reshape(&[2, 3, 8])
        }));
    checks.push(simple("gather_scatter_hw", "tensor",
        vec![(vec![1, 2, 2, 3], SAFE)],
        |t| {
            let perm = std::rc::Rc::new(vec![5usize, 2, 0, 4, 1, 3]);
            let g = t[0].gather_hw(std::rc::Rc::clone(&perm))?;
            g.scatter_hw(perm, 2, 3)
        }));
    checks.push(simple("concat_channels", "tensor",
        vec![(vec![2, 2, 3, 3], SAFE), (vec![2, 3, 3, 3], SAFE)],
        |t| Tensor::concat_channels(&[t[0].clone(), t[1].clone()])));

    // ── selective scan ──
    checks.push(simple("scan_bank", "ssm",
        vec![
            (vec![2, 6, 3], SAFE),                       // x
            (vec![2, 6, 4], SAFE),                       // b
            (vec![2, 6, 4], SAFE),                       // c
            (vec![2, 6, 3], Draw::Positive(0.05, 0.8)),  // delta
            (vec![3, 4], Draw::Uniform(-2.0, -0.1)),     // a
            (vec![3], SAFE),                             // d
        ],
        |t| crate::ssm::scan_bank(&t[0], &t[1], &t[2], &t[3], &t[4], &t[5])));
    checks.push(simple("scan_bank_long", "ssm",
        vec![
            (vec![1, 8, 2], SAFE),
            (vec![1, 8, 3], SAFE),
            (vec![1, 8, 3], SAFE),
            (vec![1, 8, 2], Draw::Positive(0.05, 0.5)),
            (vec![2, 3], Draw::Uniform(-2.0, -0.1)),
            (vec![2], SAFE),
        ],
        |t| crate::ssm::scan_bank(&t[0], &t[1], &t[2], &t[3], &t[4], &t[5])));

    // ── composite blocks ──
    // Every entry rebuilds a tiny module per trial, swaps zero-init slots for
    // random values, then FD-checks parameter slots alongside input leaves.
    let img: Draw = Draw::Uniform(-1.0, 1.0);
    checks.push(Check {
        name: "ss2d_module",
        module: "blocks",
        tolerance: DEFAULT_TOL,
        run: Box::new(move |rng| {
            let mut store = ParamStore::new();
            let mut scope = Scope::root(&mut store, 0);
            let m = Ss2d::new(&mut scope, "m", 2, 2, Init::Zeros);
            randomize_store(rng, &mut store, 0.4);
            check_module(rng, &mut store, &[(&[1, 2, 3, 3], img)], usize::MAX, 64, &|p, x| {
                m.fwd(p, &x[0])
            })
        }),
    });
    checks.push(Check {
        name: "vmamba_block",
        module: "blocks",
        tolerance: DEFAULT_TOL,
        run: Box::new(move |rng| {
            let mut store = ParamStore::new();
            let mut scope = Scope::root(&mut store, 0);
            let blk = VmambaBlock::new(&mut scope, "b", 2, 2, 2, 0.0);
            randomize_store(rng, &mut store, 0.4);
            check_module(rng, &mut store, &[(&[1, 2, 3, 3], img)], usize::MAX, 64, &|p, x| {
                blk.fwd(p, &x[0], &mut Ctx::eval())
            })
        }),
    });
    checks.push(Check {
        name: "mam_module",
        module: "blocks",
        tolerance: DEFAULT_TOL,
        run: Box::new(move |rng| {
            let mut store = ParamStore::new();
            let mut scope = Scope::root(&mut store, 0);
            let m = Mam::new(&mut scope, "m", 2);
            randomize_store(rng, &mut store, 0.5);
            check_module(rng, &mut store, &[(&[1, 2, 3, 3], img)], usize::MAX, 64, &|p, x| {
                m.fwd(p, &x[0])
            })
        }),
    });
    checks.push(Check {
        name: "fpn_refine_spatial",
        module: "blocks",
        tolerance: DEFAULT_TOL,
        run: Box::new(move |rng| {
            let mut store = ParamStore::new();
            let mut scope = Scope::root(&mut store, 0);
            let cfg = crate::fpn::FpnConfig {
                width: 2,
                refine: crate::fpn::RefineMode::SpatialMamba,
                d_state: 2,
                ffn_ratio: 2,
                drop_path: 0.0,
            };
            let rb = crate::fpn::RefineBlock::new(&mut scope, "r", &cfg);
            randomize_store(rng, &mut store, 0.4);
            check_module(rng, &mut store, &[(&[1, 2, 4, 4], img)], usize::MAX, 32, &|p, x| {
                rb.fwd(p, &x[0], &mut Ctx::eval())
            })
        }),
    });
    checks.push(Check {
        name: "mhr_module",
        module: "blocks",
        tolerance: DEFAULT_TOL,
        run: Box::new(move |rng| {
            let mut store = ParamStore::new();
            let mut scope = Scope::root(&mut store, 0);
            let cfg = crate::heads::MhrConfig { epsilon: 0.1, gamma: 1.0, width: 3 };
            let m = crate::heads::Mhr::new(&mut scope, cfg)?;
            randomize_store(rng, &mut store, 0.1);
            // The mask branch is frozen by design, so it enters as a captured
            // constant rather than an FD leaf; only the height path is probed.
            let s = Tensor::new(draw_vec(rng, 16, Draw::Uniform(0.05, 0.95)), &[1, 1, 4, 4])?;
            check_module(
                rng,
                &mut store,
                &[(&[1, 1, 4, 4], Draw::Positive(0.5, 3.0))],
                usize::MAX,
                32,
                &|p, x| Ok(m.fwd(p, &x[0], &s)?.1),
            )
        }),
    });
    checks.push(Check {
        name: "backbone_composite",
        module: "blocks",
        tolerance: COMPOSITE_TOL,
        run: Box::new(move |rng| {
            let mut store = ParamStore::new();
            let mut scope = Scope::root(&mut store, 0);
            let cfg = crate::blocks::BlockConfig {
                patch_size: 2,
                channels: [2, 3, 4, 5],
                depths: [1, 1, 1, 1],
                d_state: 2,
                ffn_ratio: 2,
                drop_path: 0.0,
            };
            let bb = Backbone::new(&mut scope, &cfg)?;
            randomize_store(rng, &mut store, 0.3);
            check_module(rng, &mut store, &[(&[1, 3, 16, 16], img)], 10, 12, &|p, x| {
                let maps = bb.fwd(p, &x[0], &mut Ctx::eval())?;
                let flat: Vec<Tensor> = maps
                    .iter()
                    .map(|m| m.reshape(&[1, m.numel(), 1, 1]))
                    .collect::<Result<_>>()?;
                Tensor::concat_channels(&flat)
            })
        }),
    });

    // ── losses ──
    // Edge and huber terms hide kinks (|.| and clamp corners); their draws
    // reject samples near those corners so the FD oracle stays valid.
    let soft = Draw::Uniform(0.05, 0.95);
    checks.push(loss_check("loss_ce", move |rng| {
        check_fn(rng, &[(&[1, 1, 4, 4], soft), (&[1, 1, 4, 4], soft)], &|t| {
            crate::losses::loss_ce(&t[0], &t[1], &Default::default())
        })
    }));
    checks.push(loss_check("loss_dice", move |rng| {
        check_fn(rng, &[(&[1, 1, 4, 4], soft), (&[1, 1, 4, 4], soft)], &|t| {
            crate::losses::loss_dice(&t[0], &t[1], &Default::default())
        })
    }));
    checks.push(loss_check("loss_edge", |rng| {
        let shapes = vec![vec![1, 1, 5, 5], vec![1, 1, 5, 5]];
        let datas = vec![edge_safe_mask(rng, 5, 5), edge_safe_mask(rng, 5, 5)];
        check_prepared(rng, &shapes, &datas, &|t| {
            crate::losses::loss_edge(&t[0], &t[1], &Default::default())
        })
    }));
    checks.push(loss_check("loss_huber", |rng| {
        let shapes = vec![vec![1, 1, 4, 4], vec![1, 1, 4, 4]];
        let (gt, pred) = huber_safe_pair(rng, 16, 1.0);
        check_prepared(rng, &shapes, &[gt, pred], &|t| {
            crate::losses::loss_huber(&t[0], &t[1], &Default::default())
        })
    }));
    checks.push(loss_check("loss_seg", |rng| {
        let shapes = vec![vec![1, 1, 5, 5], vec![1, 1, 5, 5]];
        let datas = vec![edge_safe_mask(rng, 5, 5), edge_safe_mask(rng, 5, 5)];
        check_prepared(rng, &shapes, &datas, &|t| {
            crate::losses::loss_seg(&t[0], &t[1], &Default::default())
        })
    }));
    checks.push(loss_check("loss_total", |rng| {
        let shapes = vec![vec![1, 1, 5, 5]; 4];
        let (h_gt, h_pred) = huber_safe_pair(rng, 25, 1.0);
        let datas = vec![edge_safe_mask(rng, 5, 5), edge_safe_mask(rng, 5, 5), h_gt, h_pred];
        check_prepared(rng, &shapes, &datas, &|t| {
            Ok(crate::losses::loss_total(&t[0], &t[1], &t[2], &t[3], &Default::default())?.total)
        })
    }));

    if module == "all" {
        return checks;
    }
    checks.retain(|c| c.module == module);
    checks
}

fn loss_check(name: &'static str, run: impl Fn(&mut StdRng) -> Result<f64> + 'static) -> Check {
    Check { name, module: "losses", tolerance: DEFAULT_TOL, run: Box::new(run) }
}

/// Mask whose Laplacian magnitudes sit clear of the clamp corners at 0 and 1,
/// keeping the edge loss differentiable at the sampled point. The margin also
/// bounds the curvature of the log terms: near |lap| = q the third derivative
/// grows like 1/q³, so small q lets central-difference truncation error climb
/// toward the tolerance.
fn edge_safe_mask(rng: &mut StdRng, h: usize, w: usize) -> Vec<f64> {
    loop {
        let cand = draw_vec(rng, h * w, Draw::Uniform(0.3, 0.7));
        if laplacian_margin_ok(&cand, h, w, 1.5e-2) {
            return cand;
        }
    }
}

fn laplacian_margin_ok(m: &[f64], h: usize, w: usize, margin: f64) -> bool {
    for r in 0..h {
        for c in 0..w {
            let mut acc = -4.0 * m[r * w + c];
            for (dr, dc) in [(-1i64, 0), (1, 0), (0, -1), (0, 1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                    acc += m[rr as usize * w + cc as usize];
                }
            }
            let a = acc.abs();
            if a < margin || (a - 1.0).abs() < margin {
                return false;
            }
        }
    }
    true
}

/// Ground truth plus a prediction whose per-pixel error stays clear of both
/// huber kinks (|e| = 0 and |e| = delta).
fn huber_safe_pair(rng: &mut StdRng, n: usize, delta: f64) -> (Vec<f64>, Vec<f64>) {
    let gt = draw_vec(rng, n, Draw::Uniform(0.0, 3.0));
    let pred = gt
        .iter()
        .map(|g| loop {
            let e: f64 = rng.gen_range(-2.0..2.0);
            if e.abs() > 5e-3 && (e.abs() - delta).abs() > 5e-3 {
                break g + e;
            }
        })
        .collect();
    (gt, pred)
}

pub fn known_modules() -> Vec<&'static str> {
    let mut m: Vec<&'static str> = registry("all").iter().map(|c| c.module).collect();
    m.dedup();
    m
}

/// Run `trials` random trials of every check in `module`.
pub fn run_checks(module: &str, trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let checks = registry(module);
    if checks.is_empty() {
        return Err(crate::error::Error::invalid(
            "gradcheck",
            format!("unknown module '{}'; known: {:?} or 'all'", module, known_modules()),
        ));
    }
    let mut reports = Vec::with_capacity(checks.len());
    for c in checks {
        let mut rng = StdRng::seed_from_u64(seed ^ fnv1a(c.name));
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max((c.run)(&mut rng)?);
        }
        reports.push(CheckReport {
            op: c.name.to_string(),
            trials,
            max_rel_err: worst,
            tolerance: c.tolerance,
        });
    }
    Ok(reports)
}

/// Stable 64-bit string hash used to decorrelate per-check RNG streams.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ssm_ops_pass_fd() {
        for r in run_checks("ssm", 6, 0xBEEF).unwrap() {
            assert!(r.passed(), "{} failed: max rel err {:.3e}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn tensor_ops_pass_fd() {
        for r in run_checks("tensor", 6, 0x5eed).unwrap() {
            assert!(r.passed(), "{} failed: max rel err {:.3e}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn block_modules_pass_fd() {
        for r in run_checks("blocks", 2, 0xB10C).unwrap() {
            assert!(r.passed(), "{} failed: max rel err {:.3e}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn loss_fns_pass_fd() {
        for r in run_checks("losses", 4, 0x105e).unwrap() {
            assert!(r.passed(), "{} failed: max rel err {:.3e}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn harness_catches_planted_gradient_bug() {
        // A deliberately wrong backward must trip the oracle; this guards the
        // harness itself against vacuous passes.
        let mut rng = StdRng::seed_from_u64(7);
        let err = check_fn(&mut rng, &[(&[3, 3], SAFE)], &|t| {
            let x = &t[0];
            let data: Vec<f64> = x.data().iter().map(|v| v * v).collect();
            let xc = x.clone();
            Ok(Tensor::from_op(
                data,
                x.shape(),
                vec![x.clone()],
                Box::new(move |g| {
                    // claims d(x^2)/dx = x instead of 2x
                    vec![Some(g.iter().zip(xc.data()).map(|(g, x)| g * x).collect())]
                }),
            ))
        })
        .unwrap();
        assert!(err > 0.1, "planted bug went undetected: {}", err);
    }

    #[test]
    fn unknown_module_rejected() {
        assert!(run_checks("nonsense", 1, 0).is_err());
    }
}
