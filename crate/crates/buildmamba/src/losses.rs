//! Composite training objective: pixel BCE, Dice overlap, Laplacian edge
//! agreement (weighted 10x), Huber height regression, and their sum.

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Per-pixel mean; keeps the edge weight resolution-independent.
    Mean,
    /// Raw per-pixel sum.
    Sum,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub edge_weight: f64,
    pub huber_delta: f64,
    pub eps: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { edge_weight: 10.0, huber_delta: 1.0, eps: 1e-7, reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edge_weight < 0.0 {
            return Err(Error::invalid("loss_config", "edge_weight must be nonnegative"));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::invalid("loss_config", "huber_delta must be positive"));
        }
        if !(self.eps > 0.0 && self.eps < 1e-2) {
            return Err(Error::invalid("loss_config", "eps must lie in (0, 1e-2)"));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn reduce(t: &Tensor, r: Reduction) -> Tensor {
    match r {
        Reduction::Mean => t.mean_all(),
        Reduction::Sum => t.sum_all(),
    }
}

/// -[t log p + (1-t) log(1-p)] with p clamped into [eps, 1-eps]; the clamp
/// keeps the pixel terms (hence the loss) nonnegative.
fn bce(target: &Tensor, pred: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let p = pred.clamp(cfg.eps, 1.0 - cfg.eps);
    let pos = target.mul(&p.ln())?;
    let neg = target.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0).ln())?;
    Ok(reduce(&pos.add(&neg)?.neg(), cfg.reduction))
}

pub fn loss_ce(s_gt: &Tensor, s_pred: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape("loss_ce", s_gt, s_pred)?;
    bce(s_gt, s_pred, cfg)
}

/// 1 - (2|S ∩ Ŝ| + eps) / (|S| + |Ŝ| + eps); the eps convention scores the
/// all-empty case as a perfect 0.
pub fn loss_dice(s_gt: &Tensor, s_pred: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape("loss_dice", s_gt, s_pred)?;
    let inter = s_gt.mul(s_pred)?.sum_all();
    let denom = s_gt.sum_all().add(&s_pred.sum_all())?;
    let overlap = inter.scale(2.0).add_scalar(cfg.eps).div(&denom.add_scalar(cfg.eps))?;
    Ok(overlap.neg().add_scalar(1.0))
}

/// Second-derivative edge response: |Laplacian * m| clamped into [0,1].
pub fn edge_map(mask: &Tensor) -> Result<Tensor> {
    let k = Tensor::new(vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0], &[1, 1, 3, 3])?;
    let lap = mask.conv2d(&k, None, Conv2dSpec { padding: 1, ..Default::default() })?;
    Ok(lap.abs().clamp(0.0, 1.0))
}

pub fn loss_edge(s_gt: &Tensor, s_pred: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape("loss_edge", s_gt, s_pred)?;
    bce(&edge_map(s_gt)?, &edge_map(s_pred)?, cfg)
}

/// ce + dice + edge_weight * edge.
pub fn loss_seg(s_gt: &Tensor, s_pred: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let ce = loss_ce(s_gt, s_pred, cfg)?;
    let dice = loss_dice(s_gt, s_pred, cfg)?;
    let edge = loss_edge(s_gt, s_pred, cfg)?;
    ce.add(&dice)?.add(&edge.scale(cfg.edge_weight))
}

/// Quadratic inside |e| < delta, linear beyond; gradient magnitude never
/// exceeds delta.
pub fn loss_huber(h_gt: &Tensor, h_pred: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    same_shape("loss_huber", h_gt, h_pred)?;
    let e = h_pred.sub(h_gt)?.abs();
    let q = e.clamp(0.0, cfg.huber_delta);
    let per_px = q.mul(&q)?.scale(0.5).add(&e.sub(&q)?.scale(cfg.huber_delta))?;
    Ok(reduce(&per_px, cfg.reduction))
}

/// Per-term values captured at graph build time so a training loop can log
/// and blame a non-finite component without recomputation.
pub struct LossTerms {
    pub total: Tensor,
    pub ce: f64,
    pub dice: f64,
    pub edge: f64,
    pub seg: f64,
    pub reg: f64,
}

impl LossTerms {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("dice", self.dice),
            ("edge", self.edge),
            ("huber", self.reg),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| *n)
    }
}

pub fn loss_total(
    s_gt: &Tensor,
    s_pred: &Tensor,
    h_gt: &Tensor,
    h_pred: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ce = loss_ce(s_gt, s_pred, cfg)?;
    let dice = loss_dice(s_gt, s_pred, cfg)?;
    let edge = loss_edge(s_gt, s_pred, cfg)?;
    let reg = loss_huber(h_gt, h_pred, cfg)?;
    let seg = ce.add(&dice)?.add(&edge.scale(cfg.edge_weight))?;
    let total = seg.add(&reg)?;
    Ok(LossTerms {
        total,
        ce: ce.item(),
        dice: dice.item(),
        edge: edge.item(),
        seg: seg.item(),
        reg: reg.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn t(v: Vec<f64>, s: &[usize]) -> Tensor {
        Tensor::new(v, s).unwrap()
    }

    #[test]
    fn ce_perfect_confident_prediction_is_near_zero() {
        let gt = t(vec![1.0, 0.0, 1.0, 0.0], &[1, 1, 2, 2]);
        let pred = t(vec![1.0 - 1e-7, 1e-7, 1.0 - 1e-7, 1e-7], &[1, 1, 2, 2]);
        let l = loss_ce(&gt, &pred, &cfg()).unwrap().item();
        assert!(l >= 0.0 && l < 1e-6, "{}", l);
    }

    #[test]
    fn ce_at_half_is_ln_two_per_pixel() {
        let gt = t(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0], &[2, 3]);
        let pred = Tensor::full(&[2, 3], 0.5);
        let l = loss_ce(&gt, &pred, &cfg()).unwrap().item();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
        let sum_cfg = LossConfig { reduction: Reduction::Sum, ..cfg() };
        let ls = loss_ce(&gt, &pred, &sum_cfg).unwrap().item();
        assert!((ls - 6.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_identities() {
        let a = t(vec![1.0, 0.0, 1.0, 0.0], &[4]);
        assert!(loss_dice(&a, &a, &cfg()).unwrap().item() == 0.0);
        let b = t(vec![0.0, 1.0, 0.0, 1.0], &[4]);
        let disj = loss_dice(&a, &b, &cfg()).unwrap().item();
        assert!((disj - 1.0).abs() < 1e-6);
        let z = Tensor::zeros(&[4]);
        assert!(loss_dice(&z, &z, &cfg()).unwrap().item() == 0.0);
    }

    #[test]
    fn edge_constant_masks_near_zero() {
        let z = Tensor::zeros(&[1, 1, 5, 5]);
        let l = loss_edge(&z, &z, &cfg()).unwrap().item();
        assert!(l >= 0.0 && l < 1e-6, "{}", l);
    }

    #[test]
    fn edge_map_of_single_pixel_matches_hand_convolution() {
        let mut m = vec![0.0; 25];
        m[12] = 1.0; // center of 5x5
        let gt = t(m, &[1, 1, 5, 5]);
        let e = edge_map(&gt).unwrap();
        // Laplacian: -4 at the pixel, +1 at its four neighbors, clamped to 1
        let mut expect = vec![0.0; 25];
        for &i in &[12, 7, 17, 11, 13] {
            expect[i] = 1.0;
        }
        assert_eq!(e.data(), expect.as_slice());
    }

    #[test]
    fn edge_loss_matches_direct_summation() {
        let mut m = vec![0.0; 25];
        m[12] = 1.0;
        let gt = t(m, &[1, 1, 5, 5]);
        let pred = Tensor::full(&[1, 1, 5, 5], 0.2);
        let l = loss_edge(&gt, &pred, &cfg()).unwrap().item();
        // by hand: lhat from a constant 0.2 map under zero padding
        let lh = |v: f64| v.abs().min(1.0);
        let mut lhat = vec![0.0; 25];
        for r in 0..5 {
            for c in 0..5 {
                let nb: f64 = [(r as i64 - 1, c as i64), (r as i64 + 1, c as i64), (r as i64, c as i64 - 1), (r as i64, c as i64 + 1)]
                    .iter()
                    .filter(|(rr, cc)| (0..5).contains(rr) && (0..5).contains(cc))
                    .count() as f64
                    * 0.2;
                lhat[r * 5 + c] = lh(nb - 0.8);
            }
        }
        let ltgt: Vec<f64> = {
            let mut v = vec![0.0; 25];
            for &i in &[12, 7, 17, 11, 13] {
                v[i] = 1.0;
            }
            v
        };
        let eps = 1e-7;
        let mut s = 0.0;
        for i in 0..25 {
            let p = lhat[i].clamp(eps, 1.0 - eps);
            s += -(ltgt[i] * p.ln() + (1.0 - ltgt[i]) * (1.0 - p).ln());
        }
        assert!((l - s / 25.0).abs() < 1e-12, "{} vs {}", l, s / 25.0);
    }

    #[test]
    fn huber_branch_values_and_continuity() {
        let c = cfg();
        let z = Tensor::zeros(&[1]);
        assert_eq!(loss_huber(&z, &z, &c).unwrap().item(), 0.0);
        // single pixel, error 2, delta 1: linear branch
        let l = loss_huber(&t(vec![0.0], &[1]), &t(vec![2.0], &[1]), &c).unwrap().item();
        assert!((l - 1.5).abs() < 1e-15);
        // both branches agree at |e| = delta
        let at = loss_huber(&t(vec![0.0], &[1]), &t(vec![1.0], &[1]), &c).unwrap().item();
        assert!((at - 0.5).abs() < 1e-15);
        // quadratic just below
        let lo = loss_huber(&t(vec![0.0], &[1]), &t(vec![0.4], &[1]), &c).unwrap().item();
        assert!((lo - 0.5 * 0.16).abs() < 1e-15);
    }

    #[test]
    fn seg_recomposes_and_edge_weight_zero_drops_edge() {
        let gt = t(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0], &[1, 1, 3, 3]);
        let pred = t(
            vec![0.8, 0.2, 0.3, 0.7, 0.9, 0.1, 0.4, 0.6, 0.55],
            &[1, 1, 3, 3],
        );
        let c = cfg();
        let parts = loss_ce(&gt, &pred, &c).unwrap().item()
            + loss_dice(&gt, &pred, &c).unwrap().item()
            + 10.0 * loss_edge(&gt, &pred, &c).unwrap().item();
        let whole = loss_seg(&gt, &pred, &c).unwrap().item();
        assert!((whole - parts).abs() < 1e-12);

        let no_edge = LossConfig { edge_weight: 0.0, ..c };
        let w0 = loss_seg(&gt, &pred, &no_edge).unwrap().item();
        let ce_dice = loss_ce(&gt, &pred, &c).unwrap().item() + loss_dice(&gt, &pred, &c).unwrap().item();
        assert!((w0 - ce_dice).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_parts_and_terms_report() {
        let s_gt = t(vec![1.0, 0.0, 1.0, 0.0], &[1, 1, 2, 2]);
        let s_pred = t(vec![0.7, 0.3, 0.6, 0.2], &[1, 1, 2, 2]);
        let h_gt = t(vec![10.0, 0.0, 5.0, 0.0], &[1, 1, 2, 2]);
        let h_pred = t(vec![9.0, 0.5, 5.5, 0.1], &[1, 1, 2, 2]);
        let c = cfg();
        let terms = loss_total(&s_gt, &s_pred, &h_gt, &h_pred, &c).unwrap();
        let seg = loss_seg(&s_gt, &s_pred, &c).unwrap().item();
        let reg = loss_huber(&h_gt, &h_pred, &c).unwrap().item();
        assert!((terms.total.item() - (seg + reg)).abs() < 1e-12);
        assert!((terms.seg - seg).abs() < 1e-12);
        assert!((terms.reg - reg).abs() < 1e-12);
        assert!(terms.non_finite_component().is_none());
    }

    #[test]
    fn non_finite_component_is_blamed() {
        let terms = LossTerms {
            total: Tensor::scalar(f64::NAN),
            ce: 1.0,
            dice: 0.5,
            edge: f64::NAN,
            seg: f64::NAN,
            reg: 2.0,
        };
        assert_eq!(terms.non_finite_component(), Some("edge"));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(LossConfig { edge_weight: -1.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { huber_delta: 0.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { eps: 0.0, ..cfg() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn losses_nonnegative_on_random_soft_masks(
            gt in proptest::collection::vec(0.0f64..1.0, 16),
            pred in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            let g = t(gt, &[1, 1, 4, 4]);
            let p = t(pred, &[1, 1, 4, 4]);
            let c = cfg();
            prop_assert!(loss_ce(&g, &p, &c).unwrap().item() >= 0.0);
            let d = loss_dice(&g, &p, &c).unwrap().item();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(loss_edge(&g, &p, &c).unwrap().item() >= 0.0);
            prop_assert!(loss_seg(&g, &p, &c).unwrap().item() >= 0.0);
        }

        #[test]
        fn huber_nonnegative_and_bounded_slope(
            gt in proptest::collection::vec(0.0f64..30.0, 9),
            err in proptest::collection::vec(-8.0f64..8.0, 9),
        ) {
            let g = t(gt.clone(), &[9]);
            let p = t(gt.iter().zip(&err).map(|(a, b)| a + b).collect(), &[9]);
            let c = cfg();
            let l = loss_huber(&g, &p, &c).unwrap().item();
            prop_assert!(l >= 0.0);
            // mean loss never exceeds the linear bound delta*mean|e|
            let bound: f64 = err.iter().map(|e| e.abs()).sum::<f64>() / 9.0;
            prop_assert!(l <= c.huber_delta * bound + 1e-12);
        }

        #[test]
        fn dice_permutation_invariant(
            vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 12),
            shift in 0usize..12,
        ) {
            let g: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let p: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let rot = |v: &[f64]| -> Vec<f64> {
                let mut o = v.to_vec();
                o.rotate_left(shift);
                o
            };
            let c = cfg();
            let d1 = loss_dice(&t(g.clone(), &[12]), &t(p.clone(), &[12]), &c).unwrap().item();
            let d2 = loss_dice(&t(rot(&g), &[12]), &t(rot(&p), &[12]), &c).unwrap().item();
            prop_assert!((d1 - d2).abs() < 1e-12);
        }
    }
}
