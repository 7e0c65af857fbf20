//! Evaluation metrics: mask IoU/F1 from pooled confusion counts, height RMSE,
//! and the threshold-ratio deltas.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct MetricsConfig {
    /// Ratio deltas are restricted to pixels with max(gt, pred) above this.
    pub h_min: f64,
    /// Pool squared errors across all pixels instead of averaging per-image
    /// RMSE values.
    pub pooled_rmse: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { h_min: 1.0, pooled_rmse: false }
    }
}

pub const CSV_HEADER: &str = "iou,f1,rmse,delta1,delta2,delta3";

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub iou: f64,
    pub f1: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iou, self.f1, self.rmse, self.delta1, self.delta2, self.delta3
        )
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn confusion(mask_gt: &Tensor, mask_pred: &Tensor) -> Result<(u64, u64, u64)> {
    same_shape("metric_iou_f1", mask_gt, mask_pred)?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&g, &p) in mask_gt.data().iter().zip(mask_pred.data()) {
        if (g != 0.0 && g != 1.0) || (p != 0.0 && p != 1.0) {
            return Err(Error::invalid("metric_iou_f1", format!("non-binary value pair ({}, {})", g, p)));
        }
        match (g == 1.0, p == 1.0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

fn iou_f1_from_counts(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    if tp + fp + fn_ == 0 {
        // both masks empty: nothing to miss, score as perfect agreement
        return (1.0, 1.0);
    }
    let iou = tp as f64 / (tp + fp + fn_) as f64;
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    (iou, f1)
}

/// Binary-mask overlap. Returns (iou, f1, tp, fp, fn); inputs must be exactly
/// {0,1} valued.
pub fn metric_iou_f1(mask_gt: &Tensor, mask_pred: &Tensor) -> Result<(f64, f64, u64, u64, u64)> {
    let (tp, fp, fn_) = confusion(mask_gt, mask_pred)?;
    let (iou, f1) = iou_f1_from_counts(tp, fp, fn_);
    Ok((iou, f1, tp, fp, fn_))
}

/// Root mean squared height error over one image.
pub fn metric_rmse(h_gt: &Tensor, h_pred: &Tensor) -> Result<f64> {
    same_shape("metric_rmse", h_gt, h_pred)?;
    let n = h_gt.numel() as f64;
    let ss: f64 = h_gt.data().iter().zip(h_pred.data()).map(|(g, p)| (g - p) * (g - p)).sum();
    Ok((ss / n).sqrt())
}

/// Fraction of qualifying pixels whose height ratio stays under 1.25^n.
/// Pixels where both maps are at or below `h_min` are skipped; `None` when no
/// pixel qualifies.
pub fn metric_delta(h_gt: &Tensor, h_pred: &Tensor, n: u32, h_min: f64) -> Result<Option<f64>> {
    same_shape("metric_delta", h_gt, h_pred)?;
    if !(1..=3).contains(&n) {
        return Err(Error::invalid("metric_delta", format!("n must be 1..=3, got {}", n)));
    }
    let thr = 1.25f64.powi(n as i32);
    let (mut hits, mut total) = (0u64, 0u64);
    for (&g, &p) in h_gt.data().iter().zip(h_pred.data()) {
        if g.max(p) <= h_min {
            continue;
        }
        total += 1;
        if (g / p).max(p / g) < thr {
            hits += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Hard mask from a soft prediction, threshold 0.5.
pub fn binarize_pred(soft: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = soft.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(data, soft.shape())
}

/// Streaming aggregator over an evaluation set: confusion counts and delta
/// pixels pool across images, RMSE follows the configured reduction.
pub struct SetEvaluator {
    cfg: MetricsConfig,
    tp: u64,
    fp: u64,
    fn_: u64,
    rmse_acc: f64,
    sq_count: u64,
    images: u64,
    delta_hits: [u64; 3],
    delta_total: u64,
}

impl SetEvaluator {
    pub fn new(cfg: MetricsConfig) -> SetEvaluator {
        SetEvaluator {
            cfg,
            tp: 0,
            fp: 0,
            fn_: 0,
            rmse_acc: 0.0,
            sq_count: 0,
            images: 0,
            delta_hits: [0; 3],
            delta_total: 0,
        }
    }

    /// Fold in one image. The predicted mask may be soft; it is binarized at
    /// 0.5 before scoring. Ground truth must already be binary.
    pub fn add_image(
        &mut self,
        mask_gt: &Tensor,
        mask_pred_soft: &Tensor,
        h_gt: &Tensor,
        h_pred: &Tensor,
    ) -> Result<()> {
        let hard = binarize_pred(mask_pred_soft)?;
        let (tp, fp, fn_) = confusion(mask_gt, &hard)?;
        self.tp += tp;
        self.fp += fp;
        self.fn_ += fn_;

        same_shape("metric_rmse", h_gt, h_pred)?;
        let ss: f64 = h_gt.data().iter().zip(h_pred.data()).map(|(g, p)| (g - p) * (g - p)).sum();
        if self.cfg.pooled_rmse {
            self.rmse_acc += ss;
            self.sq_count += h_gt.numel() as u64;
        } else {
            self.rmse_acc += (ss / h_gt.numel() as f64).sqrt();
        }
        self.images += 1;

        let thrs = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
        for (&g, &p) in h_gt.data().iter().zip(h_pred.data()) {
            if g.max(p) <= self.cfg.h_min {
                continue;
            }
            self.delta_total += 1;
            let r = (g / p).max(p / g);
            for (hit, &t) in self.delta_hits.iter_mut().zip(&thrs) {
                if r < t {
                    *hit += 1;
                }
            }
        }
        Ok(())
    }

    /// Final report. Deltas come out NaN when no pixel ever qualified.
    pub fn finish(&self) -> Result<MetricsReport> {
        if self.images == 0 {
            return Err(Error::invalid("metrics", "no images evaluated"));
        }
        let (iou, f1) = iou_f1_from_counts(self.tp, self.fp, self.fn_);
        let rmse = if self.cfg.pooled_rmse {
            (self.rmse_acc / self.sq_count as f64).sqrt()
        } else {
            self.rmse_acc / self.images as f64
        };
        let d = |i: usize| {
            if self.delta_total == 0 {
                f64::NAN
            } else {
                self.delta_hits[i] as f64 / self.delta_total as f64
            }
        };
        Ok(MetricsReport {
            iou,
            f1,
            rmse,
            delta1: d(0),
            delta2: d(1),
            delta3: d(2),
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: Vec<f64>, s: &[usize]) -> Tensor {
        Tensor::new(v, s).unwrap()
    }

    #[test]
    fn identical_nonempty_masks_score_one() {
        let m = t(vec![1.0, 0.0, 1.0, 1.0], &[1, 1, 2, 2]);
        let (iou, f1, tp, fp, fn_) = metric_iou_f1(&m, &m).unwrap();
        assert_eq!((iou, f1), (1.0, 1.0));
        assert_eq!((tp, fp, fn_), (3, 0, 0));
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero() {
        let a = t(vec![1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]);
        let b = t(vec![0.0, 0.0, 1.0, 1.0], &[1, 1, 2, 2]);
        let (iou, f1, ..) = metric_iou_f1(&a, &b).unwrap();
        assert_eq!((iou, f1), (0.0, 0.0));
    }

    #[test]
    fn partial_overlap_counts() {
        // gt holds 4 px, pred hits 2 of them and adds 2 spurious ones
        let gt = t(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], &[1, 1, 2, 4]);
        let pr = t(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 4]);
        let (iou, f1, tp, fp, fn_) = metric_iou_f1(&gt, &pr).unwrap();
        assert_eq!((tp, fp, fn_), (2, 2, 2));
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn both_empty_is_perfect() {
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        let (iou, f1, ..) = metric_iou_f1(&z, &z).unwrap();
        assert_eq!((iou, f1), (1.0, 1.0));
    }

    #[test]
    fn soft_values_rejected() {
        let soft = t(vec![0.5, 1.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let hard = t(vec![1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]);
        assert!(metric_iou_f1(&soft, &hard).is_err());
        assert!(metric_iou_f1(&hard, &soft).is_err());
    }

    #[test]
    fn rmse_known_values() {
        let a = t(vec![2.0, 5.0], &[1, 1, 1, 2]);
        assert_eq!(metric_rmse(&a, &a).unwrap(), 0.0);
        let biased = t(vec![4.5, 7.5], &[1, 1, 1, 2]);
        assert!((metric_rmse(&a, &biased).unwrap() - 2.5).abs() < 1e-15);
        let gt = t(vec![0.0, 0.0], &[1, 1, 1, 2]);
        let pr = t(vec![1.0, 3.0], &[1, 1, 1, 2]);
        assert!((metric_rmse(&gt, &pr).unwrap() - 5.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn delta_threshold_ladder() {
        let gt = t(vec![2.0, 4.0, 8.0, 16.0], &[1, 1, 2, 2]);
        let same = metric_delta(&gt, &gt, 1, 1.0).unwrap().unwrap();
        assert_eq!(same, 1.0);

        let scaled = t(gt.data().iter().map(|v| v * 1.3).collect(), &[1, 1, 2, 2]);
        assert_eq!(metric_delta(&gt, &scaled, 1, 1.0).unwrap().unwrap(), 0.0);
        assert_eq!(metric_delta(&gt, &scaled, 2, 1.0).unwrap().unwrap(), 1.0);
        assert_eq!(metric_delta(&gt, &scaled, 3, 1.0).unwrap().unwrap(), 1.0);

        let doubled = t(gt.data().iter().map(|v| v * 2.0).collect(), &[1, 1, 2, 2]);
        for n in 1..=3 {
            assert_eq!(metric_delta(&gt, &doubled, n, 1.0).unwrap().unwrap(), 0.0);
        }
    }

    #[test]
    fn delta_skips_low_pixels_and_reports_undefined() {
        // only the second pixel clears h_min; it misses delta1
        let gt = t(vec![0.4, 3.0], &[1, 1, 1, 2]);
        let pr = t(vec![0.1, 4.5], &[1, 1, 1, 2]);
        assert_eq!(metric_delta(&gt, &pr, 1, 1.0).unwrap().unwrap(), 0.0);
        assert_eq!(metric_delta(&gt, &pr, 2, 1.0).unwrap().unwrap(), 1.0);

        let low = t(vec![0.2, 0.9], &[1, 1, 1, 2]);
        assert!(metric_delta(&low, &low, 1, 1.0).unwrap().is_none());
    }

    #[test]
    fn delta_rejects_bad_n() {
        let a = t(vec![2.0], &[1, 1, 1, 1]);
        assert!(metric_delta(&a, &a, 0, 1.0).is_err());
        assert!(metric_delta(&a, &a, 4, 1.0).is_err());
    }

    #[test]
    fn per_image_vs_pooled_rmse() {
        // image 1 has |e|=1 everywhere, image 2 |e|=3: per-image mean is 2,
        // pooling the pixels gives sqrt(5)
        let gt = Tensor::zeros(&[1, 1, 2, 2]);
        let p1 = t(vec![1.0; 4], &[1, 1, 2, 2]);
        let p3 = t(vec![3.0; 4], &[1, 1, 2, 2]);
        let mask = t(vec![1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);

        let mut per = SetEvaluator::new(MetricsConfig::default());
        per.add_image(&mask, &mask, &gt, &p1).unwrap();
        per.add_image(&mask, &mask, &gt, &p3).unwrap();
        assert!((per.finish().unwrap().rmse - 2.0).abs() < 1e-15);

        let mut pooled = SetEvaluator::new(MetricsConfig { pooled_rmse: true, ..Default::default() });
        pooled.add_image(&mask, &mask, &gt, &p1).unwrap();
        pooled.add_image(&mask, &mask, &gt, &p3).unwrap();
        assert!((pooled.finish().unwrap().rmse - 5.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn evaluator_binarizes_and_pools_counts() {
        let gt = t(vec![1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]);
        let soft = t(vec![0.9, 0.2, 0.7, 0.1], &[1, 1, 2, 2]);
        let h = t(vec![3.0, 2.0, 0.0, 0.0], &[1, 1, 2, 2]);
        let mut ev = SetEvaluator::new(MetricsConfig::default());
        ev.add_image(&gt, &soft, &h, &h).unwrap();
        ev.add_image(&gt, &soft, &h, &h).unwrap();
        let r = ev.finish().unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 2, 2));
        assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.delta1, 1.0);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn empty_evaluator_rejected_and_csv_shape() {
        assert!(SetEvaluator::new(MetricsConfig::default()).finish().is_err());
        let r = MetricsReport {
            iou: 0.5,
            f1: 2.0 / 3.0,
            rmse: 1.25,
            delta1: 0.1,
            delta2: 0.2,
            delta3: 0.3,
            tp: 1,
            fp: 1,
            fn_: 1,
        };
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("0.500000,0.666667,1.250000,"));
    }

    proptest! {
        #[test]
        fn deltas_nest_and_f1_dominates_iou(
            gvals in proptest::collection::vec(0.0f64..30.0, 36),
            pvals in proptest::collection::vec(0.0f64..30.0, 36),
            bits_g in proptest::collection::vec(0u8..2, 36),
            bits_p in proptest::collection::vec(0u8..2, 36),
        ) {
            let g = t(gvals, &[1, 1, 6, 6]);
            let p = t(pvals, &[1, 1, 6, 6]);
            let mg = t(bits_g.iter().map(|&b| b as f64).collect(), &[1, 1, 6, 6]);
            let mp = t(bits_p.iter().map(|&b| b as f64).collect(), &[1, 1, 6, 6]);

            let (iou, f1, ..) = metric_iou_f1(&mg, &mp).unwrap();
            prop_assert!(iou <= f1 + 1e-15);
            prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);

            let d1 = metric_delta(&g, &p, 1, 1.0).unwrap();
            let d2 = metric_delta(&g, &p, 2, 1.0).unwrap();
            let d3 = metric_delta(&g, &p, 3, 1.0).unwrap();
            if let (Some(a), Some(b), Some(c)) = (d1, d2, d3) {
                prop_assert!(a <= b && b <= c);
            }
        }

        #[test]
        fn pixel_permutation_invariance(
            gvals in proptest::collection::vec(0.5f64..20.0, 16),
            shift in 1usize..15,
        ) {
            let g = t(gvals.clone(), &[1, 1, 4, 4]);
            let p = t(gvals.iter().map(|v| v * 1.4).collect(), &[1, 1, 4, 4]);
            let rot = |v: &[f64]| -> Vec<f64> {
                let mut out = v.to_vec();
                out.rotate_left(shift);
                out
            };
            let gr = t(rot(g.data()), &[1, 1, 4, 4]);
            let pr = t(rot(p.data()), &[1, 1, 4, 4]);
            let a = metric_rmse(&g, &p).unwrap();
            let b = metric_rmse(&gr, &pr).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(
                metric_delta(&g, &p, 2, 1.0).unwrap(),
                metric_delta(&gr, &pr, 2, 1.0).unwrap()
            );
        }
    }
}
