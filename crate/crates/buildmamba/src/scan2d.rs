//! Cross-Scan and Cross-Merge: a 2-D feature map unfolded into four
//! directional 1-D traversals and folded back by the inverse permutations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajor,
    RowMajorReversed,
    ColMajor,
    ColMajorReversed,
}

pub const ALL_DIRECTIONS: [ScanDirection; 4] = [
    ScanDirection::RowMajor,
    ScanDirection::RowMajorReversed,
    ScanDirection::ColMajor,
    ScanDirection::ColMajorReversed,
];

/// Visiting order: perm[t] is the flattened (row*w + col) position read at
/// step t.
pub fn scan_perm(dir: ScanDirection, h: usize, w: usize) -> Vec<usize> {
    let l = h * w;
    match dir {
        ScanDirection::RowMajor => (0..l).collect(),
        ScanDirection::RowMajorReversed => (0..l).rev().collect(),
        ScanDirection::ColMajor => {
            let mut p = Vec::with_capacity(l);
            for c in 0..w {
                for r in 0..h {
                    p.push(r * w + c);
                }
            }
            p
        }
        ScanDirection::ColMajorReversed => {
            let mut p = scan_perm(ScanDirection::ColMajor, h, w);
            p.reverse();
            p
        }
    }
}

/// [B,C,H,W] -> four [B,C,H*W] directional sequences.
pub fn cross_scan(x: &Tensor) -> Result<Vec<Tensor>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("cross_scan", format!("expected rank 4, got {:?}", s)));
    }
    let (h, w) = (s[2], s[3]);
    if h == 0 || w == 0 {
        return Err(Error::invalid("cross_scan", "empty spatial extent"));
    }
    ALL_DIRECTIONS
        .iter()
        .map(|&d| x.gather_hw(Rc::new(scan_perm(d, h, w))))
        .collect()
}

/// Inverse of `cross_scan` followed by summation: each sequence scatters back
/// through its own permutation and the four maps are added.
pub fn cross_merge(seqs: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if seqs.len() != 4 {
        return Err(Error::invalid("cross_merge", format!("expected 4 sequences, got {}", seqs.len())));
    }
    let l = h * w;
    for s in seqs {
        if s.shape().len() != 3 || s.shape()[2] != l {
            return Err(Error::ShapeMismatch {
                op: "cross_merge",
                left: vec![h, w],
                right: s.shape().to_vec(),
            });
        }
    }
    let mut acc: Option<Tensor> = None;
    for (seq, &d) in seqs.iter().zip(&ALL_DIRECTIONS) {
        let m = seq.scatter_hw(Rc::new(scan_perm(d, h, w)), h, w)?;
        acc = Some(match acc {
            Some(a) => a.add(&m)?,
            None => m,
        });
    }
    Ok(acc.unwrap())
}
