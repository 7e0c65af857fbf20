//! Batched matrix multiply with broadcastable leading dimensions.

use super::ops::{broadcast_shapes, row_major_strides};
use super::{numel_of, Tensor};
use crate::error::{Error, Result};

/// Offsets of each broadcast batch instance into an operand's batch space.
fn batch_offsets(batch: &[usize], out_batch: &[usize], mat_len: usize) -> Vec<usize> {
    let n: usize = out_batch.iter().product();
    let rank = out_batch.len();
    let offset = rank - batch.len();
    let strides = row_major_strides(batch);
    let mut offs = Vec::with_capacity(n.max(1));
    let mut idx = vec![0usize; rank];
    for _ in 0..n.max(1) {
        let mut o = 0usize;
        for d in 0..batch.len() {
            let i = idx[offset + d];
            if batch[d] != 1 {
                o += i * strides[d];
            }
        }
        offs.push(o * mat_len);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
        if rank == 0 {
            break;
        }
    }
    offs
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

impl Tensor {
    /// [..., m, k] x [..., k, n] -> [..., m, n]; leading dims broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::invalid(
                "matmul",
                format!("operands must have rank >= 2, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let a_batch = sa[..sa.len() - 2].to_vec();
        let b_batch = sb[..sb.len() - 2].to_vec();
        let out_batch = broadcast_shapes("matmul", &a_batch, &b_batch)?;
        let nb: usize = out_batch.iter().product::<usize>().max(1);

        let a_offs = batch_offsets(&a_batch, &out_batch, m * ka);
        let b_offs = batch_offsets(&b_batch, &out_batch, kb * n);
        let mut out_shape = out_batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let mut data = vec![0.0; numel_of(&out_shape)];
        for bi in 0..nb {
            gemm(
                &self.data()[a_offs[bi]..a_offs[bi] + m * ka],
                &other.data()[b_offs[bi]..b_offs[bi] + kb * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                ka,
                n,
            );
        }

        let (a, b) = (self.clone(), other.clone());
        let (an, bn) = (self.numel(), other.numel());
        let k = ka;
        Ok(Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; an];
                let mut db = vec![0.0; bn];
                for bi in 0..nb {
                    let gm = &g[bi * m * n..(bi + 1) * m * n];
                    let am = &a.data()[a_offs[bi]..a_offs[bi] + m * k];
                    let bm = &b.data()[b_offs[bi]..b_offs[bi] + k * n];
                    let dam = &mut da[a_offs[bi]..a_offs[bi] + m * k];
                    let dbm = &mut db[b_offs[bi]..b_offs[bi] + k * n];
                    // dA = dC B^T
                    for i in 0..m {
                        let g_row = &gm[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let b_row = &bm[kk * n..(kk + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in g_row.iter().zip(b_row) {
                                acc += gv * bv;
                            }
                            dam[i * k + kk] += acc;
                        }
                    }
                    // dB = A^T dC
                    for i in 0..m {
                        let g_row = &gm[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = am[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let db_row = &mut dbm[kk * n..(kk + 1) * n];
                            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                                *dv += aik * gv;
                            }
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_2x2() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn inner_dim_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn batched_with_shared_weight() {
        // [2,1,3] x [3,2] -> [2,1,2]
        let a = Tensor::param(vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0], &[2, 1, 3]).unwrap();
        let w = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let c = a.matmul(&w).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.data(), &[11.0, 14.0, 8.0, 10.0]);
        c.sum_all().backward().unwrap();
        // dW accumulates over the batch
        let dw = w.grad().unwrap();
        assert_eq!(dw, vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn identity_grad() {
        let a = Tensor::param(vec![2.0, -1.0, 0.5, 3.0], &[2, 2]).unwrap();
        let i = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let c = a.matmul(&i).unwrap();
        assert_eq!(c.data(), a.data());
        c.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    }
}
