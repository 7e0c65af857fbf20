//! Softmax and channelwise LayerNorm.

use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::invalid("softmax", "rank 0 tensor"));
        }
        let n = s[s.len() - 1];
        if n == 0 {
            return Err(Error::invalid("softmax", "empty softmax axis"));
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let start = data.len();
            for &v in row {
                let e = (v - m).exp();
                denom += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= denom;
            }
        }
        let y = data.clone();
        Ok(Tensor::from_op(
            data,
            s,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(g.len());
                for (g_row, y_row) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum();
                    for (gv, yv) in g_row.iter().zip(y_row) {
                        dx.push(yv * (gv - dot));
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// LayerNorm across the channel axis of [B,C,H,W], per spatial position.
    pub fn layer_norm_channels(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("layer_norm", format!("expected rank 4, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: vec![c],
                right: gamma.shape().to_vec(),
            });
        }
        let hw = h * w;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let cf = c as f64;

        let mut out = vec![0.0; xd.len()];
        let mut mean = vec![0.0; b * hw];
        let mut istd = vec![0.0; b * hw];
        for bi in 0..b {
            let m = &mut mean[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (mv, &xv) in m.iter_mut().zip(plane) {
                    *mv += xv;
                }
            }
            for mv in m.iter_mut() {
                *mv /= cf;
            }
            let is = &mut istd[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (k, &xv) in plane.iter().enumerate() {
                    let d = xv - m[k];
                    is[k] += d * d;
                }
            }
            for v in is.iter_mut() {
                *v = 1.0 / (*v / cf + eps).sqrt();
            }
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let o_plane = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let (gc, bc) = (gd[ci], bd[ci]);
                for (k, (&xv, ov)) in plane.iter().zip(o_plane.iter_mut()).enumerate() {
                    *ov = gc * (xv - m[k]) * is[k] + bc;
                }
            }
        }

        let x = self.clone();
        let gamma_t = gamma.clone();
        Ok(Tensor::from_op(
            out,
            s,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let xd = x.data();
                let gd = gamma_t.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    let m = &mean[bi * hw..(bi + 1) * hw];
                    let is = &istd[bi * hw..(bi + 1) * hw];
                    // s1 = sum_c dxhat, s2 = sum_c dxhat * xhat, per position
                    let mut s1 = vec![0.0; hw];
                    let mut s2 = vec![0.0; hw];
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let gc = gd[ci];
                        let (mut dg, mut db) = (0.0, 0.0);
                        for k in 0..hw {
                            let gv = g[base + k];
                            let xhat = (xd[base + k] - m[k]) * is[k];
                            let dxhat = gv * gc;
                            s1[k] += dxhat;
                            s2[k] += dxhat * xhat;
                            dg += gv * xhat;
                            db += gv;
                        }
                        dgamma[ci] += dg;
                        dbeta[ci] += db;
                    }
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let gc = gd[ci];
                        for k in 0..hw {
                            let xhat = (xd[base + k] - m[k]) * is[k];
                            let dxhat = g[base + k] * gc;
                            dx[base + k] = is[k] * (dxhat - (s1[k] + xhat * s2[k]) / cf);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }
}
