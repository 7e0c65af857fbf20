//! Elementwise, movement, and reduction ops. Binary ops broadcast with the
//! trailing-dimension rule; gradients of broadcast operands are reduced back
//! to the operand shape.

use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() });
        };
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on axes the operand broadcasts over.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Sum `grad` (shaped like `out_shape`) down to `shape`.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel_of(shape)];
    let strides = broadcast_strides(shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for &g in grad {
        let mut off = 0usize;
        for d in 0..rank {
            off += idx[d] * strides[d];
        }
        out[off] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((data, a.shape().to_vec()));
    }
    let out_shape = broadcast_shapes(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel_of(&out_shape);
    let rank = out_shape.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (da, db) = (a.data(), b.data());
    for _ in 0..n {
        let (mut oa, mut ob) = (0usize, 0usize);
        for d in 0..rank {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        data.push(f(da[oa], db[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((data, out_shape))
}

/// Elementwise product of `grad` with operand `t` broadcast to `out_shape`,
/// reduced back to the other operand's shape. Shared by mul/div backward.
fn grad_times_broadcast(
    grad: &[f64],
    out_shape: &[usize],
    t: &Tensor,
    to_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let strides = broadcast_strides(t.shape(), out_shape);
    let rank = out_shape.len();
    let mut weighted = Vec::with_capacity(grad.len());
    let mut idx = vec![0usize; rank];
    let data = t.data();
    for &g in grad {
        let mut off = 0usize;
        for d in 0..rank {
            off += idx[d] * strides[d];
        }
        weighted.push(f(g, data[off]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    reduce_to_shape(&weighted, out_shape, to_shape)
}

impl Tensor {
    // ── binary elementwise ──

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (data, out_shape) = binary_forward("add", self, other, |x, y| x + y)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(reduce_to_shape(g, &os, &sa)),
                    Some(reduce_to_shape(g, &os, &sb)),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (data, out_shape) = binary_forward("sub", self, other, |x, y| x - y)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![
                    Some(reduce_to_shape(g, &os, &sa)),
                    Some(reduce_to_shape(&neg, &os, &sb)),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (data, out_shape) = binary_forward("mul", self, other, |x, y| x * y)?;
        let (a, b) = (self.clone(), other.clone());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(grad_times_broadcast(g, &os, &b, a.shape(), |g, y| g * y)),
                    Some(grad_times_broadcast(g, &os, &a, b.shape(), |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (data, out_shape) = binary_forward("div", self, other, |x, y| x / y)?;
        let (a, b) = (self.clone(), other.clone());
        let os = out_shape.clone();
        let out = data.clone();
        Ok(Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = grad_times_broadcast(g, &os, &b, a.shape(), |g, y| g / y);
                // d/db (a/b) = -(a/b)/b = -out/b
                let gov: Vec<f64> = g.iter().zip(&out).map(|(&g, &o)| -g * o).collect();
                let db = grad_times_broadcast(&gov, &os, &b, b.shape(), |go, y| go / y);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ── unary elementwise ──

    fn unary(&self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = data.clone();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * dfdx(x.data()[i], y[i]))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(|x| x * sigmoid_f(x), |x, _| {
            let s = sigmoid_f(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// ln(1 + e^x), computed overflow-safe.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        })
    }

    // ── reductions ──

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            &[1],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    // ── movement ──

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            ));
        }
        let data = self.data().to_vec();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("bad axes {:?} for rank {}", axes, rank)));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = row_major_strides(&in_shape);
        let n = self.numel();
        // map[out_lin] = in_lin
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let mut off = 0usize;
            for d in 0..rank {
                off += idx[d] * in_strides[axes[d]];
            }
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.remap(Rc::new(map), &out_shape)
    }

    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::invalid("flip", format!("axis {} out of rank {}", axis, rank)));
        }
        let shape = self.shape().to_vec();
        let strides = row_major_strides(&shape);
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let mut off = 0usize;
            for d in 0..rank {
                let i = if d == axis { shape[d] - 1 - idx[d] } else { idx[d] };
                off += i * strides[d];
            }
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.remap(Rc::new(map), &shape)
    }

    /// out[i] = in[map[i]] for a bijective map.
    fn remap(&self, map: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor> {
        let src = self.data();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let n_in = self.numel();
        let m = Rc::clone(&map);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; n_in];
                for (i, &src_i) in m.iter().enumerate() {
                    dx[src_i] += g[i];
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// [B,C,H,W] -> [B,C,L]: out[b,c,t] = in[b,c,perm[t]], perm over flattened
    /// H*W positions. Inverse of `scatter_hw` with the same perm.
    pub fn gather_hw(&self, perm: Rc<Vec<usize>>) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("gather_hw", format!("expected rank 4, got {:?}", s)));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if perm.len() != hw {
            return Err(Error::invalid(
                "gather_hw",
                format!("perm length {} does not cover {} positions", perm.len(), hw),
            ));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(b * c * hw);
        for plane in src.chunks_exact(hw) {
            for &p in perm.iter() {
                data.push(plane[p]);
            }
        }
        let m = Rc::clone(&perm);
        Ok(Tensor::from_op(
            data,
            &[b, c, hw],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * hw];
                for (dplane, gplane) in dx.chunks_exact_mut(hw).zip(g.chunks_exact(hw)) {
                    for (t, &p) in m.iter().enumerate() {
                        dplane[p] += gplane[t];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// [B,C,L] -> [B,C,H,W]: out[b,c,perm[t]] = in[b,c,t].
    pub fn scatter_hw(&self, perm: Rc<Vec<usize>>, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[2] != h * w || perm.len() != h * w {
            return Err(Error::invalid(
                "scatter_hw",
                format!("shape {:?} incompatible with {}x{} scatter of {} positions", s, h, w, perm.len()),
            ));
        }
        let (b, c, hw) = (s[0], s[1], s[2]);
        let src = self.data();
        let mut data = vec![0.0; b * c * hw];
        for (dplane, splane) in data.chunks_exact_mut(hw).zip(src.chunks_exact(hw)) {
            for (t, &p) in perm.iter().enumerate() {
                dplane[p] = splane[t];
            }
        }
        let m = Rc::clone(&perm);
        Ok(Tensor::from_op(
            data,
            &[b, c, h, w],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * hw];
                for (dplane, gplane) in dx.chunks_exact_mut(hw).zip(g.chunks_exact(hw)) {
                    for (t, &p) in m.iter().enumerate() {
                        dplane[t] = gplane[p];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenate along axis 1 of rank-4 tensors.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "empty input list"));
        }
        let s0 = parts[0].shape();
        if s0.len() != 4 {
            return Err(Error::invalid("concat_channels", format!("expected rank 4, got {:?}", s0)));
        }
        let (b, h, w) = (s0[0], s0[2], s0[3]);
        let mut c_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: s0.to_vec(),
                    right: s.to_vec(),
                });
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for p in parts {
                let c = p.shape()[1];
                let src = &p.data()[bi * c * plane..(bi + 1) * c * plane];
                data.extend_from_slice(src);
            }
        }
        let channels: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(Tensor::from_op(
            data,
            &[b, c_total, h, w],
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> =
                    channels.iter().map(|&c| Vec::with_capacity(b * c * plane)).collect();
                let mut off = 0usize;
                for _bi in 0..b {
                    for (k, &c) in channels.iter().enumerate() {
                        grads[k].extend_from_slice(&g[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing_rule() {
        assert_eq!(broadcast_shapes("t", &[4, 1, 3], &[2, 3]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shapes("t", &[5], &[2, 5]).unwrap(), vec![2, 5]);
        assert!(broadcast_shapes("t", &[3, 2], &[2, 3]).is_err());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        match a.add(&b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn broadcast_add_values_and_grads() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::param(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        c.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_reduces_grad() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let s = Tensor::param(vec![3.0], &[1]).unwrap();
        let c = a.mul(&s).unwrap();
        c.sum_all().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![10.0]);
        assert_eq!(a.grad().unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::new((0..24).map(|v| v as f64).collect(), &[2, 3, 4]).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn flip_involution() {
        let x = Tensor::new((0..12).map(|v| v as f64).collect(), &[3, 4]).unwrap();
        let y = x.flip(1).unwrap().flip(1).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(x.flip(1).unwrap().data()[0], 3.0);
    }

    #[test]
    fn gather_scatter_inverse() {
        let x = Tensor::new((0..(2 * 3 * 2 * 2)).map(|v| v as f64).collect(), &[2, 3, 2, 2]).unwrap();
        let perm = Rc::new(vec![3usize, 1, 2, 0]);
        let g = x.gather_hw(Rc::clone(&perm)).unwrap();
        let back = g.scatter_hw(perm, 2, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_channels_splits_grad() {
        let a = Tensor::param(vec![1.0, 2.0], &[1, 1, 1, 2]).unwrap();
        let b = Tensor::param(vec![3.0, 4.0, 5.0, 6.0], &[1, 2, 1, 2]).unwrap();
        let c = Tensor::concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        c.mul(&c).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn clamp_grad_dead_outside() {
        let x = Tensor::param(vec![-1.0, 0.5, 2.0], &[3]).unwrap();
        let y = x.clamp(0.0, 1.0);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_stable_tails() {
        let x = Tensor::new(vec![-800.0, 0.0, 800.0], &[3]).unwrap();
        let y = x.softplus();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - (2.0f64).ln()).abs() < 1e-15);
        assert_eq!(y.data()[2], 800.0);
    }
}
