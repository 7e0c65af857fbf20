//! 2D convolution, adaptive average pooling, nearest-neighbor upsampling.
//! The conv kernel is the hot spot of the whole crate: loops are arranged so
//! the innermost pass runs contiguously along output rows.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Conv2dSpec { stride, padding, dilation, groups }
    }
}

fn out_extent(inp: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d.checked_mul(k - 1)? + 1;
    let padded = inp + 2 * p;
    if padded < span {
        return None;
    }
    Some((padded - span) / s + 1)
}

/// Valid output-index range [lo, hi) such that o*s + off lands in [0, extent).
fn tap_range(out_len: usize, extent: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 {
        (((-off) as usize) + s - 1) / s
    } else {
        0
    };
    let max_i = extent as isize - 1 - off;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / s + 1).min(out_len);
    (lo.min(hi), hi)
}

impl Tensor {
    /// x: [B,Ci,H,W], w: [Co,Ci/groups,kh,kw], bias: [Co].
    pub fn conv2d(&self, w: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch { op: "conv2d", left: xs.to_vec(), right: ws.to_vec() });
        }
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, cig, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let Conv2dSpec { stride, padding, dilation, groups } = spec;
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "stride, dilation, groups must be positive"));
        }
        if ci % groups != 0 || co % groups != 0 || cig != ci / groups {
            return Err(Error::invalid(
                "conv2d",
                format!("channel/group mismatch: ci={}, co={}, groups={}, weight ci/g={}", ci, co, groups, cig),
            ));
        }
        if let Some(bt) = bias {
            if bt.shape() != [co] {
                return Err(Error::ShapeMismatch { op: "conv2d", left: vec![co], right: bt.shape().to_vec() });
            }
        }
        let (ho, wo) = match (
            out_extent(h, kh, stride, padding, dilation),
            out_extent(wd, kw, stride, padding, dilation),
        ) {
            (Some(a), Some(bx)) if a > 0 && bx > 0 => (a, bx),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("nonpositive output extent for input {}x{} kernel {}x{}", h, wd, kh, kw),
                ))
            }
        };

        let cpg_out = co / groups;
        let mut out = vec![0.0; b * co * ho * wo];
        if let Some(bt) = bias {
            for bi in 0..b {
                for coi in 0..co {
                    let v = bt.data()[coi];
                    if v != 0.0 {
                        out[(bi * co + coi) * ho * wo..(bi * co + coi + 1) * ho * wo].fill(v);
                    }
                }
            }
        }

        let xd = self.data();
        let wdat = w.data();
        for bi in 0..b {
            for g in 0..groups {
                for coi in g * cpg_out..(g + 1) * cpg_out {
                    let out_plane = bi * co + coi;
                    for cir in 0..cig {
                        let cii = g * cig + cir;
                        let x_plane = &xd[(bi * ci + cii) * h * wd..(bi * ci + cii + 1) * h * wd];
                        let w_base = ((coi * cig) + cir) * kh * kw;
                        for khi in 0..kh {
                            let off_h = (khi * dilation) as isize - padding as isize;
                            let (ho_lo, ho_hi) = tap_range(ho, h, stride, off_h);
                            for kwi in 0..kw {
                                let wv = wdat[w_base + khi * kw + kwi];
                                if wv == 0.0 {
                                    continue;
                                }
                                let off_w = (kwi * dilation) as isize - padding as isize;
                                let (wo_lo, wo_hi) = tap_range(wo, wd, stride, off_w);
                                if wo_lo == wo_hi {
                                    // tap falls entirely in the padding band
                                    continue;
                                }
                                for hoi in ho_lo..ho_hi {
                                    let ih = (hoi * stride) as isize + off_h;
                                    let x_row = &x_plane[ih as usize * wd..(ih as usize + 1) * wd];
                                    let o_row =
                                        &mut out[(out_plane * ho + hoi) * wo..(out_plane * ho + hoi + 1) * wo];
                                    if stride == 1 {
                                        let ib = (wo_lo as isize + off_w) as usize;
                                        for (ov, &xv) in
                                            o_row[wo_lo..wo_hi].iter_mut().zip(&x_row[ib..ib + (wo_hi - wo_lo)])
                                        {
                                            *ov += wv * xv;
                                        }
                                    } else {
                                        for woi in wo_lo..wo_hi {
                                            let iw = (woi * stride) as isize + off_w;
                                            o_row[woi] += wv * x_row[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), w.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let has_bias = bias.is_some();
        let x = self.clone();
        let wt = w.clone();
        Ok(Tensor::from_op(
            out,
            &[b, co, ho, wo],
            parents,
            Box::new(move |g| {
                let xd = x.data();
                let wdat = wt.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdat.len()];
                for bi in 0..b {
                    for gi in 0..groups {
                        for coi in gi * cpg_out..(gi + 1) * cpg_out {
                            let g_plane = &g[(bi * co + coi) * ho * wo..(bi * co + coi + 1) * ho * wo];
                            for cir in 0..cig {
                                let cii = gi * cig + cir;
                                let x_plane =
                                    &xd[(bi * ci + cii) * h * wd..(bi * ci + cii + 1) * h * wd];
                                let dx_base = (bi * ci + cii) * h * wd;
                                let w_base = ((coi * cig) + cir) * kh * kw;
                                for khi in 0..kh {
                                    let off_h = (khi * dilation) as isize - padding as isize;
                                    let (ho_lo, ho_hi) = tap_range(ho, h, stride, off_h);
                                    for kwi in 0..kw {
                                        let off_w = (kwi * dilation) as isize - padding as isize;
                                        let (wo_lo, wo_hi) = tap_range(wo, wd, stride, off_w);
                                        let wv = wdat[w_base + khi * kw + kwi];
                                        let mut w_acc = 0.0;
                                        for hoi in ho_lo..ho_hi {
                                            let ih = ((hoi * stride) as isize + off_h) as usize;
                                            let g_row = &g_plane[hoi * wo..(hoi + 1) * wo];
                                            let x_row = &x_plane[ih * wd..(ih + 1) * wd];
                                            let dx_row = &mut dx[dx_base + ih * wd..dx_base + (ih + 1) * wd];
                                            if stride == 1 {
                                                let ib = (wo_lo as isize + off_w) as usize;
                                                let gs = &g_row[wo_lo..wo_hi];
                                                for (k, &gv) in gs.iter().enumerate() {
                                                    w_acc += gv * x_row[ib + k];
                                                    dx_row[ib + k] += wv * gv;
                                                }
                                            } else {
                                                for woi in wo_lo..wo_hi {
                                                    let iw = ((woi * stride) as isize + off_w) as usize;
                                                    let gv = g_row[woi];
                                                    w_acc += gv * x_row[iw];
                                                    dx_row[iw] += wv * gv;
                                                }
                                            }
                                        }
                                        dw[w_base + khi * kw + kwi] += w_acc;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut dbias = vec![0.0; co];
                    for bi in 0..b {
                        for coi in 0..co {
                            let g_plane = &g[(bi * co + coi) * ho * wo..(bi * co + coi + 1) * ho * wo];
                            dbias[coi] += g_plane.iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(dbias));
                }
                grads
            }),
        ))
    }

    /// Adaptive average pooling with the floor/ceil window rule:
    /// window i covers [floor(i*H/oh), ceil((i+1)*H/oh)).
    pub fn adaptive_avg_pool(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("adaptive_avg_pool", format!("expected rank 4, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("adaptive_avg_pool", "zero target extent"));
        }
        if oh > h || ow > w {
            return Err(Error::invalid(
                "adaptive_avg_pool",
                format!("target {}x{} exceeds input {}x{}", oh, ow, h, w),
            ));
        }
        let row_win: Vec<(usize, usize)> =
            (0..oh).map(|i| (i * h / oh, (i + 1) * h / oh + usize::from((i + 1) * h % oh != 0))).collect();
        let col_win: Vec<(usize, usize)> =
            (0..ow).map(|j| (j * w / ow, (j + 1) * w / ow + usize::from((j + 1) * w % ow != 0))).collect();

        let xd = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            let o_plane = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (i, &(r0, r1)) in row_win.iter().enumerate() {
                for (j, &(c0, c1)) in col_win.iter().enumerate() {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    o_plane[i * ow + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }

        let rw = row_win.clone();
        let cw = col_win.clone();
        Ok(Tensor::from_op(
            out,
            &[b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let g_plane = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &(r0, r1)) in rw.iter().enumerate() {
                        for (j, &(c0, c1)) in cw.iter().enumerate() {
                            let share = g_plane[i * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                            for r in r0..r1 {
                                for v in &mut dx_plane[r * w + c0..r * w + c1] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("upsample_nearest", format!("expected rank 4, got {:?}", s)));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "zero factor"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            let o_plane = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                let src_row = &plane[(i / factor) * w..(i / factor + 1) * w];
                let dst_row = &mut o_plane[i * ow..(i + 1) * ow];
                for (j, dv) in dst_row.iter_mut().enumerate() {
                    *dv = src_row[j / factor];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            &[b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let g_plane = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        let g_row = &g_plane[i * ow..(i + 1) * ow];
                        let dx_row = &mut dx_plane[(i / factor) * w..(i / factor + 1) * w];
                        for (j, &gv) in g_row.iter().enumerate() {
                            dx_row[j / factor] += gv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Bilinear upsampling by an integer factor. Samples at half-pixel
    /// centers with clamped edges, so a constant plane stays constant and
    /// no new extrema appear.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("upsample_bilinear", format!("expected rank 4, got {:?}", s)));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample_bilinear", "zero factor"));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        // per-axis taps: (low index, high index, high-side weight)
        let taps = |n: usize, on: usize| -> Vec<(usize, usize, f64)> {
            (0..on)
                .map(|i| {
                    let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                    let lo = src.floor() as usize;
                    (lo, (lo + 1).min(n - 1), src - lo as f64)
                })
                .collect()
        };
        let (ty, tx) = (taps(h, oh), taps(w, ow));
        let xd = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            let o_plane = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
                let (r0, r1) = (&plane[y0 * w..y0 * w + w], &plane[y1 * w..y1 * w + w]);
                let dst = &mut o_plane[i * ow..(i + 1) * ow];
                for (dv, &(x0, x1, wx)) in dst.iter_mut().zip(&tx) {
                    let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                    *dv = top + wy * (bot - top);
                }
            }
        }
        let (tyb, txb) = (ty.clone(), tx.clone());
        Ok(Tensor::from_op(
            out,
            &[b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let g_plane = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dx_plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &(y0, y1, wy)) in tyb.iter().enumerate() {
                        let g_row = &g_plane[i * ow..(i + 1) * ow];
                        for (&gv, &(x0, x1, wx)) in g_row.iter().zip(&txb) {
                            dx_plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dx_plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dx_plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dx_plane[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}
