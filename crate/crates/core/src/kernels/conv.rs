//! Grouped 2-D cross-correlation over NCHW buffers.

use super::gemm::{gemm, Mat};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.out_per_group() == 1
    }

    fn col_rows(&self) -> usize {
        self.in_per_group() * self.k_h * self.k_w
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.in_per_group() * self.k_h * self.k_w * self.out_h * self.out_w) as u64
    }
}

/// Output extent of a strided window: `floor((n + 2p - k) / s) + 1`, or `None` if the window does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[inline]
fn src_index(o: usize, k: usize, g: &ConvGeom, n: usize) -> Option<usize> {
    let p = (o * g.stride + k) as isize - g.pad as isize;
    (p >= 0 && (p as usize) < n).then_some(p as usize)
}

/// Unfold one group of one image into `[cin_g*kh*kw, out_h*out_w]`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw = g.out_h * g.out_w;
    for c in 0..g.in_per_group() {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = src_index(oy, ky, g, g.in_h);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (iy, src_index(ox, kx, g, g.in_w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.in_w + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.out_h * g.out_w;
    for c in 0..g.in_per_group() {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let Some(iy) = src_index(oy, ky, g, g.in_h) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = src_index(ox, kx, g, g.in_w) {
                            plane[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn forward<T: Float>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.batch * g.out_ch * hw];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let (cin_g, cout_g, rows) = (g.in_per_group(), g.out_per_group(), g.col_rows());
        let mut col = vec![T::zero(); rows * hw];
        for n in 0..g.batch {
            for grp in 0..g.groups {
                let xs = &x[(n * g.in_ch + grp * cin_g) * in_plane..][..cin_g * in_plane];
                im2col(xs, g, &mut col);
                let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                let os = &mut out[(n * g.out_ch + grp * cout_g) * hw..][..cout_g * hw];
                gemm(Mat::new(wg, cout_g, rows), Mat::new(&col, rows, hw), os, false);
            }
        }
    }
    if let Some(b) = b {
        for n in 0..g.batch {
            for (c, &bc) in b.iter().enumerate() {
                out[(n * g.out_ch + c) * hw..][..hw].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

fn depthwise_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let kk = g.k_h * g.k_w;
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &x[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let kern = &w[c * kk..(c + 1) * kk];
            let o = &mut out[(n * g.out_ch + c) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for oy in 0..g.out_h {
                for ky in 0..g.k_h {
                    let Some(iy) = src_index(oy, ky, g, g.in_h) else { continue };
                    let row = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for kx in 0..g.k_w {
                        let kv = kern[ky * g.k_w + kx];
                        for ox in 0..g.out_w {
                            if let Some(ix) = src_index(ox, kx, g, g.in_w) {
                                o[oy * g.out_w + ox] += kv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients with respect to input, weight and bias. Each is computed only if requested.
pub fn backward<T: Float>(
    gout: &[T],
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for n in 0..g.batch {
            for (c, d) in db.iter_mut().enumerate() {
                *d += gout[(n * g.out_ch + c) * hw..][..hw].iter().copied().sum::<T>();
            }
        }
        db
    });
    if g.is_depthwise() {
        depthwise_backward(gout, x, w, g, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw, db);
    }
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let (cin_g, cout_g, rows) = (g.in_per_group(), g.out_per_group(), g.col_rows());
    let mut col = vec![T::zero(); rows * hw];
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let go = &gout[(n * g.out_ch + grp * cout_g) * hw..][..cout_g * hw];
            let wg = &w[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            if let Some(dw) = dw.as_deref_mut() {
                let xs = &x[(n * g.in_ch + grp * cin_g) * in_plane..][..cin_g * in_plane];
                im2col(xs, g, &mut col);
                let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                gemm(Mat::new(go, cout_g, hw), Mat::new(&col, rows, hw).t(), dwg, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(Mat::new(wg, cout_g, rows).t(), Mat::new(go, cout_g, hw), &mut col, false);
                let dxs = &mut dx[(n * g.in_ch + grp * cin_g) * in_plane..][..cin_g * in_plane];
                col2im(&col, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

fn depthwise_backward<T: Float>(gout: &[T], x: &[T], w: &[T], g: &ConvGeom, mut dx: Option<&mut [T]>, mut dw: Option<&mut [T]>) {
    let kk = g.k_h * g.k_w;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &x[(n * g.in_ch + c) * in_plane..][..in_plane];
            let go = &gout[(n * g.out_ch + c) * out_plane..][..out_plane];
            let kern = &w[c * kk..(c + 1) * kk];
            for oy in 0..g.out_h {
                for ky in 0..g.k_h {
                    let Some(iy) = src_index(oy, ky, g, g.in_h) else { continue };
                    for kx in 0..g.k_w {
                        let widx = ky * g.k_w + kx;
                        let mut acc = T::zero();
                        for ox in 0..g.out_w {
                            if let Some(ix) = src_index(ox, kx, g, g.in_w) {
                                let gv = go[oy * g.out_w + ox];
                                acc += gv * plane[iy * g.in_w + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[(n * g.in_ch + c) * in_plane + iy * g.in_w + ix] += gv * kern[widx];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[c * kk + widx] += acc;
                        }
                    }
                }
            }
        }
    }
}
