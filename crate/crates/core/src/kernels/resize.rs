//! Bilinear resampling of NCHW planes.

use crate::tensor::Float;

/// Per-axis interpolation table: output index -> (lo, hi, weight of hi).
#[derive(Debug, Clone)]
pub struct AxisPlan {
    pub taps: Vec<(usize, usize, f64)>,
}

impl AxisPlan {
    pub fn new(in_len: usize, out_len: usize, align_corners: bool) -> Self {
        let taps = (0..out_len)
            .map(|o| {
                let src = if align_corners {
                    if out_len > 1 {
                        o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                    } else {
                        0.0
                    }
                } else {
                    let scale = in_len as f64 / out_len as f64;
                    ((o as f64 + 0.5) * scale - 0.5).max(0.0)
                };
                let lo = (src.floor() as usize).min(in_len - 1);
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        Self { taps }
    }
}

#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize, align_corners: bool) -> Self {
        Self {
            planes,
            in_h,
            in_w,
            rows: AxisPlan::new(in_h, out_h, align_corners),
            cols: AxisPlan::new(in_w, out_w, align_corners),
        }
    }

    pub fn out_h(&self) -> usize {
        self.rows.taps.len()
    }

    pub fn out_w(&self) -> usize {
        self.cols.taps.len()
    }

    pub fn forward<T: Float>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = vec![T::zero(); self.planes * oh * ow];
        for p in 0..self.planes {
            let src = &x[p * self.in_h * self.in_w..][..self.in_h * self.in_w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for (oy, &(y0, y1, ly)) in self.rows.taps.iter().enumerate() {
                let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in self.cols.taps.iter().enumerate() {
                    let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                    let top = src[y0 * self.in_w + x0] * lx0 + src[y0 * self.in_w + x1] * lx1;
                    let bot = src[y1 * self.in_w + x0] * lx0 + src[y1 * self.in_w + x1] * lx1;
                    dst[oy * ow + ox] = top * ly0 + bot * ly1;
                }
            }
        }
        out
    }

    pub fn backward<T: Float>(&self, g: &[T]) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut dx = vec![T::zero(); self.planes * self.in_h * self.in_w];
        for p in 0..self.planes {
            let go = &g[p * oh * ow..][..oh * ow];
            let d = &mut dx[p * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for (oy, &(y0, y1, ly)) in self.rows.taps.iter().enumerate() {
                let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in self.cols.taps.iter().enumerate() {
                    let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                    let v = go[oy * ow + ox];
                    d[y0 * self.in_w + x0] += v * ly0 * lx0;
                    d[y0 * self.in_w + x1] += v * ly0 * lx1;
                    d[y1 * self.in_w + x0] += v * ly1 * lx0;
                    d[y1 * self.in_w + x1] += v * ly1 * lx1;
                }
            }
        }
        dx
    }
}
