//! Last-axis layer normalization and softmax.

use crate::tensor::Float;

pub struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Float>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, LayerNormSaved<T>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let inv_c = T::one() / T::of(c as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (xr[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormSaved { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Float>(g: &[T], gamma: &[T], saved: &LayerNormSaved<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let rows = g.len() / c;
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for r in 0..rows {
        let gr = &g[r * c..(r + 1) * c];
        let hr = &saved.xhat[r * c..(r + 1) * c];
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for j in 0..c {
            let d = gr[j] * gamma[j];
            mean_d += d;
            mean_dh += d * hr[j];
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
        }
        mean_d *= inv_c;
        mean_dh *= inv_c;
        let rs = saved.rstd[r];
        for j in 0..c {
            let d = gr[j] * gamma[j];
            dx[r * c + j] = rs * (d - mean_d - hr[j] * mean_dh);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn softmax_forward<T: Float>(x: &[T], n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        let inv = T::one() / s;
        yr.iter_mut().for_each(|v| *v *= inv);
    }
    y
}

pub fn softmax_backward<T: Float>(g: &[T], y: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); g.len()];
    for ((gr, yr), dr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
        for j in 0..n {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x·Φ(x)`.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(INV_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(INV_SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (T::of(-0.5) * x * x).exp();
    cdf + x * pdf
}
