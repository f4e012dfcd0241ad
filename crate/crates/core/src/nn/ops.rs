//! Layer primitives on flat channel-major buffers, each with a hand-written
//! backward pass.

use super::scalar::{matmul, Scalar};

/// Unfolds a zero-padded 3x3 neighbourhood into rows `ci*9 + ky*3 + kx`,
/// columns `y*w + x`.
pub fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut row[y * w..(y + 1) * w];
                    let (x0, x1) = match dx {
                        -1 => (1, w),
                        1 => (0, w.saturating_sub(1)),
                        _ => (0, w),
                    };
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        dst_row[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &row[y * w..(y + 1) * w];
                    let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let (x0, x1) = match dx {
                        -1 => (1, w),
                        1 => (0, w.saturating_sub(1)),
                        _ => (0, w),
                    };
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        for (d, &v) in dst_row[s0..s0 + (x1 - x0)].iter_mut().zip(&src_row[x0..x1]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out[cout, hw] = weight[cout, k] * cols[k, hw] + bias`.
pub fn conv_forward<T: Scalar>(cols: &[T], weight: &[T], bias: &[T], cout: usize, k: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * hw];
    for (o, &b) in out.chunks_mut(hw).zip(bias) {
        o.fill(b);
    }
    matmul(cout, k, hw, weight, false, cols, false, &mut out, true);
    out
}

/// Accumulates weight and bias gradients; returns the gradient w.r.t. `cols`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    weight: &[T],
    cout: usize,
    k: usize,
    hw: usize,
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    matmul(cout, hw, k, dout, false, cols, true, gw, true);
    for (g, row) in gb.iter_mut().zip(dout.chunks(hw)) {
        *g = *g + row.iter().copied().sum::<T>();
    }
    let mut dcols = vec![T::zero(); k * hw];
    matmul(k, cout, hw, weight, true, dout, false, &mut dcols, false);
    dcols
}

pub fn linear_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], dout: usize) -> Vec<T> {
    let din = x.len();
    (0..dout)
        .map(|o| {
            weight[o * din..(o + 1) * din]
                .iter()
                .zip(x)
                .fold(bias[o], |acc, (&w, &v)| acc + w * v)
        })
        .collect()
}

/// Accumulates `dW += dy x^T`, `db += dy`; returns `W^T dy`.
pub fn linear_backward<T: Scalar>(dy: &[T], x: &[T], weight: &[T], gw: &mut [T], gb: &mut [T]) -> Vec<T> {
    let din = x.len();
    let mut dx = vec![T::zero(); din];
    for (o, &g) in dy.iter().enumerate() {
        gb[o] = gb[o] + g;
        let wrow = &weight[o * din..(o + 1) * din];
        let grow = &mut gw[o * din..(o + 1) * din];
        for i in 0..din {
            grow[i] = grow[i] + g * x[i];
            dx[i] = dx[i] + g * wrow[i];
        }
    }
    dx
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy * silu'(x)`, written in place into `dy`.
pub fn silu_backward<T: Scalar>(x: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(x) {
        let s = sigmoid(v);
        *g = *g * s * (T::one() + v * (T::one() - s));
    }
}

/// Largest group count not above 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization with per-channel affine parameters.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, NormCache<T>) {
    let per = channels / groups * hw;
    let n = T::lit(per as f64);
    let eps = T::lit(NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * per..(g + 1) * per;
        let xs = &x[span.clone()];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (dst, &v) in xhat[span].iter_mut().zip(xs) {
            *dst = (v - mean) * r;
        }
    }
    for c in 0..channels {
        let span = c * hw..(c + 1) * hw;
        for (o, &xh) in out[span.clone()].iter_mut().zip(&xhat[span]) {
            *o = xh * gamma[c] + beta[c];
        }
    }
    (out, NormCache { xhat, rstd })
}

pub fn group_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    channels: usize,
    hw: usize,
    gamma: &[T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) -> Vec<T> {
    let groups = cache.rstd.len();
    let per = channels / groups * hw;
    let n = T::lit(per as f64);
    let mut dxhat = vec![T::zero(); dy.len()];
    for c in 0..channels {
        let span = c * hw..(c + 1) * hw;
        let mut sg = T::zero();
        let mut sb = T::zero();
        for ((d, &g), &xh) in dxhat[span.clone()].iter_mut().zip(&dy[span.clone()]).zip(&cache.xhat[span]) {
            sg = sg + g * xh;
            sb = sb + g;
            *d = g * gamma[c];
        }
        ggamma[c] = ggamma[c] + sg;
        gbeta[c] = gbeta[c] + sb;
    }
    let mut dx = vec![T::zero(); dy.len()];
    for g in 0..groups {
        let span = g * per..(g + 1) * per;
        let d = &dxhat[span.clone()];
        let xh = &cache.xhat[span.clone()];
        let mean_d = d.iter().copied().sum::<T>() / n;
        let mean_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let r = cache.rstd[g];
        for ((o, &dv), &xv) in dx[span].iter_mut().zip(d).zip(xh) {
            *o = r * (dv - mean_d - xv * mean_dx);
        }
    }
    dx
}

pub fn avg_pool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..];
        let dst = &mut out[ci * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

/// Gradient of [`avg_pool2`] given the output gradient at half resolution.
pub fn avg_pool2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ci * h * w + y * w + xx] = dy[ci * oh * ow + (y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling from `h x w`.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ci * oh * ow + y * ow + xx] = x[ci * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `h x w` is the low-resolution size.
pub fn upsample2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dx[ci * h * w + (y / 2) * w + xx / 2];
                *d = *d + dy[ci * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Sinusoidal embedding of a discrete timestep: first half sines, second half
/// cosines, geometric frequencies from 1 down to 1/10000.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::lit(arg.sin());
        out[half + i] = T::lit(arg.cos());
    }
    out
}
