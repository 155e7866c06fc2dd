//! Layer primitives with hand-written forward and backward passes.
//!
//! Images are single items laid out `[channels, height, width]`.

use crate::numerics::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x·σ(x)`
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `g ⊙ silu'(pre)`
pub fn silu_backward<T: Scalar>(g: &[T], pre: &[T]) -> Vec<T> {
    g.iter().zip(pre).map(|(&g, &x)| g * silu_grad(x)).collect()
}

/// Geometry of a 2-D convolution over `[c_in, h, w]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn same3x3(c_in: usize, c_out: usize) -> Self {
        Conv2d {
            c_in,
            c_out,
            kernel: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
        }
    }

    /// 3×3 kernel with taps `d` pixels apart, padded to keep the extent.
    pub fn dilated3x3(c_in: usize, c_out: usize, d: usize) -> Self {
        Conv2d {
            c_in,
            c_out,
            kernel: 3,
            stride: 1,
            pad: d,
            dilation: d,
        }
    }

    /// 4×4 kernel, stride 2, pad 1: halves each spatial extent.
    pub fn down2(c_in: usize, c_out: usize) -> Self {
        Conv2d {
            c_in,
            c_out,
            kernel: 4,
            stride: 2,
            pad: 1,
            dilation: 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.span()) / self.stride + 1,
            (w + 2 * self.pad - self.span()) / self.stride + 1,
        )
    }

    /// Output extent of the transposed convolution.
    pub fn transpose_out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.span() - 2 * self.pad,
            (w - 1) * self.stride + self.span() - 2 * self.pad,
        )
    }

    /// Unfolds `x: [channels, h, w]` into `[channels·k·k, ho·wo]`.
    fn im2col<T: Scalar>(&self, x: &[T], channels: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let p = ho * wo;
        let mut cols = vec![T::zero(); channels * k * k * p];
        for c in 0..channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if self.stride == 1 {
                            // contiguous run of valid columns
                            let off = (kj * self.dilation) as isize - self.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + off) as usize;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj * self.dilation) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    /// Adjoint of `im2col`: accumulates columns back onto `[channels, h, w]`.
    fn col2im<T: Scalar>(&self, cols: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let p = ho * wo;
        let mut x = vec![T::zero(); channels * h * w];
        for c in 0..channels {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * wo..(oy + 1) * wo];
                        if self.stride == 1 {
                            let off = (kj * self.dilation) as isize - self.pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((w as isize - off).min(wo as isize)).max(0) as usize;
                            if lo < hi {
                                let d0 = (lo as isize + off) as usize;
                                for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            }
                            continue;
                        }
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns `(output, unfolded input, ho, wo)`; keep the unfolded input
    /// for the backward pass.
    pub fn forward<T: Scalar>(
        &self,
        x: &[T],
        h: usize,
        w: usize,
        weight: &[T],
        bias: &[T],
    ) -> (Vec<T>, Vec<T>, usize, usize) {
        let (cols, ho, wo) = self.im2col(x, self.c_in, h, w);
        let p = ho * wo;
        let mut out = vec![T::zero(); self.c_out * p];
        for (o, &b) in bias.iter().enumerate() {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
        }
        gemm_acc(weight, &cols, &mut out, self.c_out, self.fan_in(), p);
        (out, cols, ho, wo)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        grad_out: &[T],
        cols: &[T],
        h: usize,
        w: usize,
        weight: &[T],
        d_weight: &mut [T],
        d_bias: &mut [T],
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (ho, wo) = self.out_size(h, w);
        let p = ho * wo;
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += grad_out[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        gemm_nt_acc(grad_out, cols, d_weight, self.c_out, p, self.fan_in());
        if !need_input_grad {
            return None;
        }
        let mut d_cols = vec![T::zero(); self.fan_in() * p];
        gemm_tn_acc(weight, grad_out, &mut d_cols, self.c_out, self.fan_in(), p);
        Some(self.col2im(&d_cols, self.c_in, h, w))
    }

    /// Transposed convolution from `[c_out, h, w]` back to `[c_in, H, W]`,
    /// the adjoint of `forward` with the same `weight_shape`. The bias has
    /// `c_in` entries. Returns `(output, H, W)`.
    pub fn transpose_forward<T: Scalar>(
        &self,
        x: &[T],
        h: usize,
        w: usize,
        weight: &[T],
        bias: &[T],
    ) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.transpose_out_size(h, w);
        debug_assert_eq!(self.out_size(ho, wo), (h, w));
        let p = h * w;
        // weight viewed as [c_out, c_in·k·k]; cols = weightᵀ · x
        let mut cols = vec![T::zero(); self.fan_in() * p];
        gemm_tn_acc(weight, x, &mut cols, self.c_out, self.fan_in(), p);
        let mut out = self.col2im(&cols, self.c_in, ho, wo);
        let plane = ho * wo;
        for (c, &b) in bias.iter().enumerate() {
            out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        (out, ho, wo)
    }

    /// Backward of `transpose_forward`; `x` is its input `[c_out, h, w]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transpose_backward<T: Scalar>(
        &self,
        grad_out: &[T],
        x: &[T],
        h: usize,
        w: usize,
        weight: &[T],
        d_weight: &mut [T],
        d_bias: &mut [T],
    ) -> Vec<T> {
        let (ho, wo) = self.transpose_out_size(h, w);
        let plane = ho * wo;
        for (c, db) in d_bias.iter_mut().enumerate() {
            *db += grad_out[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
        }
        let (g_cols, _, _) = self.im2col(grad_out, self.c_in, ho, wo);
        let p = h * w;
        // d_weight[c_out, fan] += x[c_out, p] · g_colsᵀ
        gemm_nt_acc(x, &g_cols, d_weight, self.c_out, p, self.fan_in());
        let mut dx = vec![T::zero(); self.c_out * p];
        gemm_acc(weight, &g_cols, &mut dx, self.c_out, self.fan_in(), p);
        dx
    }
}

/// `y = W x + b` with `W: [out, in]`.
pub fn linear_forward<T: Scalar>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + dot(&w[o * n_in..(o + 1) * n_in], x))
        .collect()
}

/// Accumulates `dW += g xᵀ`, `db += g`; returns `Wᵀ g`.
pub fn linear_backward<T: Scalar>(w: &[T], x: &[T], g: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let n_in = x.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &go) in g.iter().enumerate() {
        db[o] += go;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += go * x[i];
            dx[i] += go * row[i];
        }
    }
    dx
}

/// 2×2 average pooling (floor on odd extents).
pub fn avgpool2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * ho * wo + y * wo + xx] = s * q;
            }
        }
    }
    (out, ho, wo)
}

pub fn avgpool2_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let v = g[ch * ho * wo + y * wo + xx] * q;
                let base = ch * h * w;
                dx[base + 2 * y * w + 2 * xx] += v;
                dx[base + 2 * y * w + 2 * xx + 1] += v;
                dx[base + (2 * y + 1) * w + 2 * xx] += v;
                dx[base + (2 * y + 1) * w + 2 * xx + 1] += v;
            }
        }
    }
    dx
}

/// Per-channel spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &[T], c: usize, plane: usize) -> Vec<T> {
    let inv = T::one() / T::of_usize(plane);
    (0..c)
        .map(|ch| x[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(g: &[T], plane: usize) -> Vec<T> {
    let inv = T::one() / T::of_usize(plane);
    g.iter()
        .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
        .collect()
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias<T: Scalar>(x: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        x[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

/// Sinusoidal embedding of a timestep: `dim/2` sines then `dim/2` cosines
/// at angular rates geometric from 1 down to 1e-4.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let rate = if half > 1 {
            (-(1e4f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let arg = t as f64 * rate;
        out[i] = T::of(arg.sin());
        out[half + i] = T::of(arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn rand_vec(rng: &mut RngStream, n: usize) -> Vec<f64> {
        rng.gaussian::<f64>(&[n]).into_data()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(g: &Conv2d, x: &[f64], h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_size(h, w);
        let k = g.kernel;
        let mut out = vec![0.0; g.c_out * ho * wo];
        for o in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[o];
                    for c in 0..g.c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[((o * g.c_in + c) * k + ki) * k + kj]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = RngStream::new(1);
        for g in [Conv2d::same3x3(2, 3), Conv2d::down2(3, 2), Conv2d::dilated3x3(2, 3, 2), Conv2d::dilated3x3(1, 2, 4)] {
            let (h, w) = (8, 6);
            let x = rand_vec(&mut rng, g.c_in * h * w);
            let wt = rand_vec(&mut rng, g.c_out * g.fan_in());
            let b = rand_vec(&mut rng, g.c_out);
            let (out, _, _, _) = g.forward(&x, h, w, &wt, &b);
            let reference = conv_naive(&g, &x, h, w, &wt, &b);
            for (a, r) in out.iter().zip(&reference) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_conv_is_adjoint() {
        // <conv(x), y> == <x, convT(y)> with zero biases
        let mut rng = RngStream::new(2);
        let g = Conv2d::down2(3, 4);
        let (h, w) = (8, 8);
        let (ho, wo) = g.out_size(h, w);
        let x = rand_vec(&mut rng, 3 * h * w);
        let y = rand_vec(&mut rng, 4 * ho * wo);
        let wt = rand_vec(&mut rng, 4 * g.fan_in());
        let (cx, _, _, _) = g.forward(&x, h, w, &wt, &[0.0; 4]);
        let (ty, h2, w2) = g.transpose_forward(&y, ho, wo, &wt, &[0.0; 3]);
        assert_eq!((h2, w2), (h, w));
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn silu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64).collect();
        let (p, ho, wo) = avgpool2_forward(&x, 2, 4, 4);
        assert_eq!((ho, wo, p.len()), (2, 2, 8));
        assert_eq!(p[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let g = avgpool2_backward(&vec![1.0; 8], 2, 4, 4);
        assert!(g.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn timestep_embedding_layout() {
        let e: Vec<f64> = timestep_embedding(0, 64);
        assert!(e[..32].iter().all(|&v| v == 0.0));
        assert!(e[32..].iter().all(|&v| v == 1.0));
    }
}
