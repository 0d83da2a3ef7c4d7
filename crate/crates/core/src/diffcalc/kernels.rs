//! Raw numeric kernels shared by graph ops and gradient-free inference paths.

use crate::par;

/// Row block used to split dense kernels across threads.
const ROW_BLOCK: usize = 16;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut c, ROW_BLOCK * n, |block, out| {
        let row0 = block * ROW_BLOCK;
        for (r, crow) in out.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// `a[m×k] · bᵀ` where `b` is stored as `[n×k]`; result `[m×n]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut c, ROW_BLOCK * n, |block, out| {
        let row0 = block * ROW_BLOCK;
        for (r, crow) in out.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    });
    c
}

/// `aᵀ · c` where `a` is `[m×k]` and `c` is `[m×n]`; result `[k×n]`.
pub fn matmul_at(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut at = vec![0.0; k * m];
    for i in 0..m {
        for kk in 0..k {
            at[kk * m + i] = a[i * k + kk];
        }
    }
    matmul(&at, c, k, m, n)
}

/// Geometry of a 3×3, zero-padded, strided 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub const KERNEL: usize = 3;

    pub fn out_height(&self) -> usize {
        (self.height + 2 - Self::KERNEL) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 - Self::KERNEL) / self.stride + 1
    }

    fn in_index(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(1)?;
        let ix = (ox * self.stride + kx).checked_sub(1)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }
}

/// Forward convolution. `input` is `[C,H,W]`, `weight` is `[O,C,3,3]`.
pub fn conv2d(input: &[f64], weight: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let mut out = vec![0.0; g.out_channels * plane];
    par::for_each_chunk_mut(&mut out, plane, |o, dst| {
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..g.in_channels {
            let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
            let wbase = (o * g.in_channels + c) * 9;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some((iy, ix)) = g.in_index(oy, ox, ky, kx) {
                                acc += weight[wbase + ky * 3 + kx] * src[iy * g.width + ix];
                            }
                        }
                    }
                    dst[oy * ow + ox] += acc;
                }
            }
        }
    });
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_grad_input(grad_out: &[f64], weight: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let mut gin = vec![0.0; g.in_channels * plane];
    par::for_each_chunk_mut(&mut gin, plane, |c, dst| {
        for o in 0..g.out_channels {
            let gsrc = &grad_out[o * oh * ow..(o + 1) * oh * ow];
            let wbase = (o * g.in_channels + c) * 9;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gsrc[oy * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if let Some((iy, ix)) = g.in_index(oy, ox, ky, kx) {
                                dst[iy * g.width + ix] += gv * weight[wbase + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradients of the convolution with respect to weight and bias.
pub fn conv2d_grad_params(grad_out: &[f64], input: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let per_out = g.in_channels * 9;
    let mut gw = vec![0.0; g.out_channels * per_out];
    par::for_each_chunk_mut(&mut gw, per_out, |o, dst| {
        let gsrc = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..g.in_channels {
            let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            if let Some((iy, ix)) = g.in_index(oy, ox, ky, kx) {
                                acc += gsrc[oy * ow + ox] * src[iy * g.width + ix];
                            }
                        }
                    }
                    dst[c * 9 + ky * 3 + kx] = acc;
                }
            }
        }
    });
    let gb = (0..g.out_channels).map(|o| grad_out[o * oh * ow..(o + 1) * oh * ow].iter().sum()).collect();
    (gw, gb)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
