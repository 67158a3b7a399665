//! Direct 2-D convolution kernels on NCHW buffers.
//!
//! All three kernels share one geometry: `input` is the (larger, for
//! stride > 1) side a regular convolution reads from and `output` the side
//! it writes to. A transposed convolution runs the same kernels with the
//! roles swapped: its forward pass is [`conv_input_grad`] and its input
//! gradient is [`conv_forward`].

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn in_len(&self) -> usize {
        self.batch * self.in_ch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }
}

/// Output extent of a regular convolution, `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * pad)
}

/// Output positions `o` for which `o * stride + k - pad` lands inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = in_len + pad;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - 1 - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// `out[n,o,oy,ox] = sum_{c,ky,kx} w[o,c,ky,kx] * x[n,c,oy*s+ky-p, ox*s+kx-p]`
pub fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let out_base = (n * g.out_ch + o) * out_plane;
            for c in 0..g.in_ch {
                let in_base = (n * g.in_ch + c) * in_plane;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut out[out_base + oy * g.out_w..out_base + (oy + 1) * g.out_w];
                            let irow = &x[in_base + iy * g.in_w..in_base + (iy + 1) * g.in_w];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to `x`.
pub fn conv_input_grad(g: &ConvGeometry, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.in_len()];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let out_base = (n * g.out_ch + o) * out_plane;
            for c in 0..g.in_ch {
                let in_base = (n * g.in_ch + c) * in_plane;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let wv = w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gout[out_base + oy * g.out_w..out_base + (oy + 1) * g.out_w];
                            let drow = &mut dx[in_base + iy * g.in_w..in_base + (iy + 1) * g.in_w];
                            for ox in ox_lo..ox_hi {
                                drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to `w`.
pub fn conv_weight_grad(g: &ConvGeometry, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; g.weight_len()];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let out_base = (n * g.out_ch + o) * out_plane;
            for c in 0..g.in_ch {
                let in_base = (n * g.in_ch + c) * in_plane;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.in_w, g.out_w);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gout[out_base + oy * g.out_w..out_base + (oy + 1) * g.out_w];
                            let irow = &x[in_base + iy * g.in_w..in_base + (iy + 1) * g.in_w];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                        dw[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k,m]`, `b: [k,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    acc += w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx]
                                        * x[((n * g.in_ch + c) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn geometry(in_hw: usize, k: usize, stride: usize, pad: usize) -> ConvGeometry {
        let out = conv_out_extent(in_hw, k, stride, pad).unwrap();
        ConvGeometry {
            batch: 2,
            in_ch: 3,
            in_h: in_hw,
            in_w: in_hw,
            out_ch: 2,
            out_h: out,
            out_w: out,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let g = ConvGeometry {
            batch: 1,
            in_ch: 1,
            in_h: 4,
            in_w: 4,
            out_ch: 1,
            out_h: 4,
            out_w: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let out = conv_forward(&g, &[1.0; 16], &[1.0; 9]);
        // interior pixels see a full 3x3 window, corners 4, edges 6
        assert_eq!(out[5], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn direct_loops_match_naive() {
        for &(hw, k, s, p) in &[(5, 3, 1, 1), (8, 4, 2, 1), (7, 3, 2, 0), (6, 1, 1, 0)] {
            let g = geometry(hw, k, s, p);
            let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
            assert_eq!(conv_forward(&g, &x, &w), naive_conv(&g, &x, &w));
        }
    }

    #[test]
    fn input_grad_is_adjoint() {
        let g = geometry(8, 4, 2, 1);
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..g.weight_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = (0..g.out_len()).map(|i| (i as f64 * 0.23).sin()).collect();
        let lhs: f64 = conv_forward(&g, &x, &w).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(conv_input_grad(&g, &y, &w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        // a^T is 3x2 stored as a 2x3 "k x m" block
        let at_b = matmul_tn(&a, &[1.0, 0.0, 0.0, 1.0], 2, 3, 2);
        assert_eq!(at_b, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let a_bt = matmul_nt(&a, &a, 2, 3, 2);
        assert_eq!(a_bt, vec![14.0, 32.0, 32.0, 77.0]);
    }
}
