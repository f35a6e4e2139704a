//! Raw loop kernels shared by the autodiff tape and the IR interpreter.

/// Output extent of a sliding window, `None` when the window does not fit.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    (input + 2 * pad).checked_sub(k).map(|span| span / stride + 1)
}

/// Direct-loop cross-correlation, kept as the reference for the gemm path.
/// `x` is N,C,H,W and `w` is M,C,K,K.
pub fn conv2d_forward_direct(x: &[f32], xs: [usize; 4], w: &[f32], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [m, _, k, _] = ws;
    let ho = conv_out_extent(h, k, stride, pad).expect("conv window must fit");
    let wo = conv_out_extent(wd, k, stride, pad).expect("conv window must fit");
    let mut out = vec![0.0f32; n * m * ho * wo];
    for b in 0..n {
        for o in 0..m {
            let dst = &mut out[(b * m + o) * ho * wo..(b * m + o + 1) * ho * wo];
            for ci in 0..c {
                let src = &x[(b * c + ci) * h * wd..(b * c + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((o * c + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *d += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input_direct(gy: &[f32], xs: [usize; 4], w: &[f32], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [m, _, k, _] = ws;
    let ho = conv_out_extent(h, k, stride, pad).expect("conv window must fit");
    let wo = conv_out_extent(wd, k, stride, pad).expect("conv window must fit");
    let mut gx = vec![0.0f32; n * c * h * wd];
    for b in 0..n {
        for o in 0..m {
            let g = &gy[(b * m + o) * ho * wo..(b * m + o + 1) * ho * wo];
            for ci in 0..c {
                let dst = &mut gx[(b * c + ci) * h * wd..(b * c + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((o * c + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = iy as usize * wd;
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    dst[base + ix as usize] += wv * g[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_backward_weight_direct(gy: &[f32], x: &[f32], xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [m, _, k, _] = ws;
    let ho = conv_out_extent(h, k, stride, pad).expect("conv window must fit");
    let wo = conv_out_extent(wd, k, stride, pad).expect("conv window must fit");
    let mut gw = vec![0.0f32; m * c * k * k];
    for b in 0..n {
        for o in 0..m {
            let g = &gy[(b * m + o) * ho * wo..(b * m + o + 1) * ho * wo];
            for ci in 0..c {
                let src = &x[(b * c + ci) * h * wd..(b * c + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0f32;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = iy as usize * wd;
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += g[oy * wo + ox] * src[base + ix as usize];
                                }
                            }
                        }
                        gw[((o * c + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Output positions `[lo, hi)` whose tap `o * stride + k_off - pad` lands inside `0..len`.
fn tap_range(k_off: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k_off { ((len - 1 + pad - k_off) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one sample (C,H,W) into a `C*K*K x Ho*Wo` column matrix.
fn im2col(src: &[f32], c: usize, h: usize, wd: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f32]) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[(ci * h + iy as usize) * wd..][..wd];
                    let (lo, hi) = tap_range(kx, pad, stride, wd, wo);
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&srow[lo + kx - pad..hi + kx - pad]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = srow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, wd: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dst: &mut [f32]) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[(ci * h + iy as usize) * wd..][..wd];
                    let (lo, hi) = tap_range(kx, pad, stride, wd, wo);
                    for ox in lo..hi {
                        drow[ox * stride + kx - pad] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Row-major `c (m x n) = beta * c + a (m x k) * b (k x n)`, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Cross-correlation via im2col and sgemm. `x` is N,C,H,W and `w` is M,C,K,K.
pub fn conv2d_forward(x: &[f32], xs: [usize; 4], w: &[f32], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [m, _, k, _] = ws;
    let ho = conv_out_extent(h, k, stride, pad).expect("conv window must fit");
    let wo = conv_out_extent(wd, k, stride, pad).expect("conv window must fit");
    let (ckk, p) = (c * k * k, ho * wo);
    let mut cols = vec![0.0f32; ckk * p];
    let mut out = vec![0.0f32; n * m * p];
    for b in 0..n {
        im2col(&x[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, &mut cols);
        gemm(m, ckk, p, w, false, &cols, false, 0.0, &mut out[b * m * p..(b + 1) * m * p]);
    }
    out
}

pub fn conv2d_backward_input(gy: &[f32], xs: [usize; 4], w: &[f32], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [m, _, k, _] = ws;
    let ho = conv_out_extent(h, k, stride, pad).expect("conv window must fit");
    let wo = conv_out_extent(wd, k, stride, pad).expect("conv window must fit");
    let (ckk, p) = (c * k * k, ho * wo);
    let mut cols = vec![0.0f32; ckk * p];
    let mut gx = vec![0.0f32; n * c * h * wd];
    for b in 0..n {
        gemm(ckk, m, p, w, true, &gy[b * m * p..(b + 1) * m * p], false, 0.0, &mut cols);
        col2im(&cols, c, h, wd, k, stride, pad, ho, wo, &mut gx[b * c * h * wd..(b + 1) * c * h * wd]);
    }
    gx
}

pub fn conv2d_backward_weight(gy: &[f32], x: &[f32], xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f32> {
    let [n, c, h, wd] = xs;
    let [m, _, k, _] = ws;
    let ho = conv_out_extent(h, k, stride, pad).expect("conv window must fit");
    let wo = conv_out_extent(wd, k, stride, pad).expect("conv window must fit");
    let (ckk, p) = (c * k * k, ho * wo);
    let mut cols = vec![0.0f32; ckk * p];
    let mut gw = vec![0.0f32; m * ckk];
    for b in 0..n {
        im2col(&x[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, &mut cols);
        gemm(m, p, ckk, &gy[b * m * p..(b + 1) * m * p], false, &cols, true, 1.0, &mut gw);
    }
    gw
}

/// Max pooling with `-inf` padding. Returns the pooled values and, for each
/// output, the flat input index of the first maximum in row-major window order.
pub fn maxpool2d_forward(x: &[f32], xs: [usize; 4], k: usize, stride: usize, pad: usize) -> (Vec<f32>, Vec<u32>) {
    let [n, c, h, w] = xs;
    let ho = conv_out_extent(h, k, stride, pad).expect("pool window must fit");
    let wo = conv_out_extent(w, k, stride, pad).expect("pool window must fit");
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == u32::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// `x` is N,F and `w` is O,F.
pub fn linear_forward(x: &[f32], n: usize, f: usize, w: &[f32], o: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * o];
    for b in 0..n {
        let xr = &x[b * f..(b + 1) * f];
        for j in 0..o {
            let wr = &w[j * f..(j + 1) * f];
            out[b * o + j] = xr.iter().zip(wr).fold(0.0f32, |acc, (a, b)| acc + a * b);
        }
    }
    out
}

pub fn global_avg_pool_forward(x: &[f32], xs: [usize; 4]) -> Vec<f32> {
    let [n, c, h, w] = xs;
    let hw = h * w;
    (0..n * c).map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f32>() / hw as f32).collect()
}

/// Output channel `j` copies input channel `j % C`.
pub fn replicate_channels_forward(x: &[f32], xs: [usize; 4], out_c: usize) -> Vec<f32> {
    let [n, c, h, w] = xs;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * out_c * hw);
    for b in 0..n {
        for j in 0..out_c {
            let src = (b * c + j % c) * hw;
            out.extend_from_slice(&x[src..src + hw]);
        }
    }
    out
}
