//! Convolution and pooling kernels.
//!
//! Forward conv is im2col + GEMM (`matrixmultiply::sgemm`) with the filter
//! dimension split into contiguous row blocks. Each output element is written
//! by exactly one worker and its reduction order over the K dimension is
//! fixed by the GEMM blocking, which depends only on K and N — so results are
//! bit-identical for any thread count. A naive reference implementation lives
//! in the test suite as the oracle for these kernels.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Worker cap for op-internal parallelism. 0 and 1 both mean sequential.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Resolves `LLE_THREADS` on first use; unset defaults to sequential.
pub fn threads() -> usize {
    let t = THREADS.load(Ordering::Relaxed);
    if t != 0 {
        return t;
    }
    let from_env = std::env::var("LLE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    THREADS.store(from_env, Ordering::Relaxed);
    from_env
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn compute(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k < 1 || stride < 1 {
            return Err(Error::config(format!(
                "conv2d: kernel ({k}) and stride ({stride}) must be >= 1"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("padded input >= kernel {k}"),
                format!("{h}x{w} with padding {pad}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(ConvDims { n, c_in, h, w, c_out, k, stride, pad, oh, ow })
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Fills `col` ([C*K*K, OH*OW] row-major) from one input sample.
fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let (k, s, p) = (d.k, d.stride, d.pad);
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut col[row + oy * d.ow..row + (oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if s == 1 {
                        // Contiguous copy with edge clipping.
                        let ix0 = kx as isize - p as isize;
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    } else {
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one input-gradient sample.
fn col2im(col: &[f32], d: &ConvDims, gx: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let (k, s, p) = (d.k, d.stride, d.pad);
    for c in 0..d.c_in {
        let plane = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * d.ow..row + (oy + 1) * d.ow];
                    let dst_row = iy as usize * d.w;
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < d.w as isize {
                            plane[dst_row + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Splits `[0, rows)` into at most `threads()` contiguous chunks and runs
/// `work` on matching sub-slices of `out` (chunk size in units of `row_len`).
fn par_rows(out: &mut [f32], rows: usize, row_len: usize, work: impl Fn(usize, usize, &mut [f32]) + Sync) {
    let t = threads().min(rows).max(1);
    if t <= 1 {
        work(0, rows, out);
        return;
    }
    let chunk = rows.div_ceil(t);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut r0 = 0;
        let work = &work;
        while r0 < rows {
            let r1 = (r0 + chunk).min(rows);
            let (head, tail) = rest.split_at_mut((r1 - r0) * row_len);
            scope.spawn(move || work(r0, r1, head));
            rest = tail;
            r0 = r1;
        }
    });
}

/// x: [N, C, H, W], w: [F, C, K, K], bias: [F]. Returns [N, F, OH, OW].
pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let ohw = d.oh * d.ow;
    let ckk = d.c_in * d.k * d.k;
    let mut out = vec![0.0f32; d.n * d.c_out * ohw];
    let direct = d.k == 1 && d.stride == 1 && d.pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0f32; ckk * ohw] };
    for n in 0..d.n {
        let x_n = &x[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        let b_mat: &[f32] = if direct {
            x_n
        } else {
            im2col(x_n, d, &mut col);
            &col
        };
        let out_n = &mut out[n * d.c_out * ohw..(n + 1) * d.c_out * ohw];
        par_rows(out_n, d.c_out, ohw, |f0, f1, c_chunk| {
            gemm(
                f1 - f0,
                ckk,
                ohw,
                1.0,
                &w[f0 * ckk..],
                ckk as isize,
                1,
                b_mat,
                ohw as isize,
                1,
                0.0,
                c_chunk,
                ohw as isize,
                1,
            );
        });
        if let Some(bias) = bias {
            for f in 0..d.c_out {
                let bv = bias[f];
                for v in &mut out_n[f * ohw..(f + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input(gout: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    let ohw = d.oh * d.ow;
    let ckk = d.c_in * d.k * d.k;
    let mut gx = vec![0.0f32; d.n * d.c_in * d.h * d.w];
    let mut colgrad = vec![0.0f32; ckk * ohw];
    for n in 0..d.n {
        let g_n = &gout[n * d.c_out * ohw..(n + 1) * d.c_out * ohw];
        // colgrad = w^T (CKK x F) * g_n (F x OHW)
        gemm(
            ckk,
            d.c_out,
            ohw,
            1.0,
            w,
            1,
            ckk as isize,
            g_n,
            ohw as isize,
            1,
            0.0,
            &mut colgrad,
            ohw as isize,
            1,
        );
        let gx_n = &mut gx[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        if d.k == 1 && d.stride == 1 && d.pad == 0 {
            gx_n.copy_from_slice(&colgrad);
        } else {
            col2im(&colgrad, d, gx_n);
        }
    }
    gx
}

pub fn conv2d_backward_weight(x: &[f32], gout: &[f32], d: &ConvDims) -> Vec<f32> {
    let ohw = d.oh * d.ow;
    let ckk = d.c_in * d.k * d.k;
    let mut gw = vec![0.0f32; d.c_out * ckk];
    let direct = d.k == 1 && d.stride == 1 && d.pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0f32; ckk * ohw] };
    for n in 0..d.n {
        let x_n = &x[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w];
        let b_mat: &[f32] = if direct {
            x_n
        } else {
            im2col(x_n, d, &mut col);
            &col
        };
        let g_n = &gout[n * d.c_out * ohw..(n + 1) * d.c_out * ohw];
        // gw += g_n (F x OHW) * col^T (OHW x CKK), accumulated in sample order.
        gemm(
            d.c_out,
            ohw,
            ckk,
            1.0,
            g_n,
            ohw as isize,
            1,
            b_mat,
            1,
            ohw as isize,
            1.0,
            &mut gw,
            ckk as isize,
            1,
        );
    }
    gw
}

pub fn conv2d_backward_bias(gout: &[f32], d: &ConvDims) -> Vec<f32> {
    let ohw = d.oh * d.ow;
    let mut gb = vec![0.0f32; d.c_out];
    for n in 0..d.n {
        for f in 0..d.c_out {
            let mut acc = 0.0f32;
            for v in &gout[(n * d.c_out + f) * ohw..(n * d.c_out + f + 1) * ohw] {
                acc += v;
            }
            gb[f] += acc;
        }
    }
    gb
}

/// Transposed conv with kernel == stride (non-overlapping upsampling).
/// x: [N, C, H, W], w: [C, F, K, K]. Returns [N, F, K*H, K*W].
pub fn conv_transpose2d_forward(x: &[f32], w: &[f32], n: usize, c: usize, h: usize, wd: usize, f: usize, k: usize) -> Vec<f32> {
    let hw = h * wd;
    let fkk = f * k * k;
    let (oh, ow) = (h * k, wd * k);
    let mut out = vec![0.0f32; n * f * oh * ow];
    let mut out_col = vec![0.0f32; fkk * hw];
    for ni in 0..n {
        let x_n = &x[ni * c * hw..(ni + 1) * c * hw];
        // out_col = w^T (FKK x C) * x_n (C x HW)
        gemm(
            fkk,
            c,
            hw,
            1.0,
            w,
            1,
            fkk as isize,
            x_n,
            hw as isize,
            1,
            0.0,
            &mut out_col,
            hw as isize,
            1,
        );
        let out_n = &mut out[ni * f * oh * ow..(ni + 1) * f * oh * ow];
        scatter_blocks(&out_col, out_n, f, k, h, wd);
    }
    out
}

/// out_col[(f,ky,kx), (i,j)] -> out[f, i*k+ky, j*k+kx]
fn scatter_blocks(out_col: &[f32], out_n: &mut [f32], f: usize, k: usize, h: usize, w: usize) {
    let hw = h * w;
    let (oh, ow) = (h * k, w * k);
    for fi in 0..f {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((fi * k + ky) * k + kx) * hw;
                for i in 0..h {
                    let src = &out_col[row + i * w..row + (i + 1) * w];
                    let dst_base = fi * oh * ow + (i * k + ky) * ow + kx;
                    for (j, v) in src.iter().enumerate() {
                        out_n[dst_base + j * k] = *v;
                    }
                }
            }
        }
    }
}

/// Inverse of `scatter_blocks`.
fn gather_blocks(gout_n: &[f32], gcol: &mut [f32], f: usize, k: usize, h: usize, w: usize) {
    let hw = h * w;
    let (oh, ow) = (h * k, w * k);
    for fi in 0..f {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((fi * k + ky) * k + kx) * hw;
                for i in 0..h {
                    let dst = &mut gcol[row + i * w..row + (i + 1) * w];
                    let src_base = fi * oh * ow + (i * k + ky) * ow + kx;
                    for (j, v) in dst.iter_mut().enumerate() {
                        *v = gout_n[src_base + j * k];
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_backward_input(gout: &[f32], w: &[f32], n: usize, c: usize, h: usize, wd: usize, f: usize, k: usize) -> Vec<f32> {
    let hw = h * wd;
    let fkk = f * k * k;
    let mut gx = vec![0.0f32; n * c * hw];
    let mut gcol = vec![0.0f32; fkk * hw];
    for ni in 0..n {
        gather_blocks(&gout[ni * f * hw * k * k..], &mut gcol, f, k, h, wd);
        // gx_n = w (C x FKK) * gcol (FKK x HW)
        gemm(
            c,
            fkk,
            hw,
            1.0,
            w,
            fkk as isize,
            1,
            &gcol,
            hw as isize,
            1,
            0.0,
            &mut gx[ni * c * hw..(ni + 1) * c * hw],
            hw as isize,
            1,
        );
    }
    gx
}

pub fn conv_transpose2d_backward_weight(x: &[f32], gout: &[f32], n: usize, c: usize, h: usize, wd: usize, f: usize, k: usize) -> Vec<f32> {
    let hw = h * wd;
    let fkk = f * k * k;
    let mut gw = vec![0.0f32; c * fkk];
    let mut gcol = vec![0.0f32; fkk * hw];
    for ni in 0..n {
        gather_blocks(&gout[ni * f * hw * k * k..], &mut gcol, f, k, h, wd);
        // gw += x_n (C x HW) * gcol^T (HW x FKK)
        gemm(
            c,
            hw,
            fkk,
            1.0,
            &x[ni * c * hw..(ni + 1) * c * hw],
            hw as isize,
            1,
            &gcol,
            1,
            hw as isize,
            1.0,
            &mut gw,
            fkk as isize,
            1,
        );
    }
    gw
}

/// 2x2 max pool. Returns the pooled values and flat input argmax indices
/// (first maximum in row-major window scan wins ties).
pub fn maxpool2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let base_in = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let idx = [
                    (2 * i) * w + 2 * j,
                    (2 * i) * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = idx[0];
                for &cand in &idx[1..] {
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out[p * oh * ow + i * ow + j] = plane[best];
                arg[p * oh * ow + i * ow + j] = (base_in + best) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(gout: &[f32], arg: &[u32], in_len: usize) -> Vec<f32> {
    let mut gx = vec![0.0f32; in_len];
    for (g, &a) in gout.iter().zip(arg.iter()) {
        gx[a as usize] += g;
    }
    gx
}

/// 2x2 average pool.
pub fn avgpool2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = plane[(2 * i) * w + 2 * j]
                    + plane[(2 * i) * w + 2 * j + 1]
                    + plane[(2 * i + 1) * w + 2 * j]
                    + plane[(2 * i + 1) * w + 2 * j + 1];
                out[p * oh * ow + i * ow + j] = s * 0.25;
            }
        }
    }
    out
}

pub fn avgpool2_backward(gout: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let plane = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = gout[p * oh * ow + i * ow + j] * 0.25;
                plane[(2 * i) * w + 2 * j] += g;
                plane[(2 * i) * w + 2 * j + 1] += g;
                plane[(2 * i + 1) * w + 2 * j] += g;
                plane[(2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
    gx
}

/// [N, 4C, H, W] -> [N, C, 2H, 2W]: channel group (4c..4c+4) fills positions
/// (0,0),(0,1),(1,0),(1,1) of each 2x2 output block.
pub fn depth_to_space2(x: &[f32], n: usize, c4: usize, h: usize, w: usize) -> Vec<f32> {
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for sub in 0..4 {
                let (di, dj) = (sub / 2, sub % 2);
                let src_plane = &x[(ni * c4 + 4 * ci + sub) * h * w..(ni * c4 + 4 * ci + sub + 1) * h * w];
                let dst_plane = ni * c * oh * ow + ci * oh * ow;
                for i in 0..h {
                    let dst_base = dst_plane + (2 * i + di) * ow + dj;
                    for j in 0..w {
                        out[dst_base + 2 * j] = src_plane[i * w + j];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `depth_to_space2`: [N, C, 2H, 2W] -> [N, 4C, H, W].
pub fn space_to_depth2(x: &[f32], n: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (h, w) = (oh / 2, ow / 2);
    let c4 = 4 * c;
    let mut out = vec![0.0f32; n * c4 * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for sub in 0..4 {
                let (di, dj) = (sub / 2, sub % 2);
                let dst_plane = &mut out[(ni * c4 + 4 * ci + sub) * h * w..(ni * c4 + 4 * ci + sub + 1) * h * w];
                let src_plane = ni * c * oh * ow + ci * oh * ow;
                for i in 0..h {
                    let src_base = src_plane + (2 * i + di) * ow + dj;
                    for j in 0..w {
                        dst_plane[i * w + j] = x[src_base + 2 * j];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsample, [N, C, H, W] -> [N, C, 2H, 2W].
pub fn nn_upsample2(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                dst[(2 * i) * ow + 2 * j] = v;
                dst[(2 * i) * ow + 2 * j + 1] = v;
                dst[(2 * i + 1) * ow + 2 * j] = v;
                dst[(2 * i + 1) * ow + 2 * j + 1] = v;
            }
        }
    }
    out
}
