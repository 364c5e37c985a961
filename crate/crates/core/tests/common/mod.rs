//! Shared oracles and harnesses for the integration suites.
//!
//! Everything here is deliberately naive and independent of the library's
//! kernels: direct loops in f64 arithmetic, no im2col, no GEMM, no tape. The
//! production implementations are checked against these references.

#![allow(dead_code)]

use lowlight::params::{Bound, ParamSet};
use lowlight::rng::Rng;
use lowlight::tape::{Tape, ValueId};

// ---------------------------------------------------------------------------
// Naive reference kernels (f64 accumulation, direct index arithmetic)
// ---------------------------------------------------------------------------

/// Direct convolution: x [N,C,H,W], w [F,C,K,K], bias [F], zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|b| b[fi] as f64).unwrap_or(0.0);
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((fi * c + ci) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    out
}

/// Direct transposed convolution with kernel == stride: x [N,C,H,W],
/// w [C,F,K,K], output [N,F,K*H,K*W]. Each output pixel receives exactly one
/// (input pixel, kernel tap) product per input channel.
pub fn naive_conv_transpose2d(
    x: &[f32],
    w: &[f32],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    k: usize,
) -> Vec<f32> {
    let (oh, ow) = (h * k, wd * k);
    let mut out = vec![0.0f32; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for iy in 0..h {
                for ix in 0..wd {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0f64;
                            for ci in 0..c {
                                let xv = x[((ni * c + ci) * h + iy) * wd + ix];
                                let wv = w[((ci * f + fi) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                            out[((ni * f + fi) * oh + iy * k + ky) * ow + ix * k + kx] = acc as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Direct 2x2 max pool.
pub fn naive_maxpool2(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x[p * h * w + (2 * i + di) * w + 2 * j + dj]);
                    }
                }
                out[p * oh * ow + i * ow + j] = m;
            }
        }
    }
    out
}

/// Direct 2x2 average pool.
pub fn naive_avgpool2(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0f64;
                for di in 0..2 {
                    for dj in 0..2 {
                        s += x[p * h * w + (2 * i + di) * w + 2 * j + dj] as f64;
                    }
                }
                out[p * oh * ow + i * ow + j] = (s / 4.0) as f32;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sliding-window structural-similarity oracle
// ---------------------------------------------------------------------------

/// Mean structural similarity of two [N,C,H,W] images by direct sliding
/// windows in f64: an 11-tap Gaussian (sigma 1.5) weighted mean/variance per
/// valid window position, luminance and contrast-structure ratios multiplied,
/// averaged over every window of every channel.
pub fn ssim_oracle(a: &[f32], b: &[f32], n: usize, c: usize, h: usize, w: usize) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;
    let half = (WIN / 2) as f64;
    let taps: Vec<f64> = (0..WIN)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let tap_sum: f64 = taps.iter().sum();
    let weight = |ky: usize, kx: usize| taps[ky] * taps[kx] / (tap_sum * tap_sum);

    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in 0..n * c {
        let pa = &a[p * h * w..(p + 1) * h * w];
        let pb = &b[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mu_a, mut mu_b, mut e_aa, mut e_bb, mut e_ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..WIN {
                    for kx in 0..WIN {
                        let va = pa[(oy + ky) * w + ox + kx] as f64;
                        let vb = pb[(oy + ky) * w + ox + kx] as f64;
                        let wt = weight(ky, kx);
                        mu_a += wt * va;
                        mu_b += wt * vb;
                        e_aa += wt * va * va;
                        e_bb += wt * vb * vb;
                        e_ab += wt * va * vb;
                    }
                }
                let var_a = e_aa - mu_a * mu_a;
                let var_b = e_bb - mu_b * mu_b;
                let cov = e_ab - mu_a * mu_b;
                let lum = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
                let cs = (2.0 * cov + C2) / (var_a + var_b + C2);
                total += lum * cs;
                count += 1;
            }
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Central finite-difference harnesses
// ---------------------------------------------------------------------------

/// How a finite-difference comparison is run. Error metric per coordinate:
/// |analytic - fd| / max(1, |analytic|, |fd|).
#[derive(Clone, Copy)]
pub struct FdCfg {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed error.
    pub tol: f64,
    /// Random coordinates to probe (capped by the coordinate pool size).
    pub coords: usize,
}

impl FdCfg {
    pub fn op() -> Self {
        FdCfg { h: 1e-3, tol: 1e-3, coords: 100 }
    }

    pub fn model() -> Self {
        FdCfg { h: 1e-3, tol: 5e-3, coords: 100 }
    }
}

fn fd_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / 1.0f64.max(analytic.abs()).max(fd.abs())
}

/// Checks analytic gradients of a scalar graph against central differences.
/// `inputs` become gradient-tracked leaves in order; `build` must
/// reconstruct the identical graph for any leaf contents.
pub fn fd_check_leaves(
    label: &str,
    inputs: &[(&str, Vec<usize>, Vec<f32>)],
    build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId,
    cfg: FdCfg,
    rng: &mut Rng,
) {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs
        .iter()
        .map(|(_, shape, data)| tape.leaf_from(shape.clone(), data.clone(), true))
        .collect();
    let root = build(&mut tape, &ids);
    assert_eq!(tape.value(root).len(), 1, "{label}: root must be scalar");
    tape.backward(root).unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));
    let grads: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| tape.grad(id).unwrap_or_else(|| panic!("{label}: missing grad")).to_vec())
        .collect();

    let eval = |leaf: usize, idx: usize, delta: f64| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs
            .iter()
            .enumerate()
            .map(|(j, (_, shape, data))| {
                let mut d = data.clone();
                if j == leaf {
                    d[idx] = (d[idx] as f64 + delta) as f32;
                }
                tape.leaf_from(shape.clone(), d, false)
            })
            .collect();
        let root = build(&mut tape, &ids);
        tape.value(root)[0] as f64
    };

    let total: usize = inputs.iter().map(|(_, _, d)| d.len()).sum();
    let picks = cfg.coords.min(total);
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let mut t = rng.next_below(total);
        let mut leaf = 0;
        while t >= inputs[leaf].2.len() {
            t -= inputs[leaf].2.len();
            leaf += 1;
        }
        let fd = (eval(leaf, t, cfg.h) - eval(leaf, t, -cfg.h)) / (2.0 * cfg.h);
        let analytic = grads[leaf][t] as f64;
        let err = fd_error(analytic, fd);
        worst = worst.max(err);
        assert!(
            err <= cfg.tol,
            "{label}: leaf '{}' coord {t}: analytic {analytic:.6e}, fd {fd:.6e}, err {err:.3e} > {:.1e}",
            inputs[leaf].0,
            cfg.tol
        );
    }
    eprintln!("  fd {label}: {picks} coords, worst err {worst:.3e}");
}

/// Finite-difference check through a full model: every parameter of `params`
/// plus the extra input leaf form the coordinate pool. `build` receives the
/// bound parameters and the input leaf and must return a scalar loss.
pub fn fd_check_model(
    label: &str,
    params: &ParamSet,
    input_shape: Vec<usize>,
    input_data: Vec<f32>,
    build: &dyn Fn(&mut Tape, &Bound, ValueId) -> ValueId,
    cfg: FdCfg,
    rng: &mut Rng,
) {
    // Analytic pass.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.leaf_from(input_shape.clone(), input_data.clone(), true);
    let root = build(&mut tape, &bound, x);
    assert_eq!(tape.value(root).len(), 1, "{label}: root must be scalar");
    tape.backward(root).unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));
    let param_grads = bound.grads(&tape).unwrap_or_else(|e| panic!("{label}: grads failed: {e}"));
    let input_grad = tape.grad(x).expect("input leaf tracks gradients").to_vec();

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
    let param_total: usize = sizes.iter().sum();
    let total = param_total + input_data.len();

    let eval = |coord: usize, delta: f64| -> f64 {
        let mut set = params.clone();
        let mut input = input_data.clone();
        if coord < param_total {
            let mut t = coord;
            let mut li = 0;
            while t >= sizes[li] {
                t -= sizes[li];
                li += 1;
            }
            let tensor = set.get_mut(&names[li]);
            let d = tensor.data_mut();
            d[t] = (d[t] as f64 + delta) as f32;
        } else {
            let t = coord - param_total;
            input[t] = (input[t] as f64 + delta) as f32;
        }
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, false);
        let x = tape.leaf_from(input_shape.clone(), input, false);
        let root = build(&mut tape, &bound, x);
        tape.value(root)[0] as f64
    };

    let analytic_at = |coord: usize| -> f64 {
        if coord < param_total {
            let mut t = coord;
            let mut li = 0;
            while t >= sizes[li] {
                t -= sizes[li];
                li += 1;
            }
            param_grads[li][t] as f64
        } else {
            input_grad[coord - param_total] as f64
        }
    };

    let picks = cfg.coords.min(total);
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let coord = rng.next_below(total);
        let fd = (eval(coord, cfg.h) - eval(coord, -cfg.h)) / (2.0 * cfg.h);
        let analytic = analytic_at(coord);
        let err = fd_error(analytic, fd);
        worst = worst.max(err);
        assert!(
            err <= cfg.tol,
            "{label}: coord {coord}: analytic {analytic:.6e}, fd {fd:.6e}, err {err:.3e} > {:.1e}",
            cfg.tol
        );
    }
    eprintln!("  fd {label}: {picks} coords, worst err {worst:.3e}");
}

// ---------------------------------------------------------------------------
// Random-data helpers
// ---------------------------------------------------------------------------

/// Uniform values in [lo, hi).
pub fn rand_vec(rng: &mut Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.next_range(lo, hi)).collect()
}

/// Random magnitudes in [margin, 1] with random signs: keeps every value at
/// least `margin` away from the kink of relu-family activations.
pub fn rand_signed_margin(rng: &mut Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = rng.next_range(margin, 1.0);
            if rng.next_f32() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}

/// Random values where each 2x2 window has a unique maximum with a clear
/// margin, so max-pool selections are stable under small perturbations.
pub fn rand_pool_safe(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut data = rand_vec(rng, n * c * h * w, 0.0, 1.0);
    for p in 0..n * c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let idx = [
                    p * h * w + (2 * i) * w + 2 * j,
                    p * h * w + (2 * i) * w + 2 * j + 1,
                    p * h * w + (2 * i + 1) * w + 2 * j,
                    p * h * w + (2 * i + 1) * w + 2 * j + 1,
                ];
                let best = idx
                    .iter()
                    .copied()
                    .max_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap())
                    .unwrap();
                data[best] += 0.5;
            }
        }
    }
    data
}
