//! Value-level checks of the numeric kernels against naive references:
//! convolution forms, pooling, the attention gate, adversarial losses, and
//! structural similarity, each computed independently with direct loops.

mod common;

use common::*;
use lowlight::conv;
use lowlight::generator::{attention_gate, GateParamIds};
use lowlight::losses;
use lowlight::rng::Rng;
use lowlight::tape::Tape;

fn assert_close(label: &str, got: &[f32], want: &[f32], tol: f32) {
    assert_eq!(got.len(), want.len(), "{label}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let err = (g - w).abs() / 1.0f32.max(w.abs());
        assert!(err <= tol, "{label}: index {i}: got {g}, want {w}, err {err:.3e}");
    }
}

#[test]
fn conv2d_matches_naive_over_kernel_stride_pad_sweep() {
    let mut rng = Rng::new(0x5EED);
    let cases = [
        // (n, c, h, w, f, k, stride, pad)
        (1, 1, 5, 5, 1, 1, 1, 0),
        (2, 3, 8, 9, 4, 3, 1, 1),
        (1, 4, 10, 10, 3, 4, 2, 1),
        (2, 2, 11, 7, 5, 5, 3, 2),
        (1, 3, 6, 6, 2, 3, 2, 0),
        (1, 6, 12, 12, 4, 4, 1, 1),
        (3, 1, 7, 13, 2, 2, 2, 1),
    ];
    for &(n, c, h, w, f, k, s, p) in &cases {
        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut rng, f * c * k * k, -0.5, 0.5);
        let b = rand_vec(&mut rng, f, -0.2, 0.2);
        let mut tape = Tape::new();
        let xi = tape.leaf_from(vec![n, c, h, w], x.clone(), false);
        let wi = tape.leaf_from(vec![f, c, k, k], wt.clone(), false);
        let bi = tape.leaf_from(vec![f], b.clone(), false);
        let out = tape.conv2d(xi, wi, Some(bi), s, p).unwrap();
        let want = naive_conv2d(&x, &wt, Some(&b), n, c, h, w, f, k, s, p);
        assert_close(&format!("conv k{k} s{s} p{p}"), tape.value(out), &want, 1e-4);
    }
}

#[test]
fn conv2d_without_bias_matches_naive() {
    let mut rng = Rng::new(77);
    let (n, c, h, w, f, k) = (1, 3, 9, 8, 2, 3);
    let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let wt = rand_vec(&mut rng, f * c * k * k, -0.5, 0.5);
    let mut tape = Tape::new();
    let xi = tape.leaf_from(vec![n, c, h, w], x.clone(), false);
    let wi = tape.leaf_from(vec![f, c, k, k], wt.clone(), false);
    let out = tape.conv2d(xi, wi, None, 1, 1).unwrap();
    let want = naive_conv2d(&x, &wt, None, n, c, h, w, f, k, 1, 1);
    assert_close("conv no-bias", tape.value(out), &want, 1e-4);
}

#[test]
fn conv_transpose2d_matches_naive() {
    let mut rng = Rng::new(0xABCD);
    for &(n, c, h, w, f, k) in &[(1, 4, 3, 5, 2, 2), (2, 3, 4, 4, 5, 2), (1, 2, 2, 3, 3, 3)] {
        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut rng, c * f * k * k, -0.5, 0.5);
        let mut tape = Tape::new();
        let xi = tape.leaf_from(vec![n, c, h, w], x.clone(), false);
        let wi = tape.leaf_from(vec![c, f, k, k], wt.clone(), false);
        let out = tape.conv_transpose2d(xi, wi, k).unwrap();
        let want = naive_conv_transpose2d(&x, &wt, n, c, h, w, f, k);
        assert_close(&format!("deconv k{k}"), tape.value(out), &want, 1e-4);
    }
}

#[test]
fn pooling_matches_naive() {
    let mut rng = Rng::new(0xF00D);
    let (n, c, h, w) = (2, 3, 8, 10);
    let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let mut tape = Tape::new();
    let xi = tape.leaf_from(vec![n, c, h, w], x.clone(), false);
    let mx = tape.maxpool2(xi).unwrap();
    let av = tape.avgpool2(xi).unwrap();
    assert_close("maxpool", tape.value(mx), &naive_maxpool2(&x, n, c, h, w), 0.0);
    assert_close("avgpool", tape.value(av), &naive_avgpool2(&x, n, c, h, w), 1e-6);
}

#[test]
fn conv2d_bit_identical_across_thread_counts() {
    let mut rng = Rng::new(31337);
    let (n, c, h, w, f, k) = (2, 8, 33, 29, 16, 3);
    let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let wt = rand_vec(&mut rng, f * c * k * k, -0.5, 0.5);
    let b = rand_vec(&mut rng, f, -0.2, 0.2);
    let run = || {
        let mut tape = Tape::new();
        let xi = tape.leaf_from(vec![n, c, h, w], x.clone(), false);
        let wi = tape.leaf_from(vec![f, c, k, k], wt.clone(), false);
        let bi = tape.leaf_from(vec![f], b.clone(), false);
        let out = tape.conv2d(xi, wi, Some(bi), 1, 1).unwrap();
        tape.value(out).to_vec()
    };
    conv::set_threads(1);
    let seq = run();
    for t in [2, 3, 4, 7] {
        conv::set_threads(t);
        let par = run();
        conv::set_threads(1);
        assert_eq!(seq, par, "conv results must be bit-identical at {t} threads");
    }
}

#[test]
fn attention_gate_matches_dense_oracle() {
    let mut rng = Rng::new(0x6A7E);
    let (n, c, h, w) = (2, 6, 5, 7);
    let c_int = 3;
    let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let g = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let wx = rand_vec(&mut rng, c_int * c, -0.7, 0.7);
    let wg = rand_vec(&mut rng, c_int * c, -0.7, 0.7);
    let ba = rand_vec(&mut rng, c_int, -0.3, 0.3);
    let pw = rand_vec(&mut rng, c_int, -0.7, 0.7);
    let pb = rand_vec(&mut rng, 1, -0.3, 0.3);

    let mut tape = Tape::new();
    let xi = tape.leaf_from(vec![n, c, h, w], x.clone(), false);
    let gi = tape.leaf_from(vec![n, c, h, w], g.clone(), false);
    let ids = GateParamIds {
        w_x: tape.leaf_from(vec![c_int, c, 1, 1], wx.clone(), false),
        w_g: tape.leaf_from(vec![c_int, c, 1, 1], wg.clone(), false),
        b_add: tape.leaf_from(vec![c_int], ba.clone(), false),
        psi_w: tape.leaf_from(vec![1, c_int, 1, 1], pw.clone(), false),
        psi_b: tape.leaf_from(vec![1], pb.clone(), false),
    };
    let (gated, map) = attention_gate(&mut tape, xi, gi, &ids).unwrap();
    assert_eq!(tape.shape(map), &[n, 1, h, w]);
    assert_eq!(tape.shape(gated), &[n, c, h, w]);

    // Dense per-pixel oracle in f64.
    let hw = h * w;
    let mut want_map = vec![0.0f32; n * hw];
    let mut want_gated = vec![0.0f32; n * c * hw];
    for ni in 0..n {
        for p in 0..hw {
            let mut s = pb[0] as f64;
            for ci in 0..c_int {
                let mut a = ba[ci] as f64;
                for cl in 0..c {
                    a += wx[ci * c + cl] as f64 * x[(ni * c + cl) * hw + p] as f64;
                    a += wg[ci * c + cl] as f64 * g[(ni * c + cl) * hw + p] as f64;
                }
                s += pw[ci] as f64 * a.max(0.0);
            }
            let m = 1.0 / (1.0 + (-s).exp());
            want_map[ni * hw + p] = m as f32;
            for cl in 0..c {
                want_gated[(ni * c + cl) * hw + p] = (x[(ni * c + cl) * hw + p] as f64 * m) as f32;
            }
        }
    }
    assert_close("gate map", tape.value(map), &want_map, 1e-5);
    assert_close("gated skip", tape.value(gated), &want_gated, 1e-5);

    // Range property: every learned map value lies strictly inside (0, 1).
    for &v in tape.value(map) {
        assert!(v > 0.0 && v < 1.0, "gate map value {v} outside (0,1)");
    }
}

#[test]
fn adversarial_losses_match_direct_formula() {
    let mut rng = Rng::new(404);
    let m = 24;
    let real = rand_vec(&mut rng, m, -3.0, 3.0);
    let fake = rand_vec(&mut rng, m, -3.0, 3.0);
    let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
    let want_d: f64 = real.iter().map(|&v| softplus(-v as f64)).sum::<f64>() / m as f64
        + fake.iter().map(|&v| softplus(v as f64)).sum::<f64>() / m as f64;
    let want_g: f64 = fake.iter().map(|&v| softplus(-v as f64)).sum::<f64>() / m as f64;

    let mut tape = Tape::new();
    let ri = tape.leaf_from(vec![1, 1, 4, 6], real, false);
    let fi = tape.leaf_from(vec![1, 1, 4, 6], fake, false);
    let d = losses::adv_loss_discriminator(&mut tape, ri, fi).unwrap();
    let g = losses::adv_loss_generator(&mut tape, fi);
    assert!((tape.item(d) as f64 - want_d).abs() < 1e-6, "d loss {} vs {want_d}", tape.item(d));
    assert!((tape.item(g) as f64 - want_g).abs() < 1e-6, "g loss {} vs {want_g}", tape.item(g));
}

#[test]
fn ssim_matches_sliding_window_oracle_on_random_pairs() {
    let mut rng = Rng::new(0x551);
    for case in 0..10 {
        let c = if case % 2 == 0 { 1 } else { 3 };
        let (h, w) = (32, 32);
        let a = rand_vec(&mut rng, c * h * w, 0.0, 1.0);
        let b: Vec<f32> = a
            .iter()
            .map(|&v| (v + 0.15 * rng.next_normal()).clamp(0.0, 1.0))
            .collect();
        let mut tape = Tape::new();
        let ai = tape.leaf_from(vec![1, c, h, w], a.clone(), false);
        let bi = tape.leaf_from(vec![1, c, h, w], b.clone(), false);
        let s = losses::ssim(&mut tape, ai, bi).unwrap();
        let want = ssim_oracle(&a, &b, 1, c, h, w);
        let got = tape.item(s) as f64;
        assert!(
            (got - want).abs() < 1e-5,
            "case {case}: ssim {got} vs oracle {want}, diff {:.3e}",
            (got - want).abs()
        );
    }
}

#[test]
fn ms_ssim_matches_pyramid_oracle() {
    // Independent pyramid: naive avgpool downsampling, sliding-window
    // statistics per scale, contrast-structure at fine scales, full
    // similarity at the coarsest, weighted geometric mean.
    fn ssim_cs_oracle(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> (f64, f64) {
        const WIN: usize = 11;
        const SIGMA: f64 = 1.5;
        const C1: f64 = 1e-4;
        const C2: f64 = 9e-4;
        let half = (WIN / 2) as f64;
        let taps: Vec<f64> = (0..WIN)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
            .collect();
        let tap_sum: f64 = taps.iter().sum();
        let (oh, ow) = (h - WIN + 1, w - WIN + 1);
        let (mut s_tot, mut cs_tot, mut count) = (0.0f64, 0.0f64, 0usize);
        for p in 0..c {
            let pa = &a[p * h * w..(p + 1) * h * w];
            let pb = &b[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut mu_a, mut mu_b, mut e_aa, mut e_bb, mut e_ab) =
                        (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in 0..WIN {
                        for kx in 0..WIN {
                            let va = pa[(oy + ky) * w + ox + kx] as f64;
                            let vb = pb[(oy + ky) * w + ox + kx] as f64;
                            let wt = taps[ky] * taps[kx] / (tap_sum * tap_sum);
                            mu_a += wt * va;
                            mu_b += wt * vb;
                            e_aa += wt * va * va;
                            e_bb += wt * vb * vb;
                            e_ab += wt * va * vb;
                        }
                    }
                    let lum = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
                    let cs = (2.0 * (e_ab - mu_a * mu_b) + C2)
                        / (e_aa - mu_a * mu_a + e_bb - mu_b * mu_b + C2);
                    s_tot += lum * cs;
                    cs_tot += cs;
                    count += 1;
                }
            }
        }
        (s_tot / count as f64, cs_tot / count as f64)
    }

    let mut rng = Rng::new(0x0551);
    let (c, h, w) = (3, 48, 48);
    let a = rand_vec(&mut rng, c * h * w, 0.0, 1.0);
    let b: Vec<f32> = a
        .iter()
        .map(|&v| (v + 0.1 * rng.next_normal()).clamp(0.0, 1.0))
        .collect();

    let config = lowlight::losses::MsSsimConfig::desk();
    let mut tape = Tape::new();
    let ai = tape.leaf_from(vec![1, c, h, w], a.clone(), false);
    let bi = tape.leaf_from(vec![1, c, h, w], b.clone(), false);
    let m = losses::ms_ssim(&mut tape, ai, bi, &config).unwrap();

    let (mut ca, mut cb, mut ch, mut cw) = (a, b, h, w);
    let mut want = 1.0f64;
    for (j, &weight) in config.weights.iter().enumerate() {
        let (s_mean, cs_mean) = ssim_cs_oracle(&ca, &cb, c, ch, cw);
        let term = if j + 1 == config.scales { s_mean } else { cs_mean };
        want *= term.max(1e-6).powf(weight as f64);
        if j + 1 < config.scales {
            ca = naive_avgpool2(&ca, 1, c, ch, cw);
            cb = naive_avgpool2(&cb, 1, c, ch, cw);
            ch /= 2;
            cw /= 2;
        }
    }
    let got = tape.item(m) as f64;
    assert!(
        (got - want).abs() < 1e-4,
        "ms-ssim {got} vs oracle {want}, diff {:.3e}",
        (got - want).abs()
    );
}
