//! Objective terms: adversarial losses in softplus form, single-scale SSIM
//! with Gaussian-window local statistics, multi-scale SSIM, and the combined
//! reconstruction and generator objectives.
//!
//! Everything here builds graph nodes on a tape, so every term is
//! differentiable end to end. SSIM statistics use valid-region convolution
//! with an 11x11 Gaussian window (sigma 1.5); MS-SSIM takes the mean
//! contrast-structure term at every scale but the coarsest, the full SSIM at
//! the coarsest, raises each to its scale weight and multiplies.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f32 = 1e-4; // (0.01 * data_range)^2
pub const SSIM_C2: f32 = 9e-4; // (0.03 * data_range)^2

/// Positive floor applied before the fractional powers in MS-SSIM.
const POW_FLOOR: f32 = 1e-6;

/// Reference five-scale weights, normalized to sum exactly to 1 (the cited
/// constants 0.0448, 0.2856, 0.3001, 0.2363, 0.1333 sum to 1.0001).
const FIVE_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_1: f32,
    pub lambda_ms: f32,
    pub lambda_total: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_1: 1.0, lambda_ms: 1.0, lambda_total: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_1", self.lambda_1),
            ("lambda_ms", self.lambda_ms),
            ("lambda_total", self.lambda_total),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss weights: {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f32>,
}

impl MsSsimConfig {
    /// Full five-scale configuration.
    pub fn full() -> Self {
        Self::for_scales(5).expect("five scales is always valid")
    }

    /// Desk-scale three-scale configuration for small training patches.
    pub fn desk() -> Self {
        Self::for_scales(3).expect("three scales is always valid")
    }

    /// First `scales` reference weights, renormalized to sum to 1.
    pub fn for_scales(scales: usize) -> Result<Self> {
        if scales < 1 || scales > FIVE_SCALE_WEIGHTS.len() {
            return Err(Error::config(format!(
                "ms-ssim: scales must be in 1..={}, got {scales}",
                FIVE_SCALE_WEIGHTS.len()
            )));
        }
        let sum: f64 = FIVE_SCALE_WEIGHTS[..scales].iter().sum();
        let weights = FIVE_SCALE_WEIGHTS[..scales].iter().map(|w| (w / sum) as f32).collect();
        Ok(MsSsimConfig { scales, weights })
    }

    /// Widest evaluation preset a given spatial size supports (up to 5).
    pub fn eval_preset(h: usize, w: usize) -> Result<Self> {
        let side = h.min(w);
        let mut scales = 0;
        for s in 1..=FIVE_SCALE_WEIGHTS.len() {
            if side >= SSIM_WINDOW << (s - 1) {
                scales = s;
            }
        }
        if scales == 0 {
            return Err(Error::shape(
                "ms-ssim",
                format!("spatial dims >= {SSIM_WINDOW}"),
                format!("{h}x{w}"),
            ));
        }
        Self::for_scales(scales)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 || self.weights.len() != self.scales {
            return Err(Error::config(format!(
                "ms-ssim: {} weights for {} scales",
                self.weights.len(),
                self.scales
            )));
        }
        let sum: f32 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("ms-ssim: weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Smallest spatial extent the scale pyramid supports.
    pub fn min_spatial(&self) -> usize {
        SSIM_WINDOW << (self.scales - 1)
    }
}

/// Discriminator objective: mean softplus(-real) + mean softplus(fake), the
/// stable form of -[log sigma(real) + log(1 - sigma(fake))].
pub fn adv_loss_discriminator(tape: &mut Tape, real_logits: ValueId, fake_logits: ValueId) -> Result<ValueId> {
    if tape.shape(real_logits) != tape.shape(fake_logits) {
        return Err(Error::shape(
            "adversarial loss",
            format!("{:?}", tape.shape(real_logits)),
            format!("{:?}", tape.shape(fake_logits)),
        ));
    }
    let neg_real = tape.scale(real_logits, -1.0);
    let sp_real = tape.softplus(neg_real);
    let m_real = tape.mean(sp_real);
    let sp_fake = tape.softplus(fake_logits);
    let m_fake = tape.mean(sp_fake);
    tape.add(m_real, m_fake)
}

/// Non-saturating generator objective: mean softplus(-fake) = -mean log sigma(fake).
pub fn adv_loss_generator(tape: &mut Tape, fake_logits: ValueId) -> ValueId {
    let neg = tape.scale(fake_logits, -1.0);
    let sp = tape.softplus(neg);
    tape.mean(sp)
}

fn gaussian_window() -> Vec<f32> {
    let half = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    let mut kernel = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &taps {
        for b in &taps {
            kernel.push((a * b / (sum * sum)) as f32);
        }
    }
    kernel
}

struct SsimTerms {
    ssim_mean: ValueId,
    cs_mean: ValueId,
}

/// Local-statistics SSIM over all channels of a and b ([N, C, H, W]).
fn ssim_terms(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<SsimTerms> {
    let shape = tape.shape(a).to_vec();
    if shape != tape.shape(b) {
        return Err(Error::shape("ssim", format!("{shape:?}"), format!("{:?}", tape.shape(b))));
    }
    if shape.len() != 4 {
        return Err(Error::shape("ssim", "rank-4 tensors", format!("rank {}", shape.len())));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("spatial dims >= {SSIM_WINDOW}"),
            format!("{h}x{w}"),
        ));
    }
    // Fold channels into the batch so one grouped blur covers everything.
    let a = tape.reshape(a, vec![n * c, 1, h, w])?;
    let b = tape.reshape(b, vec![n * c, 1, h, w])?;
    let win = tape.leaf_from(vec![1, 1, SSIM_WINDOW, SSIM_WINDOW], gaussian_window(), false);
    let blur = |tape: &mut Tape, x: ValueId| tape.conv2d(x, win, None, 1, 0);

    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur(tape, aa)?;
    let e_bb = blur(tape, bb)?;
    let e_ab = blur(tape, ab)?;

    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    // Luminance ratio (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1).
    let l_num_core = tape.scale(mu_ab, 2.0);
    let l_num = tape.add_const(l_num_core, SSIM_C1);
    let l_den_core = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_const(l_den_core, SSIM_C1);
    let l_map = tape.div(l_num, l_den)?;

    // Contrast-structure ratio (2 cov + C2) / (var_a + var_b + C2).
    let cs_num_core = tape.scale(cov, 2.0);
    let cs_num = tape.add_const(cs_num_core, SSIM_C2);
    let cs_den_core = tape.add(var_a, var_b)?;
    let cs_den = tape.add_const(cs_den_core, SSIM_C2);
    let cs_map = tape.div(cs_num, cs_den)?;

    let ssim_map = tape.mul(l_map, cs_map)?;
    Ok(SsimTerms { ssim_mean: tape.mean(ssim_map), cs_mean: tape.mean(cs_map) })
}

/// Mean SSIM of two [N, C, H, W] tensors; H, W >= 11.
pub fn ssim(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    Ok(ssim_terms(tape, a, b)?.ssim_mean)
}

/// Multi-scale SSIM: contrast-structure means at the finer scales, full SSIM
/// at the coarsest, each raised to its weight, multiplied. Downsampling
/// between scales is 2x2 average pooling.
pub fn ms_ssim(tape: &mut Tape, a: ValueId, b: ValueId, config: &MsSsimConfig) -> Result<ValueId> {
    config.validate()?;
    let shape = tape.shape(a).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("ms-ssim", "rank-4 tensors", format!("rank {}", shape.len())));
    }
    let need = config.min_spatial();
    if shape[2] < need || shape[3] < need {
        return Err(Error::shape(
            "ms-ssim",
            format!("spatial dims >= {need} for {} scales", config.scales),
            format!("{}x{}", shape[2], shape[3]),
        ));
    }
    if config.scales == 1 {
        // Single scale is plain SSIM; skip the clamp/power machinery so the
        // value (sign included) passes through untouched.
        return ssim(tape, a, b);
    }
    let (mut cur_a, mut cur_b) = (a, b);
    let mut product: Option<ValueId> = None;
    for (j, &weight) in config.weights.iter().enumerate() {
        let terms = ssim_terms(tape, cur_a, cur_b)?;
        let term = if j + 1 == config.scales { terms.ssim_mean } else { terms.cs_mean };
        let floored = tape.clamp_min(term, POW_FLOOR);
        let powed = tape.pow_const(floored, weight);
        product = Some(match product {
            None => powed,
            Some(p) => tape.mul(p, powed)?,
        });
        if j + 1 < config.scales {
            cur_a = tape.avgpool2(cur_a)?;
            cur_b = tape.avgpool2(cur_b)?;
        }
    }
    Ok(product.expect("at least one scale"))
}

/// lambda_1 * mean|y - y_hat| + lambda_ms * (1 - ms_ssim(y, y_hat)).
/// The MS-SSIM pyramid is skipped entirely when lambda_ms is 0.
pub fn reconstruction_loss(
    tape: &mut Tape,
    y: ValueId,
    y_hat: ValueId,
    weights: &LossWeights,
    ms: &MsSsimConfig,
) -> Result<ValueId> {
    weights.validate()?;
    if tape.shape(y) != tape.shape(y_hat) {
        return Err(Error::shape(
            "reconstruction loss",
            format!("{:?}", tape.shape(y)),
            format!("{:?}", tape.shape(y_hat)),
        ));
    }
    let l1 = tape.abs_mean_diff(y, y_hat)?;
    let weighted_l1 = tape.scale(l1, weights.lambda_1);
    if weights.lambda_ms == 0.0 {
        return Ok(weighted_l1);
    }
    let ms_val = ms_ssim(tape, y, y_hat, ms)?;
    let neg = tape.scale(ms_val, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let weighted_ms = tape.scale(one_minus, weights.lambda_ms);
    tape.add(weighted_l1, weighted_ms)
}

/// Total generator objective: adv_g + lambda_total * rec.
pub fn total_generator_objective(tape: &mut Tape, adv_g: ValueId, rec: ValueId, weights: &LossWeights) -> Result<ValueId> {
    let scaled = tape.scale(rec, weights.lambda_total);
    tape.add(adv_g, scaled)
}
