//! Attention-gated U-Net generator.
//!
//! Maps a packed amplified raw tensor [N, 4, h, w] to an RGB image
//! [N, 3, 2h, 2w]. The encoder halves resolution per level with max pooling;
//! the decoder upsamples with stride-2 transposed convs, gates each encoder
//! skip with a learned single-channel attention map, concatenates, and
//! refines. The head projects to 12 channels and rearranges depth to space
//! for the final 2x upscale. Output is linear; callers clamp for display.
//!
//! Parameter registry order (the checkpoint layout contract), for levels L:
//!   enc{i}.conv{0,1}.{weight,bias}          for i in 0..L
//!   dec{i}.up.weight                        for i in L-2..=0 (descending)
//!   dec{i}.gate.{w_x,w_g,b_add,psi_w,psi_b}
//!   dec{i}.conv{0,1}.{weight,bias}
//!   head.{weight,bias}
//! Weights draw He-normal values in exactly this order from the build rng.
//! Gate parameters are always created, so checkpoints are interchangeable
//! across the attention ablation switch.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use std::sync::atomic::{AtomicU64, Ordering};

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Total generator forward passes executed by this process.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub leaky_slope: f32,
    pub use_attention: bool,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        GeneratorConfig { levels: 4, base_channels: 16, leaky_slope: 0.2, use_attention: true }
    }

    pub fn paper_scale() -> Self {
        GeneratorConfig { levels: 5, base_channels: 32, leaky_slope: 0.2, use_attention: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!("generator: levels must be >= 2, got {}", self.levels)));
        }
        if self.base_channels < 1 {
            return Err(Error::config("generator: base_channels must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config(format!(
                "generator: leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Spatial granularity the packed input must divide by: 2^(levels-1).
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// How skip connections are gated during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Learned attention maps (the default when attention is enabled).
    Learned,
    /// Skips pass through untouched; maps are reported as constant 1.
    Ungated,
    /// Gate machinery runs but every map is replaced by constant 1.
    ForceOne,
}

pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn build(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let l = config.levels;
        for i in 0..l {
            let c_in = if i == 0 { 4 } else { config.enc_channels(i - 1) };
            let c_out = config.enc_channels(i);
            p.insert_conv(&format!("enc{i}.conv0.weight"), vec![c_out, c_in, 3, 3], c_in * 9, rng);
            p.insert_zeros(&format!("enc{i}.conv0.bias"), vec![c_out]);
            p.insert_conv(&format!("enc{i}.conv1.weight"), vec![c_out, c_out, 3, 3], c_out * 9, rng);
            p.insert_zeros(&format!("enc{i}.conv1.bias"), vec![c_out]);
        }
        for i in (0..l - 1).rev() {
            let c_hi = config.enc_channels(i + 1);
            let c_lo = config.enc_channels(i);
            let c_int = (c_lo / 2).max(1);
            // Transposed conv upsample halves the channel count; fan-in per
            // output site is c_hi because kernel == stride (no overlap).
            p.insert_conv(&format!("dec{i}.up.weight"), vec![c_hi, c_lo, 2, 2], c_hi, rng);
            p.insert_conv(&format!("dec{i}.gate.w_x"), vec![c_int, c_lo, 1, 1], c_lo, rng);
            p.insert_conv(&format!("dec{i}.gate.w_g"), vec![c_int, c_lo, 1, 1], c_lo, rng);
            p.insert_zeros(&format!("dec{i}.gate.b_add"), vec![c_int]);
            p.insert_conv(&format!("dec{i}.gate.psi_w"), vec![1, c_int, 1, 1], c_int, rng);
            p.insert_zeros(&format!("dec{i}.gate.psi_b"), vec![1]);
            p.insert_conv(&format!("dec{i}.conv0.weight"), vec![c_lo, 2 * c_lo, 3, 3], 2 * c_lo * 9, rng);
            p.insert_zeros(&format!("dec{i}.conv0.bias"), vec![c_lo]);
            p.insert_conv(&format!("dec{i}.conv1.weight"), vec![c_lo, c_lo, 3, 3], c_lo * 9, rng);
            p.insert_zeros(&format!("dec{i}.conv1.bias"), vec![c_lo]);
        }
        p.insert_conv("head.weight", vec![12, config.base_channels, 1, 1], config.base_channels, rng);
        p.insert_zeros("head.bias", vec![12]);
        Ok(Generator { config, params: p })
    }

    /// Parameter count implied by the architecture table, without building.
    pub fn param_count(config: &GeneratorConfig) -> usize {
        let l = config.levels;
        let mut total = 0;
        for i in 0..l {
            let c_in = if i == 0 { 4 } else { config.enc_channels(i - 1) };
            let c_out = config.enc_channels(i);
            total += c_out * c_in * 9 + c_out + c_out * c_out * 9 + c_out;
        }
        for i in 0..l - 1 {
            let c_hi = config.enc_channels(i + 1);
            let c_lo = config.enc_channels(i);
            let c_int = (c_lo / 2).max(1);
            total += c_hi * c_lo * 4;
            total += c_int * c_lo + c_int * c_lo + c_int + c_int + 1;
            total += c_lo * 2 * c_lo * 9 + c_lo + c_lo * c_lo * 9 + c_lo;
        }
        total += 12 * config.base_channels + 12;
        total
    }

    fn check_input(&self, tape: &Tape, x: ValueId) -> Result<(usize, usize)> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 4 {
            return Err(Error::shape("generator input", "[N, 4, h, w]", format!("{shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 || h / m == 0 || w / m == 0 {
            return Err(Error::shape(
                "generator input",
                format!("spatial dims a positive multiple of {m}"),
                format!("{h}x{w}"),
            ));
        }
        Ok((h, w))
    }

    /// Runs the network under the configured attention setting.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: ValueId) -> Result<(ValueId, Vec<ValueId>)> {
        let mode = if self.config.use_attention { GateMode::Learned } else { GateMode::Ungated };
        self.forward_with_gates(tape, params, x, mode)
    }

    pub fn forward_with_gates(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: ValueId,
        mode: GateMode,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        self.check_input(tape, x)?;
        FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);
        let slope = self.config.leaky_slope;
        let l = self.config.levels;
        let conv_block = |tape: &mut Tape, input: ValueId, prefix: &str| -> Result<ValueId> {
            let mut h = input;
            for c in 0..2 {
                let w = params.id(&format!("{prefix}.conv{c}.weight"));
                let b = params.id(&format!("{prefix}.conv{c}.bias"));
                h = tape.conv2d(h, w, Some(b), 1, 1)?;
                h = tape.leaky_relu(h, slope);
            }
            Ok(h)
        };

        let mut skips = Vec::with_capacity(l);
        let mut h = x;
        for i in 0..l {
            h = conv_block(tape, h, &format!("enc{i}"))?;
            skips.push(h);
            if i + 1 < l {
                h = tape.maxpool2(h)?;
            }
        }

        let mut maps = Vec::with_capacity(l - 1);
        for i in (0..l - 1).rev() {
            let up_w = params.id(&format!("dec{i}.up.weight"));
            let g = tape.conv_transpose2d(h, up_w, 2)?;
            let skip = skips[i];
            let (gated, map) = match mode {
                GateMode::Learned => self.gate(tape, params, i, skip, g)?,
                GateMode::Ungated => {
                    let shape = tape.shape(skip).to_vec();
                    let ones = tape.leaf_from(
                        vec![shape[0], 1, shape[2], shape[3]],
                        vec![1.0; shape[0] * shape[2] * shape[3]],
                        false,
                    );
                    (skip, ones)
                }
                GateMode::ForceOne => {
                    let shape = tape.shape(skip).to_vec();
                    let ones = tape.leaf_from(
                        vec![shape[0], 1, shape[2], shape[3]],
                        vec![1.0; shape[0] * shape[2] * shape[3]],
                        false,
                    );
                    (tape.gate_mul(skip, ones)?, ones)
                }
            };
            maps.push(map);
            h = tape.concat_channels(gated, g)?;
            h = conv_block(tape, h, &format!("dec{i}"))?;
        }

        let head_w = params.id("head.weight");
        let head_b = params.id("head.bias");
        let out12 = tape.conv2d(h, head_w, Some(head_b), 1, 0)?;
        let y = tape.depth_to_space2(out12)?;
        Ok((y, maps))
    }

    /// Additive attention gate: map = sigmoid(psi(relu(W_x x + W_g g + b)) + b_psi).
    fn gate(
        &self,
        tape: &mut Tape,
        params: &Bound,
        level: usize,
        x_l: ValueId,
        g: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let w_x = params.id(&format!("dec{level}.gate.w_x"));
        let w_g = params.id(&format!("dec{level}.gate.w_g"));
        let b_add = params.id(&format!("dec{level}.gate.b_add"));
        let psi_w = params.id(&format!("dec{level}.gate.psi_w"));
        let psi_b = params.id(&format!("dec{level}.gate.psi_b"));
        attention_gate(tape, x_l, g, &GateParamIds { w_x, w_g, b_add, psi_w, psi_b })
    }
}

/// Tape ids for one attention gate's parameters.
pub struct GateParamIds {
    pub w_x: ValueId,
    pub w_g: ValueId,
    pub b_add: ValueId,
    pub psi_w: ValueId,
    pub psi_b: ValueId,
}

/// Gates skip features x_l with a decoder signal g of identical spatial size:
/// returns (x_l * map, map) with map in (0, 1).
pub fn attention_gate(tape: &mut Tape, x_l: ValueId, g: ValueId, p: &GateParamIds) -> Result<(ValueId, ValueId)> {
    let xs = tape.shape(x_l).to_vec();
    let gs = tape.shape(g).to_vec();
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] || xs[2] != gs[2] || xs[3] != gs[3] {
        return Err(Error::shape(
            "attention_gate",
            format!("spatially aligned inputs, x_l {xs:?}"),
            format!("g {gs:?}"),
        ));
    }
    let proj_x = tape.conv2d(x_l, p.w_x, None, 1, 0)?;
    let proj_g = tape.conv2d(g, p.w_g, Some(p.b_add), 1, 0)?;
    let fused = tape.add(proj_x, proj_g)?;
    let act = tape.relu(fused);
    let logit = tape.conv2d(act, p.psi_w, Some(p.psi_b), 1, 0)?;
    let map = tape.sigmoid(logit);
    let gated = tape.gate_mul(x_l, map)?;
    Ok((gated, map))
}
