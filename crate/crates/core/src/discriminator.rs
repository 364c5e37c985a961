//! Patch discriminator: five 4x4 conv layers (strides 2,2,2,1,1, padding 1)
//! mapping an image to a grid of per-patch validity logits. Each logit sees a
//! 70x70 receptive field. Conditioning concatenates a nearest-neighbour
//! upsampled RGB preview of the packed raw input in front of the candidate
//! image; a switch drops the preview for the unconditional ablation.
//!
//! Parameter registry order: layer{i}.weight, layer{i}.bias for i in 0..5.

use crate::conv::nn_upsample2;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// (kernel, stride) per layer; padding is 1 everywhere.
pub const LAYER_SPEC: [(usize, usize); 5] = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)];
pub const LAYER_PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    /// Concatenate the raw-input preview (3 extra channels) when true.
    pub conditional: bool,
    pub base_channels: usize,
    pub leaky_slope: f32,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig { conditional: true, base_channels: 16, leaky_slope: 0.2 }
    }

    pub fn paper_scale() -> Self {
        DiscriminatorConfig { conditional: true, base_channels: 64, leaky_slope: 0.2 }
    }

    pub fn in_channels(&self) -> usize {
        if self.conditional { 6 } else { 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::config("discriminator: base_channels must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config(format!(
                "discriminator: leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    fn channels(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 1]
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let mut c_in = config.in_channels();
        for (i, c_out) in config.channels().into_iter().enumerate() {
            p.insert_conv(&format!("layer{i}.weight"), vec![c_out, c_in, 4, 4], c_in * 16, rng);
            p.insert_zeros(&format!("layer{i}.bias"), vec![c_out]);
            c_in = c_out;
        }
        Ok(Discriminator { config, params: p })
    }

    pub fn param_count(config: &DiscriminatorConfig) -> usize {
        let mut total = 0;
        let mut c_in = config.in_channels();
        for c_out in config.channels() {
            total += c_out * c_in * 16 + c_out;
            c_in = c_out;
        }
        total
    }

    /// Validity logits [N, 1, N1, N2] for an image [N, C, H, W]; H and W must
    /// cover at least one full receptive field.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: ValueId) -> Result<ValueId> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels() {
            return Err(Error::shape(
                "discriminator input",
                format!("[N, {}, H, W]", self.config.in_channels()),
                format!("{shape:?}"),
            ));
        }
        let rf = receptive_field(&LAYER_SPEC);
        if shape[2] < rf || shape[3] < rf {
            return Err(Error::shape(
                "discriminator input",
                format!("spatial dims >= the {rf}-pixel receptive field"),
                format!("{}x{}", shape[2], shape[3]),
            ));
        }
        let mut h = image;
        for (i, (_, stride)) in LAYER_SPEC.into_iter().enumerate() {
            let w = params.id(&format!("layer{i}.weight"));
            let b = params.id(&format!("layer{i}.bias"));
            h = tape.conv2d(h, w, Some(b), stride, LAYER_PAD)?;
            if i + 1 < LAYER_SPEC.len() {
                h = tape.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }
}

/// Receptive field of one output element for a conv stack, by the standard
/// recurrence r += (k - 1) * jump; jump *= s.
pub fn receptive_field(spec: &[(usize, usize)]) -> usize {
    let mut r = 1;
    let mut jump = 1;
    for &(k, s) in spec {
        r += (k - 1) * jump;
        jump *= s;
    }
    r
}

/// Input pixel span (y0..=y1, x0..=x1) feeding output element (oy, ox) of the
/// default stack, before clipping to the input bounds. Padding 1 per layer.
pub fn receptive_box(spec: &[(usize, usize)], oy: usize, ox: usize) -> (isize, isize, isize, isize) {
    let (mut y0, mut y1) = (oy as isize, oy as isize);
    let (mut x0, mut x1) = (ox as isize, ox as isize);
    for &(k, s) in spec.iter().rev() {
        let (k, s, p) = (k as isize, s as isize, LAYER_PAD as isize);
        y0 = y0 * s - p;
        y1 = y1 * s - p + (k - 1);
        x0 = x0 * s - p;
        x1 = x1 * s - p + (k - 1);
    }
    (y0, y1, x0, x1)
}

/// Spatial output size of the default stack for a given input size.
pub fn output_size(spec: &[(usize, usize)], mut size: usize) -> usize {
    for &(k, s) in spec {
        size = (size + 2 * LAYER_PAD - k) / s + 1;
    }
    size
}

/// RGB preview of a packed raw tensor [N, 4, h, w] at double resolution:
/// per packed pixel (R, (G_r + G_b)/2, B), nearest-neighbour upsampled.
/// Pure tensor function; the preview is a constant input to the
/// discriminator, never differentiated through.
pub fn conditioning_preview(packed: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = packed.dims4()?;
    if c != 4 {
        return Err(Error::shape("conditioning preview", "[N, 4, h, w]", format!("{:?}", packed.shape())));
    }
    let hw = h * w;
    let d = packed.data();
    let mut rgb = vec![0.0f32; n * 3 * hw];
    for ni in 0..n {
        let base = ni * 4 * hw;
        let out = &mut rgb[ni * 3 * hw..(ni + 1) * 3 * hw];
        for i in 0..hw {
            out[i] = d[base + i];
            out[hw + i] = 0.5 * (d[base + hw + i] + d[base + 2 * hw + i]);
            out[2 * hw + i] = d[base + 3 * hw + i];
        }
    }
    let up = nn_upsample2(&rgb, n, 3, h, w);
    Tensor::new(vec![n, 3, 2 * h, 2 * w], up)
}
