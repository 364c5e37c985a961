//! Raw sensor frame handling: RGGB Bayer frames, channel packing,
//! amplification, black-level correction, and the `.llr` frame file format.
//!
//! A Bayer frame stores one normalized intensity per photosite, row-major,
//! with the RGGB phase anchored at (0, 0): R at even/even, G at even/odd and
//! odd/even, B at odd/odd.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const LLR_MAGIC: [u8; 4] = *b"LLR1";

/// Single-channel raw mosaic with even dimensions and values in [0, 1].
#[derive(Debug, Clone)]
pub struct BayerFrame {
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Exposure time of the capture in seconds, if known.
    pub exposure_in: f32,
    /// Exposure time of the paired reference capture, 0.0 when unknown.
    pub exposure_gt: f32,
}

impl BayerFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(Error::shape(
                "bayer frame",
                "positive even dimensions",
                format!("{height}x{width}"),
            ));
        }
        if data.len() != height * width {
            return Err(Error::shape(
                "bayer frame",
                format!("{} samples", height * width),
                format!("{}", data.len()),
            ));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!(
                    "bayer frame: sample {i} is {v}, expected a finite value in [0, 1]"
                )));
            }
        }
        Ok(BayerFrame { height, width, data, exposure_in: 0.0, exposure_gt: 0.0 })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Amplification ratio suggested by the frame metadata, when the
    /// reference exposure is recorded.
    pub fn metadata_ratio(&self) -> Option<f32> {
        if self.exposure_gt > 0.0 && self.exposure_in > 0.0 {
            Some(self.exposure_gt / self.exposure_in)
        } else {
            None
        }
    }

    pub fn write_llr(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4);
        buf.extend_from_slice(&LLR_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&self.exposure_in.to_le_bytes());
        buf.extend_from_slice(&self.exposure_gt.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_llr(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let need = |offset: usize, len: usize| -> Result<&[u8]> {
            bytes.get(offset..offset + len).ok_or_else(|| Error::format(
                path,
                offset as u64,
                format!("truncated: need {len} bytes at offset {offset}, file has {}", bytes.len()),
            ))
        };
        let magic = need(0, 4)?;
        if magic != LLR_MAGIC {
            return Err(Error::format(path, 0, format!("bad magic {magic:02x?}, expected {LLR_MAGIC:02x?}")));
        }
        let h = u32::from_le_bytes(need(4, 4)?.try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(need(8, 4)?.try_into().unwrap()) as usize;
        let exposure_in = f32::from_le_bytes(need(12, 4)?.try_into().unwrap());
        let exposure_gt = f32::from_le_bytes(need(16, 4)?.try_into().unwrap());
        let count = h.checked_mul(w).ok_or_else(|| Error::format(path, 4, "dimension overflow"))?;
        let payload = need(20, count * 4)?;
        if bytes.len() > 20 + count * 4 {
            return Err(Error::format(
                path,
                (20 + count * 4) as u64,
                format!("{} trailing bytes", bytes.len() - 20 - count * 4),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut frame = BayerFrame::new(h, w, data)
            .map_err(|e| Error::format(path, 4, format!("invalid frame: {e}")))?;
        frame.exposure_in = exposure_in;
        frame.exposure_gt = exposure_gt;
        Ok(frame)
    }
}

/// Packs an H x W RGGB mosaic into a [1, 4, H/2, W/2] tensor with channel
/// order (R, G_r, G_b, B): channel c at (i, j) reads the mosaic at
/// (2i + c/2, 2j + c%2).
pub fn pack(frame: &BayerFrame) -> Tensor {
    let (ph, pw) = (frame.height / 2, frame.width / 2);
    let mut data = vec![0.0f32; 4 * ph * pw];
    for c in 0..4 {
        let (dr, dc) = (c / 2, c % 2);
        let plane = &mut data[c * ph * pw..(c + 1) * ph * pw];
        for i in 0..ph {
            for j in 0..pw {
                plane[i * pw + j] = frame.get(2 * i + dr, 2 * j + dc);
            }
        }
    }
    Tensor::new(vec![1, 4, ph, pw], data).expect("packed shape is consistent")
}

/// Inverse of `pack`: restores the mosaic from a [1, 4, H/2, W/2] tensor.
pub fn unpack(packed: &Tensor) -> Result<BayerFrame> {
    let (n, c, ph, pw) = packed.dims4()?;
    if n != 1 || c != 4 {
        return Err(Error::shape("unpack", "[1, 4, h, w]", format!("{:?}", packed.shape())));
    }
    let (h, w) = (2 * ph, 2 * pw);
    let mut data = vec![0.0f32; h * w];
    for ch in 0..4 {
        let (dr, dc) = (ch / 2, ch % 2);
        let plane = &packed.data()[ch * ph * pw..(ch + 1) * ph * pw];
        for i in 0..ph {
            for j in 0..pw {
                data[(2 * i + dr) * w + 2 * j + dc] = plane[i * pw + j];
            }
        }
    }
    BayerFrame::new(h, w, data)
}

/// Scales a packed tensor by the amplification ratio and clips to
/// [0, clip_max]. Ratio must be finite and positive.
pub fn amplify(packed: &Tensor, ratio: f32, clip_max: f32) -> Result<Tensor> {
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(Error::config(format!("amplify: ratio must be finite and positive, got {ratio}")));
    }
    if !clip_max.is_finite() || clip_max <= 0.0 {
        return Err(Error::config(format!("amplify: clip_max must be finite and positive, got {clip_max}")));
    }
    let data = packed.data().iter().map(|&v| (v * ratio).clamp(0.0, clip_max)).collect();
    Tensor::new(packed.shape().to_vec(), data)
}

/// Maps raw integer-scale sensor readings to normalized [0, 1] levels:
/// clamp((v * raw_scale - black) / (white - black), 0, 1) per photosite.
pub fn subtract_black_level(frame: &BayerFrame, black: f32, white: f32, raw_scale: f32) -> Result<BayerFrame> {
    if !(black.is_finite() && white.is_finite() && raw_scale.is_finite()) || white <= black {
        return Err(Error::config(format!(
            "black level correction: need finite levels with white ({white}) > black ({black})"
        )));
    }
    let span = white - black;
    let data = frame
        .data
        .iter()
        .map(|&v| ((v * raw_scale - black) / span).clamp(0.0, 1.0))
        .collect();
    let mut out = BayerFrame::new(frame.height, frame.width, data)?;
    out.exposure_in = frame.exposure_in;
    out.exposure_gt = frame.exposure_gt;
    Ok(out)
}

/// Samples an RGB image (shape [3, H, W], values [0, 1]) onto an RGGB mosaic.
pub fn mosaic_rggb(rgb: &Tensor) -> Result<BayerFrame> {
    let shape = rgb.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("mosaic", "[3, h, w]", format!("{shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("mosaic", "even spatial dims", format!("{h}x{w}")));
    }
    let plane = h * w;
    let d = rgb.data();
    let mut data = vec![0.0f32; plane];
    for i in 0..h {
        for j in 0..w {
            let channel = match (i % 2, j % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            data[i * w + j] = d[channel * plane + i * w + j].clamp(0.0, 1.0);
        }
    }
    BayerFrame::new(h, w, data)
}
