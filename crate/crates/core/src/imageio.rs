//! PNG read/write helpers bridging tensors and image files.
//!
//! Ground truth is stored as 16-bit RGB to keep training targets effectively
//! unquantized; display outputs are 8-bit. Values outside [0, 1] are clamped
//! at write time.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use std::path::Path;

fn to_rgb_planes(t: &Tensor) -> Result<(usize, usize, &[f32])> {
    let shape = t.shape();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
        _ => {
            return Err(Error::shape("image write", "[3, H, W] or [1, 3, H, W]", format!("{shape:?}")));
        }
    };
    if c != 3 {
        return Err(Error::shape("image write", "3 channels", format!("{c}")));
    }
    Ok((h, w, t.data()))
}

/// Writes a [1, 3, H, W] or [3, H, W] tensor as 16-bit RGB PNG.
pub fn write_rgb16(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, d) = to_rgb_planes(t)?;
    let plane = h * w;
    let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = Rgb([0, 1, 2].map(|ch| (d[ch * plane + i].clamp(0.0, 1.0) * 65535.0).round() as u16));
    }
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Writes a [1, 3, H, W] or [3, H, W] tensor as 8-bit RGB PNG.
pub fn write_rgb8(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, d) = to_rgb_planes(t)?;
    let plane = h * w;
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = Rgb([0, 1, 2].map(|ch| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Writes a single-channel map as 8-bit grayscale, mapping [0, 1] linearly
/// onto [0, 255].
pub fn write_gray8(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::shape("grayscale write", format!("{h}x{w}"), format!("{} values", data.len())));
    }
    let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        *px = Luma([(data[i].clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Reads an RGB PNG (8- or 16-bit) into a [1, 3, H, W] tensor in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    match img {
        DynamicImage::ImageRgb16(buf) => {
            for (i, px) in buf.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * plane + i] = px.0[ch] as f32 / 65535.0;
                }
            }
        }
        other => {
            let buf = other.to_rgb8();
            for (i, px) in buf.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * plane + i] = px.0[ch] as f32 / 255.0;
                }
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}
