//! Deterministic synthetic paired-dataset generator.
//!
//! Each pair is a clean sRGB scene (the training target) and a simulated
//! short-exposure Bayer capture of it: the scene is sampled onto an RGGB
//! mosaic, divided by the exposure ratio alpha, and corrupted with
//! signal-dependent noise (Gaussian approximation of photon shot noise plus
//! constant read noise). The learning task is therefore joint demosaicing,
//! denoising, and amplification.
//!
//! Scenes are procedural: mid-gray base plus linear gradients, smooth
//! compactly-supported blobs, high-frequency triangle-wave bands (so
//! over-smoothing shows up in scores), and hard step edges. Generation uses
//! only arithmetic with exactly-specified IEEE semantics (no transcendental
//! calls), so a spec reproduces bit-identical output anywhere.

use crate::error::{Error, Result};
use crate::imageio;
use crate::rawproc::{self, BayerFrame};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Reference long-exposure time in seconds stored in generated frames; the
/// short-exposure time is this divided by alpha, so metadata recovers alpha.
pub const REFERENCE_EXPOSURE: f32 = 10.0;

/// Default sampling range for the exposure ratio alpha.
pub const ALPHA_RANGE: (f32, f32) = (100.0, 300.0);

/// Procedural scene description. All content amplitudes are maxima; the
/// actual per-channel amplitude of each element is drawn from [-amp, amp].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Count and max amplitude of linear gradient fields.
    pub gradients: usize,
    pub gradient_amp: f32,
    /// Count and max amplitude of smooth radial blobs.
    pub blobs: usize,
    pub blob_amp: f32,
    /// Count and max amplitude of high-frequency triangle-wave bands.
    pub bands: usize,
    pub band_amp: f32,
    /// Count and max amplitude of hard step edges.
    pub edges: usize,
    pub edge_amp: f32,
}

impl SceneSpec {
    /// Default content mix: moderate amplitudes chosen so that clipping at
    /// [0, 1] stays rare, with two guaranteed high-frequency bands.
    pub fn default_for(seed: u64, height: usize, width: usize) -> Self {
        SceneSpec {
            seed,
            height,
            width,
            gradients: 2,
            gradient_amp: 0.2,
            blobs: 4,
            blob_amp: 0.25,
            bands: 2,
            band_amp: 0.12,
            edges: 2,
            edge_amp: 0.15,
        }
    }

    /// A spec with every amplitude zero: generates constant mid-gray.
    pub fn flat(seed: u64, height: usize, width: usize) -> Self {
        SceneSpec {
            seed,
            height,
            width,
            gradients: 0,
            gradient_amp: 0.0,
            blobs: 0,
            blob_amp: 0.0,
            bands: 0,
            band_amp: 0.0,
            edges: 0,
            edge_amp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::shape(
                "scene spec",
                "positive even dimensions",
                format!("{}x{}", self.height, self.width),
            ));
        }
        for (name, amp) in [
            ("gradient_amp", self.gradient_amp),
            ("blob_amp", self.blob_amp),
            ("band_amp", self.band_amp),
            ("edge_amp", self.edge_amp),
        ] {
            if !amp.is_finite() || amp < 0.0 {
                return Err(Error::config(format!("scene spec: {name} is {amp}, expected finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Low-light degradation description: divide by alpha, add heteroscedastic
/// noise with variance `shot_noise_scale * signal + read_noise_sigma^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradeSpec {
    pub alpha: f32,
    pub read_noise_sigma: f32,
    pub shot_noise_scale: f32,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 1.0 {
            return Err(Error::config(format!(
                "degrade spec: alpha is {}, expected finite and > 1",
                self.alpha
            )));
        }
        for (name, v) in [
            ("read_noise_sigma", self.read_noise_sigma),
            ("shot_noise_scale", self.shot_noise_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("degrade spec: {name} is {v}, expected finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Named noise strengths for the degradation model. Sigma values are in the
/// post-division (short-exposure) domain, where signal sits near 1/alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisePreset {
    None,
    Low,
    Default,
    High,
}

impl NoisePreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoisePreset::None),
            "low" => Ok(NoisePreset::Low),
            "default" => Ok(NoisePreset::Default),
            "high" => Ok(NoisePreset::High),
            other => Err(Error::config(format!(
                "unknown noise preset {other:?}, expected none|low|default|high"
            ))),
        }
    }

    /// (read_noise_sigma, shot_noise_scale).
    pub fn sigmas(self) -> (f32, f32) {
        match self {
            NoisePreset::None => (0.0, 0.0),
            NoisePreset::Low => (1e-4, 1e-5),
            NoisePreset::Default => (3e-4, 3e-5),
            NoisePreset::High => (1e-3, 1e-4),
        }
    }
}

/// Generates the clean scene for `spec` as a [1, 3, H, W] tensor in [0, 1].
/// Bit-identical for identical specs.
pub fn generate_scene(spec: &SceneSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0.5f32; 3 * plane];
    let mut rng = Rng::new(spec.seed);
    // Normalized pixel coordinates in [0, 1] along each axis.
    let sx = 1.0 / (w.max(2) - 1) as f32;
    let sy = 1.0 / (h.max(2) - 1) as f32;

    for _ in 0..spec.gradients {
        let dx = rng.next_range(-1.0, 1.0);
        let dy = rng.next_range(-1.0, 1.0);
        let amps = [0; 3].map(|_| rng.next_range(-spec.gradient_amp, spec.gradient_amp));
        for (c, &amp) in amps.iter().enumerate() {
            let base = c * plane;
            for y in 0..h {
                let v = y as f32 * sy - 0.5;
                for x in 0..w {
                    let u = x as f32 * sx - 0.5;
                    data[base + y * w + x] += amp * (dx * u + dy * v);
                }
            }
        }
    }

    for _ in 0..spec.blobs {
        let cx = rng.next_f32();
        let cy = rng.next_f32();
        let r = rng.next_range(0.1, 0.35);
        let amps = [0; 3].map(|_| rng.next_range(-spec.blob_amp, spec.blob_amp));
        let inv_r2 = 1.0 / (r * r);
        for (c, &amp) in amps.iter().enumerate() {
            let base = c * plane;
            for y in 0..h {
                let dv = y as f32 * sy - cy;
                for x in 0..w {
                    let du = x as f32 * sx - cx;
                    let q = 1.0 - (du * du + dv * dv) * inv_r2;
                    if q > 0.0 {
                        // Quartic bump: smooth, compact support, no exp().
                        data[base + y * w + x] += amp * q * q;
                    }
                }
            }
        }
    }

    for _ in 0..spec.bands {
        // Cycles per pixel in [0.15, 0.45]: wavelengths of roughly 2-7 px.
        let freq = rng.next_range(0.15, 0.45);
        let orient = rng.next_below(3);
        let phase = rng.next_f32();
        let amps = [0; 3].map(|_| rng.next_range(-spec.band_amp, spec.band_amp));
        for (c, &amp) in amps.iter().enumerate() {
            let base = c * plane;
            for y in 0..h {
                for x in 0..w {
                    let t = match orient {
                        0 => freq * x as f32,
                        1 => freq * y as f32,
                        _ => freq * 0.7071 * (x as f32 + y as f32),
                    } + phase;
                    let frac = t - t.floor();
                    let tri = 2.0 * (2.0 * frac - 1.0).abs() - 1.0;
                    data[base + y * w + x] += amp * tri;
                }
            }
        }
    }

    for _ in 0..spec.edges {
        let orient = rng.next_below(3);
        let thresh = rng.next_range(0.25, 0.75);
        let amps = [0; 3].map(|_| rng.next_range(-spec.edge_amp, spec.edge_amp));
        for (c, &amp) in amps.iter().enumerate() {
            let base = c * plane;
            for y in 0..h {
                let v = y as f32 * sy;
                for x in 0..w {
                    let u = x as f32 * sx;
                    let proj = match orient {
                        0 => u,
                        1 => v,
                        _ => 0.5 * (u + v),
                    };
                    let s = if proj >= thresh { 0.5 } else { -0.5 };
                    data[base + y * w + x] += amp * s;
                }
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, 3, h, w], data)
}

fn as_chw(rgb: &Tensor) -> Result<Tensor> {
    let shape = rgb.shape();
    match shape.len() {
        3 if shape[0] == 3 => Ok(rgb.clone()),
        4 if shape[0] == 1 && shape[1] == 3 => rgb.reshaped(vec![3, shape[2], shape[3]]),
        _ => Err(Error::shape("degrade input", "[3, H, W] or [1, 3, H, W]", format!("{shape:?}"))),
    }
}

/// Simulates a short-exposure capture of `clean_rgb`: RGGB mosaic, division
/// by alpha, then noise with per-pixel sigma `sqrt(shot * signal + read^2)`,
/// clamped to [0, 1]. Exposure metadata encodes alpha.
pub fn degrade_lowlight(clean_rgb: &Tensor, spec: &DegradeSpec) -> Result<BayerFrame> {
    spec.validate()?;
    let chw = as_chw(clean_rgb)?;
    let mosaic = rawproc::mosaic_rggb(&chw)?;
    let (h, w) = (mosaic.height(), mosaic.width());
    let noiseless = spec.read_noise_sigma == 0.0 && spec.shot_noise_scale == 0.0;
    let mut rng = Rng::new(spec.seed);
    let mut data = Vec::with_capacity(h * w);
    for &m in mosaic.data() {
        let base = m / spec.alpha;
        let v = if noiseless {
            base
        } else {
            let sigma = (spec.shot_noise_scale * base + spec.read_noise_sigma * spec.read_noise_sigma).sqrt();
            base + sigma * rng.next_normal()
        };
        data.push(v.clamp(0.0, 1.0));
    }
    let mut frame = BayerFrame::new(h, w, data)?;
    frame.exposure_gt = REFERENCE_EXPOSURE;
    frame.exposure_in = REFERENCE_EXPOSURE / spec.alpha;
    Ok(frame)
}

/// One dataset entry: paths as written in the manifest plus alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub raw: PathBuf,
    pub gt: PathBuf,
    pub alpha: f32,
}

/// Generates one pair under `out_dir`: `<stem>.llr` (short-exposure raw) and
/// `<stem>.png` (16-bit clean target). Returns the record with paths
/// relative to `out_dir`.
pub fn make_pair(
    scene_spec: &SceneSpec,
    degrade_spec: &DegradeSpec,
    out_dir: &Path,
    stem: &str,
) -> Result<ManifestRecord> {
    let clean = generate_scene(scene_spec)?;
    let raw = degrade_lowlight(&clean, degrade_spec)?;
    let raw_rel = PathBuf::from(format!("{stem}.llr"));
    let gt_rel = PathBuf::from(format!("{stem}.png"));
    raw.write_llr(&out_dir.join(&raw_rel))?;
    imageio::write_rgb16(&out_dir.join(&gt_rel), &clean)?;
    Ok(ManifestRecord { raw: raw_rel, gt: gt_rel, alpha: degrade_spec.alpha })
}

/// Writes records as `raw<TAB>gt<TAB>alpha` lines with a version comment.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::from("# lowlight pairs v1\n");
    for r in records {
        writeln!(text, "{}\t{}\t{}", r.raw.display(), r.gt.display(), r.alpha).unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest, resolving relative paths against the manifest's
/// directory and checking that every referenced file exists and alpha > 0.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::config(format!(
                "manifest {}: line {lineno}: expected 3 tab-separated fields, found {}",
                path.display(),
                fields.len()
            )));
        }
        let alpha: f32 = fields[2].parse().map_err(|_| {
            Error::config(format!(
                "manifest {}: line {lineno}: alpha {:?} is not a number",
                path.display(),
                fields[2]
            ))
        })?;
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::config(format!(
                "manifest {}: line {lineno}: alpha must be finite and > 0, got {alpha}",
                path.display()
            )));
        }
        let resolve = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() { p } else { dir.join(p) }
        };
        let record = ManifestRecord { raw: resolve(fields[0]), gt: resolve(fields[1]), alpha };
        for file in [&record.raw, &record.gt] {
            if !file.is_file() {
                return Err(Error::config(format!(
                    "manifest {}: line {lineno}: referenced file {} does not exist",
                    path.display(),
                    file.display()
                )));
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// A pair loaded into memory, ready for patch sampling.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    /// Packed and amplified short-exposure input, [1, 4, H/2, W/2].
    pub input: Tensor,
    /// Clean target, [1, 3, H, W].
    pub gt: Tensor,
    pub alpha: f32,
}

/// Loads a record from disk, packs and amplifies the raw frame using the
/// record's alpha, and checks that the target matches the frame size.
pub fn load_pair(record: &ManifestRecord) -> Result<LoadedPair> {
    let frame = BayerFrame::read_llr(&record.raw)?;
    let gt = imageio::read_rgb(&record.gt)?;
    let (h, w) = (frame.height(), frame.width());
    if gt.shape() != [1, 3, h, w] {
        return Err(Error::shape(
            "pair target",
            format!("[1, 3, {h}, {w}] to match the raw frame"),
            format!("{:?} ({})", gt.shape(), record.gt.display()),
        ));
    }
    let input = rawproc::amplify(&rawproc::pack(&frame), record.alpha, 1.0)?;
    Ok(LoadedPair { input, gt, alpha: record.alpha })
}

/// Crops `[1, C, H, W]` to `[1, C, ph, pw]` starting at (y0, x0).
pub fn crop_nchw(t: &Tensor, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(Error::shape("crop", "batch of 1", format!("{n}")));
    }
    if y0 + ph > h || x0 + pw > w {
        return Err(Error::shape(
            "crop",
            format!("window within {h}x{w}"),
            format!("{ph}x{pw} at ({y0}, {x0})"),
        ));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let row = (ch * h + y0 + y) * w + x0;
            out.extend_from_slice(&d[row..row + pw]);
        }
    }
    Tensor::new(vec![1, c, ph, pw], out)
}

/// Samples an aligned training patch: the raw window's top-left corner is
/// even in both axes (preserving RGGB phase), `x` is the packed amplified
/// input crop [1, 4, p/2, p/2], `y` the matching target crop [1, 3, p, p].
pub fn sample_patch(pair: &LoadedPair, patch: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let (_, _, gh, gw) = pair.gt.dims4()?;
    if patch == 0 || patch % 2 != 0 {
        return Err(Error::config(format!("patch size must be even and nonzero, got {patch}")));
    }
    if patch > gh || patch > gw {
        return Err(Error::config(format!("patch {patch} does not fit in {gh}x{gw} frame")));
    }
    // Even-aligned top-left: draw in half-resolution units, scale by 2.
    let y0 = 2 * rng.next_below((gh - patch) / 2 + 1);
    let x0 = 2 * rng.next_below((gw - patch) / 2 + 1);
    let x = crop_nchw(&pair.input, y0 / 2, x0 / 2, patch / 2, patch / 2)?;
    let y = crop_nchw(&pair.gt, y0, x0, patch, patch)?;
    Ok((x, y))
}
