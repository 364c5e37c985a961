//! Full-reference quality metrics: PSNR, SSIM, MS-SSIM, and batch pair
//! evaluation with CSV and text reporting.
//!
//! PSNR accumulates the squared error in 64-bit; identical images yield the
//! +infinity sentinel, serialized as `inf`. SSIM and MS-SSIM reuse the loss
//! implementations on a throwaway graph so metric and loss can never drift
//! apart.

use crate::error::{Error, Result};
use crate::losses::{self, MsSsimConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrMode {
    /// Single MSE over all channels jointly.
    Rgb,
    /// MSE over the Rec. 709 luma projection only.
    Luma709,
}

/// 10 * log10(peak^2 / mse); +infinity when mse is 0.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn mse(a: &Tensor, b: &Tensor, mode: PsnrMode) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    match mode {
        PsnrMode::Rgb => {
            let mut acc = 0.0f64;
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let d = x as f64 - y as f64;
                acc += d * d;
            }
            Ok(acc / a.numel() as f64)
        }
        PsnrMode::Luma709 => {
            let (n, c, h, w) = a.dims4()?;
            if c != 3 {
                return Err(Error::shape("luma psnr", "[N, 3, H, W]", format!("{:?}", a.shape())));
            }
            let plane = h * w;
            let (da, db) = (a.data(), b.data());
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = ni * 3 * plane;
                for i in 0..plane {
                    let luma = |d: &[f32]| {
                        0.2126 * d[base + i] as f64
                            + 0.7152 * d[base + plane + i] as f64
                            + 0.0722 * d[base + 2 * plane + i] as f64
                    };
                    let diff = luma(da) - luma(db);
                    acc += diff * diff;
                }
            }
            Ok(acc / (n * plane) as f64)
        }
    }
}

/// Peak signal-to-noise ratio in dB.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64, mode: PsnrMode) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::config(format!("psnr: peak must be > 0, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b, mode)?, peak))
}

/// Mean SSIM via the loss-module code path.
pub fn ssim_metric(a: &Tensor, b: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let ia = tape.leaf_from(a.shape().to_vec(), a.data().to_vec(), false);
    let ib = tape.leaf_from(b.shape().to_vec(), b.data().to_vec(), false);
    let s = losses::ssim(&mut tape, ia, ib)?;
    Ok(tape.item(s))
}

/// MS-SSIM at the widest scale preset the image size supports (up to 5).
pub fn ms_ssim_metric(a: &Tensor, b: &Tensor) -> Result<f32> {
    let shape = a.shape();
    if shape.len() != 4 {
        return Err(Error::shape("ms-ssim metric", "rank-4 tensors", format!("{shape:?}")));
    }
    let config = MsSsimConfig::eval_preset(shape[2], shape[3])?;
    ms_ssim_metric_with(a, b, &config)
}

pub fn ms_ssim_metric_with(a: &Tensor, b: &Tensor, config: &MsSsimConfig) -> Result<f32> {
    let mut tape = Tape::new();
    let ia = tape.leaf_from(a.shape().to_vec(), a.data().to_vec(), false);
    let ib = tape.leaf_from(b.shape().to_vec(), b.data().to_vec(), false);
    let m = losses::ms_ssim(&mut tape, ia, ib, config)?;
    Ok(tape.item(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f32,
    pub ms_ssim: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// (pair name, error description) for pairs that could not be scored.
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scores one prediction/ground-truth pair; failures are recorded and do
    /// not abort the run.
    pub fn push_pair(&mut self, name: &str, pred: &Tensor, gt: &Tensor, mode: PsnrMode) {
        let result = (|| -> Result<EvalRow> {
            Ok(EvalRow {
                name: name.to_string(),
                psnr_db: psnr(pred, gt, 1.0, mode)?,
                ssim: ssim_metric(pred, gt)?,
                ms_ssim: ms_ssim_metric(pred, gt)?,
            })
        })();
        match result {
            Ok(row) => self.rows.push(row),
            Err(e) => self.failures.push((name.to_string(), e.to_string())),
        }
    }

    pub fn push_failure(&mut self, name: &str, detail: impl Into<String>) {
        self.failures.push((name.to_string(), detail.into()));
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim as f64).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ms_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ms_ssim as f64).sum::<f64>() / self.rows.len().max(1) as f64
    }

    fn fmt_db(v: f64) -> String {
        if v.is_infinite() {
            "inf".to_string()
        } else {
            format!("{v:.6}")
        }
    }

    /// Machine-readable CSV: `image,psnr_db,ssim,ms_ssim`, 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim,ms_ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.name,
                Self::fmt_db(r.psnr_db),
                r.ssim,
                r.ms_ssim
            ));
        }
        out
    }

    /// Human-readable table with a mean summary line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>12} {:>10} {:>10}\n", "image", "psnr_db", "ssim", "ms_ssim"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>12} {:>10.6} {:>10.6}\n",
                r.name,
                Self::fmt_db(r.psnr_db),
                r.ssim,
                r.ms_ssim
            ));
        }
        out.push_str(&format!(
            "mean over {} image(s): psnr {} ssim {:.6} ms_ssim {:.6}\n",
            self.rows.len(),
            Self::fmt_db(self.mean_psnr()),
            self.mean_ssim(),
            self.mean_ms_ssim()
        ));
        for (name, detail) in &self.failures {
            out.push_str(&format!("FAILED {name}: {detail}\n"));
        }
        out
    }
}
