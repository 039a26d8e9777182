//! Image quality metrics: dynamic-range PSNR and SSIM.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

/// Returned by [`psnr`] when the two images are identical.
pub const PSNR_CAP_DB: f64 = 300.0;

/// Full-scale reference results (LoDoPaB test set) for comparison in reports.
pub const REFERENCE_FBP_PSNR_DB: f64 = 24.37;
pub const REFERENCE_DEEP_GLR_PSNR_DB: f64 = 30.70;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("reference image is constant; dynamic range is zero")]
    ZeroRange,
    #[error("images of {0}x{1} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
}

fn check_shapes(x: &Image, reference: &Image) -> Result<(), MetricError> {
    let a = (x.height(), x.width());
    let b = (reference.height(), reference.width());
    if a != b {
        return Err(MetricError::Shape(a, b));
    }
    Ok(())
}

pub fn mse(x: &Image, reference: &Image) -> Result<f64, MetricError> {
    check_shapes(x, reference)?;
    let n = x.data().len() as f64;
    Ok(x.data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// PSNR in dB with the peak taken as the reference image's `max - min`.
pub fn psnr(x: &Image, reference: &Image) -> Result<f64, MetricError> {
    let err = mse(x, reference)?;
    let range = reference.max() - reference.min();
    if range <= 0.0 {
        return Err(MetricError::ZeroRange);
    }
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / err).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering: output is `(h - 10) x (w - 10)`.
fn blur_valid(data: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..k).map(|i| g[i] * data[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11x11 Gaussian window (sigma 1.5).
///
/// Stabilizers use the reference image's dynamic range, falling back to 1
/// when the reference is constant.
pub fn ssim(x: &Image, reference: &Image) -> Result<f64, MetricError> {
    check_shapes(x, reference)?;
    let range = reference.max() - reference.min();
    ssim_with_range(x, reference, if range > 0.0 { range } else { 1.0 })
}

/// SSIM with an explicit dynamic range for the stabilizers.
pub fn ssim_with_range(x: &Image, reference: &Image, range: f64) -> Result<f64, MetricError> {
    check_shapes(x, reference)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h, w));
    }
    let g = gaussian_window();
    let a = x.data();
    let b = reference.data();
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mu_a = blur_valid(a, h, w, &g);
    let mu_b = blur_valid(b, h, w, &g);
    let aa = blur_valid(&prod(&|i| a[i] * a[i]), h, w, &g);
    let bb = blur_valid(&prod(&|i| b[i] * b[i]), h, w, &g);
    let ab = blur_valid(&prod(&|i| a[i] * b[i]), h, w, &g);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Per-sample metrics for one reconstruction method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl SampleMetrics {
    pub fn compute(sample_id: usize, x: &Image, reference: &Image) -> Result<Self, MetricError> {
        Ok(Self {
            sample_id,
            psnr_db: psnr(x, reference)?,
            ssim: ssim(x, reference)?,
            mse: mse(x, reference)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation; zeros for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub samples: Vec<SampleMetrics>,
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub mse: Summary,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, samples: Vec<SampleMetrics>) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<_>>();
        Self {
            method: method.into(),
            psnr_db: Summary::of(&col(|s| s.psnr_db)),
            ssim: Summary::of(&col(|s| s.ssim)),
            mse: Summary::of(&col(|s| s.mse)),
            samples,
        }
    }

    /// One row in the style of a comparison table: `method | PSNR | SSIM`.
    pub fn table_row(&self) -> String {
        format!(
            "{:<10} {:>7.2} ± {:<5.2} dB   SSIM {:.4} ± {:.4}",
            self.method, self.psnr_db.mean, self.psnr_db.std, self.ssim.mean, self.ssim.std
        )
    }

    /// CSV with header `sample_id,psnr,ssim,mse`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample_id,psnr,ssim,mse")?;
        for s in &self.samples {
            writeln!(w, "{},{},{},{}", s.sample_id, s.psnr_db, s.ssim, s.mse)?;
        }
        Ok(())
    }
}
