//! Full-reference quality metrics on the BT.601 luma channel.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::codebook::HitRateReport;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::math;
use crate::resample;

/// Reported PSNR for identical images, and the upper bound of every PSNR.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean squared error between the luma planes.
pub fn mse_y(reference: &ImagePatch, test: &ImagePatch) -> Result<f64> {
    reference.expect_same_dims(test, "metric inputs")?;
    let (a, b) = (reference.to_y(), test.to_y());
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` on luma, capped at [`PSNR_CAP_DB`].
pub fn psnr_y(reference: &ImagePatch, test: &ImagePatch) -> Result<f64> {
    let mse = mse_y(reference, test)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * math::log10(1.0 / mse)).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean single-scale SSIM of the luma planes (Gaussian window, valid region).
pub fn ssim_y(reference: &ImagePatch, test: &ImagePatch) -> Result<f64> {
    reference.expect_same_dims(test, "metric inputs")?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(alloc::format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (a, b) = (reference.to_y(), test.to_y());
    let (a, b) = (a.data(), b.data());
    let k = gaussian_window();
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(&|i| a[i] * a[i]), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(&|i| b[i] * b[i]), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(&|i| a[i] * b[i]), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Bicubic upsampling by `scale`.
pub fn bicubic_baseline(lr: &ImagePatch, scale: usize) -> Result<ImagePatch> {
    resample::upscale(lr, scale)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageScore {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimingEntry {
    pub label: String,
    pub seconds: f64,
}

/// Per-image scores with their arithmetic means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<ImageScore>,
    pub hit_rates: Vec<HitRateReport>,
    pub timings: Vec<TimingEntry>,
}

impl MetricReport {
    pub fn push(&mut self, image_id: impl Into<String>, reference: &ImagePatch, test: &ImagePatch) -> Result<()> {
        let psnr_db = psnr_y(reference, test)?;
        let ssim = ssim_y(reference, test)?;
        self.rows.push(ImageScore { image_id: image_id.into(), psnr_db, ssim });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}
