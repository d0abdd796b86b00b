//! Non-local means baseline and full-reference quality metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image_io::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NlmParams {
    /// Filtering strength.
    pub h: f64,
    /// Comparison patch side; even values are rounded up to the next odd.
    pub patch_size: usize,
    /// Search radius.
    pub patch_distance: usize,
}

impl NlmParams {
    /// `h = 0.8 σ`, patch 10 (used as 11), search radius 10.
    pub fn for_sigma(sigma: f64) -> Self {
        NlmParams {
            h: 0.8 * sigma,
            patch_size: 10,
            patch_distance: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || self.patch_size == 0 || self.patch_distance == 0 {
            return Err(Error::Config(format!(
                "NLM parameters must be positive: h={}, patch={}, distance={}",
                self.h, self.patch_size, self.patch_distance
            )));
        }
        Ok(())
    }

    /// Patch side actually used (always odd).
    pub fn effective_patch_size(&self) -> usize {
        self.patch_size | 1
    }
}

/// Non-local means: each pixel becomes the average of the pixels in its
/// search window, weighted by `exp(-d² / h²)` where `d²` is the mean squared
/// difference of the two pixel-centred patches over their valid overlap.
pub fn nlm(image: &Image, params: &NlmParams) -> Result<Image> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let ps = params.effective_patch_size();
    if h < ps || w < ps {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {ps}x{ps} NLM patch")));
    }
    let r = (ps / 2) as isize;
    let dist = params.patch_distance as isize;
    let inv_h2 = 1.0 / (params.h * params.h);
    let px: Vec<f64> = image.pixels().iter().map(|&v| v as f64).collect();
    let (hi, wi) = (h as isize, w as isize);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..hi {
        for x in 0..wi {
            let (mut acc, mut norm) = (0.0, 0.0);
            for qy in (y - dist).max(0)..=(y + dist).min(hi - 1) {
                for qx in (x - dist).max(0)..=(x + dist).min(wi - 1) {
                    // patch offsets keeping both centres' pixels inside the image
                    let oy0 = (-r).max(-y).max(-qy);
                    let oy1 = r.min(hi - 1 - y).min(hi - 1 - qy);
                    let ox0 = (-r).max(-x).max(-qx);
                    let ox1 = r.min(wi - 1 - x).min(wi - 1 - qx);
                    let mut ssd = 0.0;
                    for oy in oy0..=oy1 {
                        let a = ((y + oy) * wi) as usize;
                        let b = ((qy + oy) * wi) as usize;
                        for ox in ox0..=ox1 {
                            let d = px[a + (x + ox) as usize] - px[b + (qx + ox) as usize];
                            ssd += d * d;
                        }
                    }
                    let count = ((oy1 - oy0 + 1) * (ox1 - ox0 + 1)) as f64;
                    let wgt = (-(ssd / count) * inv_h2).exp();
                    acc += wgt * px[(qy * wi + qx) as usize];
                    norm += wgt;
                }
            }
            out.push((acc / norm) as f32);
        }
    }
    image.with_pixels(out)
}

fn check_same(x: &Image, reference: &Image) -> Result<()> {
    if !x.same_size(reference) {
        return Err(Error::Shape(format!(
            "{}x{} image compared with {}x{} reference",
            x.height(),
            x.width(),
            reference.height(),
            reference.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images give `+inf`.
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    check_same(x, reference)?;
    let mse = x
        .pixels()
        .iter()
        .zip(reference.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut win = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            win.push(a * b / total);
        }
    }
    win
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows (σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    check_same(x, reference)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (a, b) = (x.pixels(), reference.pixels());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[i * SSIM_WINDOW + j];
                    let k = (y0 + i) * w + x0 + j;
                    let (u, v) = (a[k] as f64, b[k] as f64);
                    ma += g * u;
                    mb += g * v;
                    saa += g * u * u;
                    sbb += g * v * v;
                    sab += g * u * v;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub sigma: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn measure(image_id: &str, method: &str, sigma: f64, candidate: &Image, clean: &Image) -> Result<Self> {
        Ok(MetricRow {
            image_id: image_id.to_string(),
            method: method.to_string(),
            sigma,
            psnr_db: psnr(candidate, clean, 1.0)?,
            ssim: ssim(candidate, clean)?,
        })
    }
}

pub const METRICS_HEADER: &str = "image_id,method,sigma,psnr_db,ssim";

/// Renders rows as CSV; an infinite PSNR is written as `inf`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.image_id, r.method, r.sigma, r.psnr_db, r.ssim);
    }
    out
}
