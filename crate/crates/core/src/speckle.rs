//! Noise models: additive Gaussian, physical speckle and the empirical
//! signal-dependent model.
//!
//! The physical model multiplies an oversampled reflectivity map with a
//! unit-mean Rayleigh field, convolves with an RF-modulated Gaussian PSF,
//! detects the envelope column by column, log-compresses and block-averages
//! back to the input grid. Rows are the axial direction.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{block_downscale, db_normalize, upsample_bilinear, Image};
use crate::tensor::{conv2d, Padding, Tensor};

/// `y = x + n` with `n ~ N(0, sigma^2)` i.i.d. Not clipped.
pub fn add_gaussian(image: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = image
        .pixels()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            (v as f64 + sigma * n) as f32
        })
        .collect();
    image.with_pixels(pixels)
}

/// Rayleigh scale giving unit mean: `s * sqrt(pi / 2) = 1`.
pub const UNIT_MEAN_RAYLEIGH_SCALE: f64 = 0.797_884_560_802_865_4;

/// I.i.d. unit-mean Rayleigh samples, `[h, w]`.
pub fn rayleigh_field(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w], |_| {
        // 1 - U maps [0, 1) onto (0, 1]
        let u = 1.0 - rng.random::<f64>();
        UNIT_MEAN_RAYLEIGH_SCALE * (-2.0 * u.ln()).sqrt()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfParams {
    pub f0_hz: f64,
    pub c_mps: f64,
    /// Axial (row) Gaussian width, mm.
    pub sigma_rx_mm: f64,
    /// Lateral (column) Gaussian width, mm.
    pub sigma_ry_mm: f64,
    /// Pixel size of the grid the kernel is sampled on, mm.
    pub spacing_mm: f64,
}

impl PsfParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.f0_hz,
            self.c_mps,
            self.sigma_rx_mm,
            self.sigma_ry_mm,
            self.spacing_mm,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("PSF parameters must be positive: {self:?}")))
        }
    }

    pub fn wavelength_mm(&self) -> f64 {
        self.c_mps / self.f0_hz * 1e3
    }

    /// PSF value at offsets given in mm.
    pub fn eval(&self, rx_mm: f64, ry_mm: f64) -> f64 {
        let carrier = (2.0 * std::f64::consts::PI * self.f0_hz * rx_mm * 1e-3 / self.c_mps).sin();
        carrier
            * (-rx_mm * rx_mm / (2.0 * self.sigma_rx_mm * self.sigma_rx_mm)).exp()
            * (-ry_mm * ry_mm / (2.0 * self.sigma_ry_mm * self.sigma_ry_mm)).exp()
    }
}

/// RF-modulated Gaussian PSF sampled on the pixel grid, truncated at ±3σ
/// per axis. Odd extents, centered; axis 0 is axial.
pub fn psf_kernel(params: &PsfParams) -> Result<Tensor<f64>> {
    params.validate()?;
    let half_y = (3.0 * params.sigma_rx_mm / params.spacing_mm).ceil() as usize;
    let half_x = (3.0 * params.sigma_ry_mm / params.spacing_mm).ceil() as usize;
    let (kh, kw) = (2 * half_y + 1, 2 * half_x + 1);
    if params.wavelength_mm() < 2.0 * params.spacing_mm {
        log::warn!(
            "PSF carrier wavelength {:.3} mm is under-sampled at {:.3} mm/pixel",
            params.wavelength_mm(),
            params.spacing_mm
        );
    }
    Ok(Tensor::from_fn(&[kh, kw], |i| {
        let rx = (i / kw) as f64 - half_y as f64;
        let ry = (i % kw) as f64 - half_x as f64;
        params.eval(rx * params.spacing_mm, ry * params.spacing_mm)
    }))
}

struct AnalyticPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    len: usize,
}

impl AnalyticPlan {
    fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        AnalyticPlan {
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            len,
        }
    }

    /// Magnitude of the discrete analytic signal of `column`.
    fn envelope(&self, column: &[f64], out: &mut [f64]) {
        let n = self.len;
        let mut buf: Vec<Complex<f64>> = column.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        // bins 1..ceil(n/2) double, Nyquist (even n) and DC unchanged, rest zeroed
        let positive_end = n.div_ceil(2);
        for (k, b) in buf.iter_mut().enumerate() {
            if k == 0 || (n % 2 == 0 && k == n / 2) {
                continue;
            }
            if k < positive_end {
                *b *= 2.0;
            } else {
                *b = Complex::new(0.0, 0.0);
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.norm() * scale;
        }
    }
}

/// Column-wise (axis 0) envelope of a real `[H, W]` RF field.
pub fn envelope_detect(rf: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = match rf.shape() {
        &[h, w] if h >= 2 => (h, w),
        s => return Err(Error::Shape(format!("envelope needs [H >= 2, W], got {s:?}"))),
    };
    let plan = AnalyticPlan::new(h);
    let mut out = Tensor::zeros(&[h, w]);
    let mut col = vec![0.0; h];
    let mut env = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = rf.data()[r * w + c];
        }
        plan.envelope(&col, &mut env);
        for r in 0..h {
            out.data_mut()[r * w + c] = env[r];
        }
    }
    Ok(out)
}

/// Physical speckle simulation settings. Serializes with the keys used by
/// the CLI JSON config block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeckleConfig {
    pub f0_hz: f64,
    pub c_mps: f64,
    pub sigma_rx_mm: f64,
    pub sigma_ry_mm: f64,
    /// Pixel size of the clean input image, mm.
    pub pixel_spacing_mm: f64,
    pub oversample: usize,
    pub dynamic_range_db: f64,
    pub seed: u64,
}

impl Default for SpeckleConfig {
    fn default() -> Self {
        SpeckleConfig {
            f0_hz: 7e6,
            c_mps: 1540.0,
            sigma_rx_mm: 0.25,
            sigma_ry_mm: 0.3,
            pixel_spacing_mm: 0.1,
            oversample: 2,
            dynamic_range_db: 60.0,
            seed: 0,
        }
    }
}

impl SpeckleConfig {
    /// PSF parameters on the oversampled grid.
    pub fn psf(&self) -> PsfParams {
        PsfParams {
            f0_hz: self.f0_hz,
            c_mps: self.c_mps,
            sigma_rx_mm: self.sigma_rx_mm,
            sigma_ry_mm: self.sigma_ry_mm,
            spacing_mm: self.pixel_spacing_mm / self.oversample.max(1) as f64,
        }
    }
}

/// Full speckle pipeline on a clean reflectivity image in `[0, 1]`.
pub fn simulate_speckle(clean: &Image, config: &SpeckleConfig) -> Result<Image> {
    if config.oversample == 0 {
        return Err(Error::Config("oversample must be >= 1".into()));
    }
    if let Some(v) = clean.pixels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "speckle simulation expects pixels in [0, 1], found {v}"
        )));
    }
    let kernel = psf_kernel(&config.psf())?;
    let up = upsample_bilinear(clean, config.oversample);
    let field = rayleigh_field(up.height(), up.width(), config.seed);
    speckle_from_parts(&up, &field, &kernel, config.dynamic_range_db, config.oversample)
}

/// Speckle pipeline from an already-upsampled image with explicit
/// multiplicative field and PSF.
pub fn speckle_from_parts(
    upsampled: &Image,
    field: &Tensor<f64>,
    kernel: &Tensor<f64>,
    dynamic_range_db: f64,
    oversample: usize,
) -> Result<Image> {
    let (h, w) = (upsampled.height(), upsampled.width());
    if field.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "field {:?} does not match {h}x{w} image",
            field.shape()
        )));
    }
    let scattered = Tensor::new(
        vec![1, 1, h, w],
        upsampled
            .pixels()
            .iter()
            .zip(field.data())
            .map(|(&x, &n)| x as f64 * n)
            .collect(),
    )?;
    let (kh, kw) = match kernel.shape() {
        &[kh, kw] => (kh, kw),
        s => return Err(Error::Shape(format!("PSF kernel must be 2-d, got {s:?}"))),
    };
    // convolution = cross-correlation with the flipped kernel
    let flipped: Vec<f64> = kernel.data().iter().rev().copied().collect();
    let flipped = Tensor::new(vec![1, 1, kh, kw], flipped)?;
    let rf = conv2d(&scattered, &flipped, &Tensor::zeros(&[1]), Padding::Same)?.reshape(&[h, w])?;
    let env = envelope_detect(&rf)?;
    let env_img = upsampled.with_pixels(env.data().iter().map(|&v| v as f32).collect())?;
    let compressed = db_normalize(&env_img, dynamic_range_db)?;
    block_downscale(&compressed, oversample)
}

/// Empirical signal-dependent model `u = v + sqrt(v) * eta`.
pub fn add_empirical_speckle(v: &Image, eta_sigma: f64, seed: u64) -> Result<Image> {
    if !(eta_sigma >= 0.0) {
        return Err(Error::Config(format!("eta sigma must be >= 0, got {eta_sigma}")));
    }
    if let Some(p) = v.pixels().iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::Domain(format!(
            "empirical speckle needs non-negative pixels, found {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = v
        .pixels()
        .iter()
        .map(|&p| {
            let eta: f64 = rng.sample(StandardNormal);
            let p = p as f64;
            (p + p.sqrt() * eta_sigma * eta) as f32
        })
        .collect();
    v.with_pixels(pixels)
}
