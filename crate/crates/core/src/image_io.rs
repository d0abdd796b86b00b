//! Grayscale image container, PGM/F32R codecs and display preprocessing.
//!
//! Two on-disk formats are supported:
//!
//! * PGM `P5` with maxval 255 (8-bit) or 65535 (16-bit big-endian samples),
//!   mapped to `[0, 1]` by dividing by maxval.
//! * F32R: `b"F32R"`, `u32` LE height, `u32` LE width, then `height * width`
//!   little-endian `f32` values in row-major order. Lossless.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    /// Physical pixel size along rows (axial), in mm.
    pub spacing_y: Option<f64>,
    /// Physical pixel size along columns (lateral), in mm.
    pub spacing_x: Option<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
            spacing_y: None,
            spacing_x: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
            spacing_y: None,
            spacing_x: None,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Image {
            height,
            width,
            pixels,
            spacing_y: None,
            spacing_x: None,
        }
    }

    pub fn with_spacing(mut self, spacing_y: f64, spacing_x: f64) -> Result<Self> {
        if !(spacing_y > 0.0 && spacing_x > 0.0) {
            return Err(Error::Domain(format!(
                "pixel spacing must be positive, got ({spacing_y}, {spacing_x})"
            )));
        }
        self.spacing_y = Some(spacing_y);
        self.spacing_x = Some(spacing_x);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    /// Copy of this image with replaced pixels, keeping spacing metadata.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Result<Self> {
        let mut out = Image::new(self.height, self.width, pixels)?;
        out.spacing_y = self.spacing_y;
        out.spacing_x = self.spacing_x;
        Ok(out)
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Auto,
    Pgm,
    F32r,
}

impl ImageFormat {
    /// Picks a format from a file extension (`.pgm` or anything else → F32R).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pgm") => ImageFormat::Pgm,
            _ => ImageFormat::F32r,
        }
    }
}

const F32R_MAGIC: &[u8; 4] = b"F32R";

pub fn load_image(path: impl AsRef<Path>, format: ImageFormat) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, format)
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    let format = match format {
        ImageFormat::Auto if bytes.starts_with(F32R_MAGIC) => ImageFormat::F32r,
        ImageFormat::Auto if bytes.starts_with(b"P5") => ImageFormat::Pgm,
        ImageFormat::Auto => return Err(Error::parse(0, "unrecognized image magic")),
        f => f,
    };
    match format {
        ImageFormat::F32r => decode_f32r(bytes),
        _ => decode_pgm(bytes),
    }
}

pub fn save_image(image: &Image, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let format = match format {
        ImageFormat::Auto => ImageFormat::from_path(path),
        f => f,
    };
    let bytes = match format {
        ImageFormat::Pgm => encode_pgm(image, 255)?,
        _ => encode_f32r(image),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_f32r(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * image.pixels.len());
    out.extend_from_slice(F32R_MAGIC);
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    for v in &image.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_f32r(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 12 || &bytes[..4] != F32R_MAGIC {
        return Err(Error::parse(0, "missing F32R header"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + 4 * height * width;
    if bytes.len() != need {
        return Err(Error::parse(
            bytes.len().min(need),
            format!(
                "F32R payload for {height}x{width} needs {need} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let pixels = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(height, width, pixels)
}

/// Encodes as binary PGM. Pixels are clamped to `[0, 1]` and quantized with
/// round-half-to-even.
pub fn encode_pgm(image: &Image, maxval: u16) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Config(format!("unsupported PGM maxval {maxval}")));
    }
    if let Some(v) = image.pixels.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("cannot encode non-finite pixel {v}")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).into_bytes();
    let scale = maxval as f64;
    for &v in &image.pixels {
        let q = ((v as f64).clamp(0.0, 1.0) * scale).round_ties_even() as u16;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} out of range")))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::parse(0, "missing P5 magic"));
    }
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    rd.skip_space_and_comments();
    let maxval_at = rd.pos;
    let maxval = rd.number("maxval")?;
    if maxval != 255 && maxval != 65535 {
        return Err(Error::parse(
            maxval_at,
            format!("unsupported maxval {maxval} (expected 255 or 65535)"),
        ));
    }
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => return Err(Error::parse(rd.pos, "expected whitespace after maxval")),
    }
    let sample = if maxval == 255 { 1 } else { 2 };
    let payload = &bytes[rd.pos..];
    let need = width * height * sample;
    if payload.len() < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    let scale = maxval as f32;
    let pixels = if sample == 1 {
        payload[..need].iter().map(|&b| b as f32 / scale).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / scale)
            .collect()
    };
    Image::new(height, width, pixels)
}

/// Bilinear sample at fractional source coordinates, clamped to the image.
fn bilinear(image: &Image, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (image.height - 1) as f64);
    let x = x.clamp(0.0, (image.width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(image.height - 1);
    let x1 = (x0 + 1).min(image.width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p = |r, c| image.get(r, c) as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resamples onto a square grid of `target_spacing_mm`. Grid points start at
/// the first pixel center and run to the last one, so the physical field of
/// view spanned by pixel centers is preserved.
pub fn resample_to_square(image: &Image, target_spacing_mm: f64) -> Result<Image> {
    let (Some(sy), Some(sx)) = (image.spacing_y, image.spacing_x) else {
        return Err(Error::Config(
            "resampling needs pixel spacing metadata".into(),
        ));
    };
    if !(target_spacing_mm > 0.0) {
        return Err(Error::Config(format!(
            "target spacing must be positive, got {target_spacing_mm}"
        )));
    }
    let extent = |n: usize, s: f64| ((n - 1) as f64 * s / target_spacing_mm + 1e-9).floor() as usize + 1;
    let h = extent(image.height, sy);
    let w = extent(image.width, sx);
    let ry = target_spacing_mm / sy;
    let rx = target_spacing_mm / sx;
    let out = Image::from_fn(h, w, |r, c| bilinear(image, r as f64 * ry, c as f64 * rx) as f32);
    out.with_spacing(target_spacing_mm, target_spacing_mm)
}

/// Upsamples by an integer factor with pixel-center alignment, so that
/// `factor x factor` blocks of the output map back onto single input pixels.
pub fn upsample_bilinear(image: &Image, factor: usize) -> Image {
    if factor == 1 {
        return image.clone();
    }
    let f = factor as f64;
    let mut out = Image::from_fn(image.height * factor, image.width * factor, |r, c| {
        let y = (r as f64 + 0.5) / f - 0.5;
        let x = (c as f64 + 0.5) / f - 0.5;
        bilinear(image, y, x) as f32
    });
    out.spacing_y = image.spacing_y.map(|s| s / f);
    out.spacing_x = image.spacing_x.map(|s| s / f);
    out
}

/// Averages non-overlapping `factor x factor` blocks.
pub fn block_downscale(image: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || image.height % factor != 0 || image.width % factor != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {factor}x{factor} blocks",
            image.height, image.width
        )));
    }
    let norm = (factor * factor) as f64;
    let mut out = Image::from_fn(image.height / factor, image.width / factor, |r, c| {
        let mut acc = 0.0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += image.get(r * factor + dy, c * factor + dx) as f64;
            }
        }
        (acc / norm) as f32
    });
    out.spacing_y = image.spacing_y.map(|s| s * factor as f64);
    out.spacing_x = image.spacing_x.map(|s| s * factor as f64);
    Ok(out)
}

/// Log-compresses to decibels relative to the image maximum, clips to
/// `[-dynamic_range_db, 0]` and maps affinely onto `[0, 1]`.
pub fn db_normalize(image: &Image, dynamic_range_db: f64) -> Result<Image> {
    if !(dynamic_range_db > 0.0) {
        return Err(Error::Config(format!(
            "dynamic range must be positive, got {dynamic_range_db}"
        )));
    }
    if let Some(v) = image.pixels.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::Domain(format!("dB conversion of negative pixel {v}")));
    }
    let max = image.pixels.iter().copied().fold(0.0f32, f32::max) as f64;
    if max <= 0.0 {
        return Err(Error::Domain("all-zero image has no reference maximum".into()));
    }
    let pixels = image
        .pixels
        .iter()
        .map(|&v| {
            if v == 0.0 {
                return 0.0;
            }
            let db = (20.0 * (v as f64 / max).log10()).clamp(-dynamic_range_db, 0.0);
            ((db + dynamic_range_db) / dynamic_range_db) as f32
        })
        .collect();
    image.with_pixels(pixels)
}
