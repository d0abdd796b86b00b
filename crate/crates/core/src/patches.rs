//! Training-corpus construction and grid tiling for inference.
//!
//! Natural patches are drawn at uniformly random positions and kept only when
//! their Tenengrad sharpness exceeds a quantile of the corpus-wide score
//! distribution. Inference uses a deterministic overlapping grid and a
//! weighted re-assembly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::tensor::Tensor;

/// Number of random candidates scored to calibrate the keep threshold.
pub const CALIBRATION_SAMPLES: usize = 10_000;
/// Attempts allowed per requested patch before giving up.
pub const ATTEMPTS_PER_PATCH: usize = 1000;

const PBCH_MAGIC: &[u8; 4] = b"PBCH";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    patch_size: usize,
    data: Tensor<f32>,
    coords: Option<Vec<(usize, usize)>>,
}

impl PatchBatch {
    pub fn new(
        patch_size: usize,
        data: Tensor<f32>,
        coords: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let n = match data.shape() {
            &[n, 1, h, w] if h == patch_size && w == patch_size => n,
            s => {
                return Err(Error::Shape(format!(
                    "patch data {s:?} is not [N, 1, {patch_size}, {patch_size}]"
                )))
            }
        };
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::Shape(format!("{} coords for {n} patches", c.len())));
            }
        }
        Ok(PatchBatch {
            patch_size,
            data,
            coords,
        })
    }

    pub fn empty(patch_size: usize) -> Self {
        PatchBatch {
            patch_size,
            data: Tensor::zeros(&[0, 1, patch_size, patch_size]),
            coords: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<f32> {
        self.data
    }

    pub fn coords(&self) -> Option<&[(usize, usize)]> {
        self.coords.as_deref()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_size * self.patch_size;
        &self.data.data()[i * d..(i + 1) * d]
    }

    /// Patches `start..end` as a new batch (coords carried along).
    pub fn slice(&self, start: usize, end: usize) -> PatchBatch {
        let d = self.patch_size * self.patch_size;
        let data = Tensor::new(
            vec![end - start, 1, self.patch_size, self.patch_size],
            self.data.data()[start * d..end * d].to_vec(),
        )
        .expect("slice within bounds");
        PatchBatch {
            patch_size: self.patch_size,
            data,
            coords: self.coords.as_ref().map(|c| c[start..end].to_vec()),
        }
    }

    /// Appends `other`; coordinates are dropped unless both sides carry them.
    pub fn concat(&self, other: &PatchBatch) -> Result<PatchBatch> {
        if self.patch_size != other.patch_size {
            return Err(Error::Shape(format!(
                "cannot concatenate {}px and {}px patches",
                self.patch_size, other.patch_size
            )));
        }
        let mut data = self.data.data().to_vec();
        data.extend_from_slice(other.data.data());
        let coords = match (&self.coords, &other.coords) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        PatchBatch::new(
            self.patch_size,
            Tensor::new(
                vec![self.len() + other.len(), 1, self.patch_size, self.patch_size],
                data,
            )?,
            coords,
        )
    }
}

/// A named source image for corpus building.
#[derive(Clone, Debug)]
pub struct SourceImage {
    pub name: String,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub source: String,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
    pub natural_count: usize,
    pub uniform_count: usize,
    pub seed: u64,
    pub threshold: Option<f64>,
}

impl CorpusManifest {
    pub fn total(&self) -> usize {
        self.natural_count + self.uniform_count
    }

    /// Tab-separated text: `#` header lines, then `source row col score`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# seed={} natural={} uniform={}",
            self.seed, self.natural_count, self.uniform_count
        );
        if let Some(t) = self.threshold {
            let _ = writeln!(out, "# threshold={t:e}");
        }
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{:e}", r.source, r.row, r.col, r.score);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Tenengrad focus measure: sum over interior pixels of the squared
/// valid-mode Sobel responses.
pub fn tenengrad(patch: &[f32], size: usize) -> Result<f64> {
    if size < 3 || patch.len() != size * size {
        return Err(Error::Shape(format!(
            "tenengrad needs a square patch of side >= 3, got {} values for side {size}",
            patch.len()
        )));
    }
    let at = |r: usize, c: usize| patch[r * size + c] as f64;
    let mut score = 0.0;
    for r in 1..size - 1 {
        for c in 1..size - 1 {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            score += gx * gx + gy * gy;
        }
    }
    Ok(score)
}

fn crop(image: &Image, row: usize, col: usize, p: usize, out: &mut Vec<f32>) {
    for r in row..row + p {
        let start = r * image.width() + col;
        out.extend_from_slice(&image.pixels()[start..start + p]);
    }
}

/// Linear-interpolated quantile of an unsorted sample, `q` in `[0, 1]`.
fn quantile(scores: &mut [f64], q: f64) -> f64 {
    scores.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (scores.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    scores[lo] + (scores[hi] - scores[lo]) * (pos - lo as f64)
}

struct PositionSampler {
    // cumulative count of valid top-left positions per image
    cumulative: Vec<usize>,
}

impl PositionSampler {
    fn new(images: &[SourceImage], p: usize) -> Result<Self> {
        let mut total = 0;
        let mut cumulative = Vec::with_capacity(images.len());
        for img in images {
            let (h, w) = (img.image.height(), img.image.width());
            if h >= p && w >= p {
                total += (h - p + 1) * (w - p + 1);
            }
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::Sampling(format!(
                "no source image can hold a {p}x{p} patch"
            )));
        }
        Ok(PositionSampler { cumulative })
    }

    fn draw(&self, images: &[SourceImage], p: usize, rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        let total = *self.cumulative.last().unwrap();
        let k = rng.random_range(0..total);
        let idx = self.cumulative.partition_point(|&c| c <= k);
        let before = if idx == 0 { 0 } else { self.cumulative[idx - 1] };
        let local = k - before;
        let cols = images[idx].image.width() - p + 1;
        (idx, local / cols, local % cols)
    }
}

/// Draws `n` patches of side `p`, keeping candidates whose Tenengrad score
/// exceeds the `(1 - keep_fraction)` quantile of a calibration sample.
/// `keep_fraction = 1` disables rejection.
pub fn sample_focused_patches(
    images: &[SourceImage],
    n: usize,
    p: usize,
    keep_fraction: f64,
    seed: u64,
) -> Result<(PatchBatch, CorpusManifest)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if p < 3 {
        return Err(Error::Config(format!("patch size must be >= 3, got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = PositionSampler::new(images, p)?;
    let mut buf = Vec::with_capacity(p * p);

    let threshold = if keep_fraction < 1.0 {
        let mut scores = Vec::with_capacity(CALIBRATION_SAMPLES);
        for _ in 0..CALIBRATION_SAMPLES {
            let (i, r, c) = positions.draw(images, p, &mut rng);
            buf.clear();
            crop(&images[i].image, r, c, p, &mut buf);
            scores.push(tenengrad(&buf, p)?);
        }
        Some(quantile(&mut scores, 1.0 - keep_fraction))
    } else {
        None
    };

    let mut data = Vec::with_capacity(n * p * p);
    let mut records = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while records.len() < n {
        if attempts >= ATTEMPTS_PER_PATCH * n {
            return Err(Error::Sampling(format!(
                "kept {} of {n} patches after {attempts} attempts; no candidate scored above the {:.3} quantile ({:e})",
                records.len(),
                1.0 - keep_fraction,
                threshold.unwrap_or(0.0)
            )));
        }
        attempts += 1;
        let (i, r, c) = positions.draw(images, p, &mut rng);
        buf.clear();
        crop(&images[i].image, r, c, p, &mut buf);
        let score = tenengrad(&buf, p)?;
        if let Some(t) = threshold {
            if score <= t {
                continue;
            }
        }
        data.extend_from_slice(&buf);
        records.push(ManifestRecord {
            source: images[i].name.clone(),
            row: r,
            col: c,
            score,
        });
    }
    let coords = records.iter().map(|r| (r.row, r.col)).collect();
    let batch = PatchBatch::new(p, Tensor::new(vec![n, 1, p, p], data)?, Some(coords))?;
    let manifest = CorpusManifest {
        records,
        natural_count: n,
        uniform_count: 0,
        seed,
        threshold,
    };
    Ok((batch, manifest))
}

/// `n` spatially constant patches with intensities drawn from `Uniform[lo, hi]`.
pub fn make_uniform_patches(n: usize, p: usize, lo: f32, hi: f32, seed: u64) -> Result<PatchBatch> {
    if !(lo <= hi) {
        return Err(Error::Config(format!("uniform range [{lo}, {hi}] is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * p * p);
    for _ in 0..n {
        let v = if lo == hi {
            lo
        } else {
            lo + (hi - lo) * rng.random::<f32>()
        };
        data.extend(std::iter::repeat_n(v, p * p));
    }
    PatchBatch::new(p, Tensor::new(vec![n, 1, p, p], data)?, None)
}

fn grid_positions(len: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + p <= len).collect();
    if *pos.last().unwrap() + p < len {
        pos.push(len - p);
    }
    pos
}

/// Overlapping grid of `p x p` patches at multiples of `stride`; the last
/// row and column are shifted so they end at the image border.
pub fn extract_grid(image: &Image, p: usize, stride: usize) -> Result<PatchBatch> {
    if p == 0 || p > image.height() || p > image.width() {
        return Err(Error::Shape(format!(
            "{}x{} image cannot hold a {p}x{p} patch",
            image.height(),
            image.width()
        )));
    }
    if stride == 0 || stride > p {
        return Err(Error::Config(format!("stride must lie in [1, {p}], got {stride}")));
    }
    let rows = grid_positions(image.height(), p, stride);
    let cols = grid_positions(image.width(), p, stride);
    let mut data = Vec::with_capacity(rows.len() * cols.len() * p * p);
    let mut coords = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            crop(image, r, c, p, &mut data);
            coords.push((r, c));
        }
    }
    PatchBatch::new(
        p,
        Tensor::new(vec![coords.len(), 1, p, p], data)?,
        Some(coords),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Blend {
    Hann,
    Uniform,
}

/// Floor keeping patch borders at nonzero weight.
pub const HANN_FLOOR: f64 = 1e-3;

pub fn blend_weights(p: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; p * p],
        Blend::Hann => {
            let hann: Vec<f64> = (0..p)
                .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / p as f64).sin().powi(2))
                .collect();
            let mut w = Vec::with_capacity(p * p);
            for i in 0..p {
                for j in 0..p {
                    w.push((hann[i] * hann[j]).max(HANN_FLOOR));
                }
            }
            w
        }
    }
}

/// Weighted average of patches placed at their recorded coordinates.
pub fn stitch(patches: &PatchBatch, out_h: usize, out_w: usize, blend: Blend) -> Result<Image> {
    let coords = patches
        .coords()
        .ok_or_else(|| Error::Config("stitching needs patch coordinates".into()))?;
    let p = patches.patch_size();
    let weights = blend_weights(p, blend);
    let mut acc = vec![0.0f64; out_h * out_w];
    let mut norm = vec![0.0f64; out_h * out_w];
    for (i, &(r0, c0)) in coords.iter().enumerate() {
        if r0 + p > out_h || c0 + p > out_w {
            return Err(Error::Shape(format!(
                "patch {i} at ({r0}, {c0}) exceeds the {out_h}x{out_w} output"
            )));
        }
        let patch = patches.patch(i);
        for r in 0..p {
            for c in 0..p {
                let o = (r0 + r) * out_w + c0 + c;
                let w = weights[r * p + c];
                acc[o] += w * patch[r * p + c] as f64;
                norm[o] += w;
            }
        }
    }
    if let Some(i) = norm.iter().position(|&w| w == 0.0) {
        return Err(Error::Shape(format!(
            "output pixel ({}, {}) is not covered by any patch",
            i / out_w,
            i % out_w
        )));
    }
    let pixels = acc.iter().zip(&norm).map(|(a, w)| (a / w) as f32).collect();
    Image::new(out_h, out_w, pixels)
}

pub fn write_corpus(batch: &PatchBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_corpus(batch)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<PatchBatch> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

pub fn encode_corpus(batch: &PatchBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * batch.data().len());
    out.extend_from_slice(PBCH_MAGIC);
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    out.extend_from_slice(&(batch.patch_size() as u32).to_le_bytes());
    for v in batch.data().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<PatchBatch> {
    if bytes.len() < 12 || &bytes[..4] != PBCH_MAGIC {
        return Err(Error::parse(0, "missing PBCH header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let p = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + 4 * n * p * p;
    if bytes.len() != need {
        return Err(Error::parse(
            bytes.len().min(need),
            format!("corpus of {n} {p}x{p} patches needs {need} bytes, have {}", bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PatchBatch::new(p, Tensor::new(vec![n, 1, p, p], data)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random::<f32>())
    }

    #[test]
    fn tenengrad_hand_values() {
        assert_eq!(tenengrad(&[0.4; 25], 5).unwrap(), 0.0);
        let edge = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(tenengrad(&edge, 3).unwrap(), 16.0);
        assert!(tenengrad(&[0.0; 4], 2).is_err());
    }

    #[test]
    fn tenengrad_is_homogeneous_of_degree_two() {
        let img = noise_image(8, 8, 3);
        let base = tenengrad(img.pixels(), 8).unwrap();
        let doubled: Vec<f32> = img.pixels().iter().map(|v| 2.0 * v).collect();
        let scaled = tenengrad(&doubled, 8).unwrap();
        assert!((scaled - 4.0 * base).abs() < 1e-9 * scaled);
    }

    #[test]
    fn keep_fraction_one_disables_rejection() {
        let src = [SourceImage {
            name: "flat".into(),
            image: Image::filled(20, 20, 0.3),
        }];
        let (batch, manifest) = sample_focused_patches(&src, 50, 8, 1.0, 1).unwrap();
        assert_eq!(batch.len(), 50);
        assert_eq!(manifest.threshold, None);
        assert_eq!(manifest.total(), 50);
    }

    #[test]
    fn constant_corpus_cannot_be_focused() {
        let src = [SourceImage {
            name: "flat".into(),
            image: Image::filled(20, 20, 0.3),
        }];
        let err = sample_focused_patches(&src, 3, 8, 0.5, 1).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
        assert!(err.to_string().contains("quantile"), "{err}");
    }

    #[test]
    fn focused_sampling_prefers_texture() {
        let texture = noise_image(64, 64, 11);
        let img = Image::from_fn(64, 128, |r, c| if c < 64 { 0.5 } else { texture.get(r, c - 64) });
        let src = [SourceImage {
            name: "half".into(),
            image: img,
        }];
        let (batch, manifest) = sample_focused_patches(&src, 1000, 16, 0.25, 9).unwrap();
        let overlapping = manifest.records.iter().filter(|r| r.col + 16 > 64).count();
        assert!(overlapping as f64 >= 0.9 * batch.len() as f64, "{overlapping}");
        let (_, again) = sample_focused_patches(&src, 1000, 16, 0.25, 9).unwrap();
        assert_eq!(manifest, again);
    }

    #[test]
    fn uniform_patches() {
        let b = make_uniform_patches(3, 4, 0.2, 0.2, 0).unwrap();
        assert!(b.data().data().iter().all(|&v| v == 0.2));
        let b = make_uniform_patches(100_000, 2, 0.0, 0.5, 5).unwrap();
        let mut sum = 0.0f64;
        for i in 0..b.len() {
            let p = b.patch(i);
            assert!(p.iter().all(|&v| v == p[0]));
            sum += p[0] as f64;
        }
        let mean = sum / b.len() as f64;
        assert!((mean - 0.25).abs() < 0.005, "{mean}");
        assert!(make_uniform_patches(1, 2, 0.6, 0.5, 0).is_err());
    }

    #[test]
    fn grid_positions_follow_the_clamping_rule() {
        assert_eq!(grid_positions(32, 32, 16), vec![0]);
        assert_eq!(grid_positions(48, 32, 16), vec![0, 16]);
        assert_eq!(grid_positions(100, 32, 16), vec![0, 16, 32, 48, 64, 68]);
        let img = Image::filled(48, 32, 0.0);
        let b = extract_grid(&img, 32, 16).unwrap();
        assert_eq!(b.coords().unwrap(), &[(0, 0), (16, 0)]);
        assert!(extract_grid(&Image::filled(20, 40, 0.0), 32, 16).is_err());
        assert!(extract_grid(&img, 32, 33).is_err());
    }

    #[test]
    fn stitch_cases() {
        let img = noise_image(32, 32, 4);
        let single = extract_grid(&img, 32, 32).unwrap();
        assert_eq!(stitch(&single, 32, 32, Blend::Hann).unwrap().pixels(), img.pixels());

        let data = Tensor::new(
            vec![2, 1, 4, 4],
            [vec![0.0f32; 16], vec![1.0f32; 16]].concat(),
        )
        .unwrap();
        let two = PatchBatch::new(4, data, Some(vec![(0, 0), (0, 2)])).unwrap();
        let out = stitch(&two, 4, 6, Blend::Uniform).unwrap();
        for r in 0..4 {
            assert_eq!(out.get(r, 0), 0.0);
            assert_eq!(out.get(r, 2), 0.5);
            assert_eq!(out.get(r, 3), 0.5);
            assert_eq!(out.get(r, 5), 1.0);
        }
        let err = stitch(&two, 5, 6, Blend::Uniform).unwrap_err();
        assert!(err.to_string().contains("(4, 0)"), "{err}");
    }

    #[test]
    fn corpus_codec() {
        let b = make_uniform_patches(3, 4, 0.0, 0.5, 2).unwrap();
        let bytes = encode_corpus(&b);
        assert_eq!(&bytes[..4], b"PBCH");
        assert_eq!(decode_corpus(&bytes).unwrap(), b);
        assert!(decode_corpus(&bytes[..20]).is_err());
        let empty = encode_corpus(&PatchBatch::empty(32));
        assert_eq!(empty.len(), 12);
        assert_eq!(decode_corpus(&empty).unwrap().len(), 0);
    }

    proptest! {
        #[test]
        fn stitch_inverts_extract(h in 8usize..40, w in 8usize..40, p in 4usize..9, stride_frac in 0.1f64..1.0, seed in 0u64..1000) {
            let stride = ((p as f64 * stride_frac).ceil() as usize).clamp(1, p);
            let img = noise_image(h, w, seed);
            let grid = extract_grid(&img, p, stride).unwrap();
            for blend in [Blend::Hann, Blend::Uniform] {
                let out = stitch(&grid, h, w, blend).unwrap();
                let err = out.pixels().iter().zip(img.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                prop_assert!(err == 0.0, "{err}");
            }
        }

        #[test]
        fn tenengrad_ignores_offsets(seed in 0u64..500, offset in -2.0f32..2.0) {
            let img = noise_image(6, 6, seed);
            let shifted: Vec<f32> = img.pixels().iter().map(|v| v + offset).collect();
            let a = tenengrad(img.pixels(), 6).unwrap();
            let b = tenengrad(&shifted, 6).unwrap();
            prop_assert!((a - b).abs() <= 1e-5 * a.max(1.0));
        }
    }
}
