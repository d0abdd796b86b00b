//! Synthetic textured images: a smooth background, coarse Gaussian blobs
//! and a dense population of small low-contrast blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::Image;

/// Generates an `h x w` image with values in `[0, 1]`, fully determined by
/// `seed`.
pub fn textured_blobs(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(0.3..0.5);
    let (gy, gx) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let mut px: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            base + gy * (r - 0.5) + gx * (c - 0.5)
        })
        .collect();
    // coarse structures, then fine-grained texture
    for (per_blob, sigma_range, amp_range) in [(96, 1.5..5.0, 0.1..0.35), (6, 0.5..1.2, 0.03..0.1)] {
        for _ in 0..(h * w / per_blob).max(1) {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sigma: f64 = rng.random_range(sigma_range.clone());
            let amp = rng.random_range(amp_range.clone()) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let reach = (3.0 * sigma).ceil() as isize;
            let (r0, c0) = (cy as isize, cx as isize);
            for r in (r0 - reach).max(0)..(r0 + reach + 1).min(h as isize) {
                for c in (c0 - reach).max(0)..(c0 + reach + 1).min(w as isize) {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    px[r as usize * w + c as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Image::new(h, w, px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("sized buffer")
}
