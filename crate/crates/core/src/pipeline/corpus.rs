//! Procedural test images.
//!
//! Luma carries the structure the codec struggles with: hard-edged shapes,
//! oriented gratings and fine noise. Chroma is a smooth low-frequency field,
//! so 4:2:0 subsampling alone stays near-lossless.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::RgbImage;

fn luma_field(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let base = rng.random_range(80.0..170.0);
    let mut y: Vec<f64> = (0..w * h)
        .map(|i| {
            let (px, py) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            base + 40.0 * (gx * (px - 0.5) + gy * (py - 0.5))
        })
        .collect();

    for _ in 0..rng.random_range(3..7) {
        let level = rng.random_range(40.0..215.0);
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let radius = |rng: &mut ChaCha8Rng, side: usize| {
            let lo = (side as f64 / 4.0).min(4.0);
            rng.random_range(lo..(side as f64 / 2.5).max(lo + 1.0))
        };
        let (rx, ry) = (radius(rng, w), radius(rng, h));
        let disk = rng.random_bool(0.5);
        for (i, v) in y.iter_mut().enumerate() {
            let (dx, dy) = (((i % w) as f64 - cx) / rx, ((i / w) as f64 - cy) / ry);
            let inside = if disk { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
            if inside {
                *v = level;
            }
        }
    }

    // grating in a random window
    let (x0, y0) = (rng.random_range(0..w / 2), rng.random_range(0..h / 2));
    let (x1, y1) = (x0 + rng.random_range(w / 4..w / 2), y0 + rng.random_range(h / 4..h / 2));
    let period = rng.random_range(3.0..9.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let amp = rng.random_range(15.0..40.0);
    for py in y0..y1.min(h) {
        for px in x0..x1.min(w) {
            let t = (px as f64 * angle.cos() + py as f64 * angle.sin()) / period;
            y[py * w + px] += amp * (2.0 * std::f64::consts::PI * t).sin();
        }
    }

    let sigma = rng.random_range(0.5..3.0);
    for v in &mut y {
        let n: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * 0.866;
        *v = (*v + sigma * n).clamp(24.0, 231.0);
    }
    y
}

fn chroma_field(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset = rng.random_range(-18.0..18.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(3.0..10.0),
            )
        })
        .collect();
    (0..w * h)
        .map(|i| {
            let (px, py) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            offset
                + waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * px + fy * py) + ph).sin())
                    .sum::<f64>()
        })
        .collect()
}

/// Deterministic image for `seed`; sides of at least 8.
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = luma_field(width, height, &mut rng);
    let cb = chroma_field(width, height, &mut rng);
    let cr = chroma_field(width, height, &mut rng);
    RgbImage::from_fn(width, height, |px, py| {
        let i = py * width + px;
        let (l, b, r) = (y[i], cb[i], cr[i]);
        [l + 1.402 * r, l - 0.344136 * b - 0.714136 * r, l + 1.772 * b]
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
    })
}

/// `count` images with seeds `first_seed, first_seed + 1, ...`.
pub fn synthetic_corpus(count: usize, width: usize, height: usize, first_seed: u64) -> Vec<RgbImage> {
    (0..count as u64)
        .map(|i| synthetic_image(width, height, first_seed + i))
        .collect()
}
