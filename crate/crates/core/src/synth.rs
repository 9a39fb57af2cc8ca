//! Synthetic grayscale textures for tests and the bundled sample corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::par;
use crate::tensor::ImagePatch;

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One image: a smooth gradient plus oriented sinusoids, soft blobs, a few
/// hard edges and mild sensor noise, rounded to 8 bits.
pub fn texture(width: usize, height: usize, seed: u64, index: u64) -> ImagePatch {
    let mut rng = image_rng(seed, index);
    let (w, h) = (width as f64, height as f64);
    let base = rng.random_range(0.25..0.75);
    let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    let waves: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(4.0..40.0);
            let k = std::f64::consts::TAU / period;
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.02..0.12))
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..7))
        .map(|_| {
            (
                rng.random_range(0.0..w),
                rng.random_range(0.0..h),
                rng.random_range(3.0..w.min(h) / 3.0),
                rng.random_range(-0.3..0.3),
            )
        })
        .collect();
    let edges: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(0..4))
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            (theta.cos(), theta.sin(), rng.random_range(-0.5..0.5) * w.min(h), rng.random_range(-0.25..0.25))
        })
        .collect();
    let noise = Normal::new(0.0, rng.random_range(0.0..0.02)).expect("valid std");
    let (cx, cy) = (w / 2.0, h / 2.0);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base + gx * (xf / w - 0.5) + gy * (yf / h - 0.5);
            for &(kx, ky, ph, a) in &waves {
                v += a * (kx * xf + ky * yf + ph).sin();
            }
            for &(bx, by, r, a) in &blobs {
                let d2 = ((xf - bx).powi(2) + (yf - by).powi(2)) / (r * r);
                v += a * (-0.5 * d2).exp();
            }
            for &(nx, ny, off, a) in &edges {
                if nx * (xf - cx) + ny * (yf - cy) > off {
                    v += a;
                }
            }
            v += noise.sample(&mut rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    ImagePatch::from_bytes(width, height, &pixels).expect("generated size matches")
}

/// `count` textures, generated in parallel and returned in index order.
pub fn corpus(count: usize, width: usize, height: usize, seed: u64) -> Vec<ImagePatch> {
    par::map_range(count, |i| texture(width, height, seed, i as u64))
}

pub fn flat(width: usize, height: usize, level: u8) -> ImagePatch {
    ImagePatch::from_bytes(width, height, &vec![level; width * height]).expect("size matches")
}
