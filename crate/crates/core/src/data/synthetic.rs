//! Seeded 7-class pattern images so the whole pipeline runs without external data.
//!
//! Each class is one bright geometric figure on a noisy dark background;
//! position, size, colour and noise vary per image.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image_ops::{FloatImage, PIXEL_MAX};
use crate::error::{Error, Result};
use crate::exec;

pub const SYNTHETIC_CLASSES: [&str; 7] = ["checker", "cross", "diagonal", "disk", "hbar", "ring", "vbar"];

/// Renders one image of `class` at `size x size`.
pub fn synthetic_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> FloatImage {
    let bg: f64 = rng.random_range(30.0..90.0);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(150.0..250.0));
    let (cx, cy) = (rng.random_range(0.4..0.6), rng.random_range(0.4..0.6));
    let scale: f64 = rng.random_range(0.8..1.2);
    let noise = Normal::new(0.0, 10.0).expect("finite std");
    let name = SYNTHETIC_CLASSES[class % SYNTHETIC_CLASSES.len()];
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - cx;
            let v = (y as f64 + 0.5) / size as f64 - cy;
            let r = (u * u + v * v).sqrt() / scale;
            let half = 0.12 * scale;
            let on = match name {
                "checker" => (u > 0.0) == (v > 0.0) && u.abs() < 0.35 * scale && v.abs() < 0.35 * scale,
                "cross" => (u.abs() < half || v.abs() < half) && r < 0.4,
                "diagonal" => (u - v).abs() < half * 1.4 && r < 0.45,
                "disk" => r < 0.3,
                "hbar" => v.abs() < half && u.abs() < 0.4 * scale,
                "ring" => (0.22..0.38).contains(&r),
                _ => u.abs() < half && v.abs() < 0.4 * scale,
            };
            for c in 0..3 {
                let base = if on { fg[c] } else { bg };
                data[(c * size + y) * size + x] = (base + noise.sample(rng)).clamp(0.0, PIXEL_MAX);
            }
        }
    }
    FloatImage {
        channels: 3,
        height: size,
        width: size,
        data,
    }
}

fn image_seed(seed: u64, class: usize, index: usize) -> u64 {
    seed ^ ((class as u64) << 32 | index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Writes `<root>/<class>/<index>.png`, `per_class` images per class.
pub fn write_synthetic_source(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<usize> {
    if per_class == 0 || size == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image of at least one pixel".into()));
    }
    let n = SYNTHETIC_CLASSES.len() * per_class;
    let results = exec::map_indices(n, |i| {
        let (class, index) = (i / per_class, i % per_class);
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, class, index));
        let img = synthetic_image(class, size, &mut rng);
        img.save_png(&root.join(SYNTHETIC_CLASSES[class]).join(format!("{index:05}.png")))
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(n)
}
