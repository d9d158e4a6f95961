//! Procedural two-class corpus: soft blobs (class 0) versus stripes (class 1).

use crate::image::ImageTensor;
use crate::rng::SeededRng;

pub const SYNTHETIC_CLASSES: [&str; 2] = ["blobs", "stripes"];

/// `n` grayscale or RGB images of `size × size`, labels alternating 0, 1, ...
/// Every image gets its own stream keyed by its index.
pub fn blobs_vs_stripes(n: usize, size: usize, channels: usize, seed: u64) -> Vec<(ImageTensor, usize)> {
    let base = SeededRng::new(seed, 0x7379_6e74);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut rng = base.child(i as u64);
            let plane = if label == 0 { blobs(size, &mut rng) } else { stripes(size, &mut rng) };
            let tint: Vec<f32> = (0..channels).map(|_| rng.uniform(0.8, 1.0) as f32).collect();
            let mut data = Vec::with_capacity(size * size * channels);
            for v in plane {
                for t in &tint {
                    data.push((v * t).clamp(0.0, 1.0));
                }
            }
            (ImageTensor::new(size, size, channels, data).expect("synthetic dims"), label)
        })
        .collect()
}

fn noise(rng: &mut SeededRng) -> f64 {
    rng.uniform(-0.05, 0.05)
}

fn blobs(size: usize, rng: &mut SeededRng) -> Vec<f32> {
    let s = size as f64;
    let count = 1 + rng.below(3);
    let spots: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| (rng.uniform(0.2, 0.8) * s, rng.uniform(0.2, 0.8) * s, rng.uniform(0.08, 0.18) * s))
        .collect();
    let bg = rng.uniform(0.15, 0.3);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = bg;
            for &(cy, cx, r) in &spots {
                let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                v += 0.7 * (-d2 / (2.0 * r * r)).exp();
            }
            out.push((v + noise(rng)) as f32);
        }
    }
    out
}

fn stripes(size: usize, rng: &mut SeededRng) -> Vec<f32> {
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let period = rng.uniform(3.0, 6.0);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * c + y as f64 * s;
            let v = 0.5 + 0.35 * (std::f64::consts::TAU * u / period + phase).sin();
            out.push((v + noise(rng)) as f32);
        }
    }
    out
}
