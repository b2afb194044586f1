//! Synthetic paired data shared by the integration tests.

#![allow(dead_code)]

use cfwd_core::imaging::{Dataset, PairedSample};
use cfwd_core::tensor::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A smooth scene: tinted vertical gradient, one bright disk, faint stripes.
pub fn scene(side: usize, seed: u64) -> ImageTensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [r.random_range(0.3..0.8), r.random_range(0.3..0.8), r.random_range(0.3..0.8)];
    let s = side as f32;
    let (cx, cy, rad) = (
        r.random_range(0.25 * s..0.75 * s),
        r.random_range(0.25 * s..0.75 * s),
        r.random_range(0.12 * s..0.3 * s),
    );
    let f = r.random_range(0.1..0.4f32);
    ImageTensor::from_fn(side, side, 3, |y, x, c| {
        let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
        let disk = if d < rad { 0.25 } else { 0.0 };
        let stripes = 0.1 * ((x as f32 * f).sin() * (y as f32 * f * 0.7).cos());
        (base[c] * (0.6 + 0.4 * y as f32 / (s - 1.0)) + disk + stripes).clamp(0.0, 1.0)
    })
}

/// `0.2 · high` plus ±0.005 uniform sensor noise.
pub fn darken(high: &ImageTensor<f32>, seed: u64) -> ImageTensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut low = high.clone();
    for v in low.data_mut() {
        *v = (0.2 * *v + 0.01 * (r.random::<f32>() - 0.5)).clamp(0.0, 1.0);
    }
    low
}

pub fn pairs(n: usize, side: usize) -> Vec<PairedSample<f32>> {
    (0..n as u64)
        .map(|i| {
            let high = scene(side, i);
            PairedSample::new(darken(&high, 99 + i), high, format!("p{i}")).unwrap()
        })
        .collect()
}

pub fn dataset(n: usize, side: usize) -> Dataset<f32> {
    Dataset::from_samples(pairs(n, side))
}
