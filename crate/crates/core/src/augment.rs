//! Background images and camera poses sampled during optimization.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::render::{CameraPose, PITCH_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundMode {
    ConstantGray,
    Checkerboard,
    Noise,
    Fourier,
}

impl BackgroundMode {
    pub const AUGMENTED: [BackgroundMode; 3] =
        [BackgroundMode::Checkerboard, BackgroundMode::Noise, BackgroundMode::Fourier];

    pub fn name(self) -> &'static str {
        match self {
            BackgroundMode::ConstantGray => "gray",
            BackgroundMode::Checkerboard => "checkerboard",
            BackgroundMode::Noise => "noise",
            BackgroundMode::Fourier => "fourier",
        }
    }
}

const CHECKER_CELLS: [usize; 3] = [4, 8, 16];
const FOURIER_TERMS: usize = 4;
const FOURIER_MAX_FREQ: f64 = 3.0;

/// Deterministic child generator for `(seed, step, stream)`.
pub fn child_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Picks a mode uniformly from `modes` and generates an image with it.
pub fn sample_background<R: Rng + ?Sized>(modes: &[BackgroundMode], rng: &mut R, height: usize, width: usize) -> (BackgroundMode, Image) {
    assert!(!modes.is_empty(), "background mode set must not be empty");
    let mode = modes[rng.random_range(0..modes.len())];
    (mode, generate_background(mode, rng, height, width))
}

pub fn generate_background<R: Rng + ?Sized>(mode: BackgroundMode, rng: &mut R, height: usize, width: usize) -> Image {
    match mode {
        BackgroundMode::ConstantGray => {
            let g = rng.random::<f64>();
            Image::filled(width, height, [g; 3])
        }
        BackgroundMode::Checkerboard => {
            let cell = CHECKER_CELLS[rng.random_range(0..CHECKER_CELLS.len())];
            let a: [f64; 3] = std::array::from_fn(|_| rng.random());
            let b: [f64; 3] = std::array::from_fn(|_| rng.random());
            checkerboard(height, width, cell, a, b)
        }
        BackgroundMode::Noise => {
            let mut img = Image::new(width, height);
            for v in img.data_mut() {
                *v = rng.random();
            }
            img
        }
        BackgroundMode::Fourier => fourier(rng, height, width),
    }
}

pub fn checkerboard(height: usize, width: usize, cell: usize, a: [f64; 3], b: [f64; 3]) -> Image {
    let cell = cell.max(1);
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            img.set_pixel(x, y, if (x / cell + y / cell).is_multiple_of(2) { a } else { b });
        }
    }
    img
}

/// Sum of random low-frequency sinusoids per channel, rescaled to `[0, 1]`.
fn fourier<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Image {
    let mut img = Image::new(width, height);
    for ch in 0..3 {
        let terms: Vec<[f64; 4]> = (0..FOURIER_TERMS)
            .map(|_| {
                [
                    rng.random_range(-FOURIER_MAX_FREQ..=FOURIER_MAX_FREQ),
                    rng.random_range(-FOURIER_MAX_FREQ..=FOURIER_MAX_FREQ),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.5..1.0),
                ]
            })
            .collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut plane = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
                let val: f64 = terms.iter().map(|t| t[3] * (TAU * (t[0] * u + t[1] * v) + t[2]).sin()).sum();
                lo = lo.min(val);
                hi = hi.max(val);
                plane.push(val);
            }
        }
        let span = hi - lo;
        for (p, val) in plane.into_iter().enumerate() {
            img.data_mut()[3 * p + ch] = if span > 1e-12 { ((val - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
        }
    }
    img
}

/// Uniform yaw in `[0, 2π)`, pitch in `[-π/14, π/14]`, distance in `[2r, 4r]`.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> CameraPose {
    assert!(radius > 0.0, "bounding radius must be positive");
    CameraPose {
        yaw: rng.random_range(0.0..TAU),
        pitch: rng.random_range(-PITCH_LIMIT..=PITCH_LIMIT),
        distance: rng.random_range(2.0 * radius..=4.0 * radius),
    }
}
