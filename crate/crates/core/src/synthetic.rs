//! Procedural test volumes.

use crate::error::Result;
use crate::tf::TfRealized;
use crate::volume::ScalarField;

/// Radii (as a fraction of the half extent) and peak values of the shells.
const INNER: (f64, f64) = (0.35, 0.9);
const OUTER: (f64, f64) = (0.75, 0.45);
const SHELL_WIDTH: f64 = 0.09;

/// Two concentric Gaussian shells on an `n³` grid with unit spacing.
pub fn two_shells(n: usize) -> Result<ScalarField> {
    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    ScalarField::from_fn([n, n, n], [1.0; 3], |x, y, z| {
        let d = [x, y, z].map(|v| (v as f64 - c) / half);
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let bump = |(radius, peak): (f64, f64)| peak * (-((r - radius) / SHELL_WIDTH).powi(2)).exp();
        bump(INNER) + bump(OUTER)
    })
}

/// Ground truth for [`two_shells`]: a translucent blue outer shell around
/// an opaque orange core, clear elsewhere. Needs `n >= 12` so the grid
/// resolves the inner shell's peak value.
pub fn two_shells_tf(field: &ScalarField) -> Result<TfRealized> {
    let (lo, hi) = (field.value_min(), field.value_max());
    let at = |v: f64| lo + (hi - lo) * ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    let outer = OUTER.1;
    let inner = INNER.1.min(hi);
    let blue = [0.15, 0.35, 0.9];
    let orange = [0.95, 0.55, 0.1];
    TfRealized::new(
        vec![lo, at(outer - 0.12), at(outer), at(outer + 0.12), at(inner - 0.2), hi],
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 4.0],
        vec![blue, blue, blue, blue, orange, orange],
    )
}

/// Deterministic hash noise in `[0, 1)`.
fn hash3(x: usize, y: usize, z: usize, salt: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
        ^ salt;
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// A potted-tree-like scene on an `n³` uint8-valued grid: noisy air, a
/// dense pot, a trunk with two branches, and clumps of foliage. At
/// `n = 256` it has the size and value layout of a typical CT bonsai scan.
pub fn bonsai_like(n: usize) -> Result<ScalarField> {
    let s = n as f64;
    let clumps: [([f64; 3], f64); 5] = [
        ([0.5, 0.5, 0.72], 0.16),
        ([0.34, 0.45, 0.64], 0.11),
        ([0.66, 0.56, 0.66], 0.12),
        ([0.45, 0.68, 0.78], 0.09),
        ([0.58, 0.36, 0.8], 0.08),
    ];
    let seg_dist = |p: [f64; 3], a: [f64; 3], b: [f64; 3]| {
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
        let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / (ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2]))
            .clamp(0.0, 1.0);
        let q = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1], a[2] + t * ab[2] - p[2]];
        (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
    };
    let branches = [
        ([0.5, 0.5, 0.22], [0.5, 0.5, 0.7], 0.035),
        ([0.5, 0.5, 0.45], [0.34, 0.45, 0.62], 0.02),
        ([0.5, 0.5, 0.5], [0.66, 0.56, 0.64], 0.02),
    ];
    ScalarField::from_fn([n, n, n], [1.0; 3], |x, y, z| {
        let p = [(x as f64 + 0.5) / s, (y as f64 + 0.5) / s, (z as f64 + 0.5) / s];
        let noise = hash3(x, y, z, 0x5EED);
        let mut v = 6.0 * noise;
        // pot: hollow cylinder filled with soil
        let rxy = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
        if p[2] > 0.08 && p[2] < 0.24 && rxy < 0.3 {
            v = if rxy > 0.27 || p[2] < 0.1 { 210.0 } else { 120.0 } + 20.0 * noise;
        }
        for (a, b, radius) in branches {
            if seg_dist(p, a, b) < radius {
                v = 170.0 + 15.0 * noise;
            }
        }
        for (c, radius) in clumps {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            // sparse leaves: only part of each clump is occupied
            if d < radius && hash3(x / 2, y / 2, z / 2, 0x1EAF) < 0.35 {
                v = v.max(70.0 + 40.0 * noise);
            }
        }
        v.round().clamp(0.0, 255.0)
    })
}
