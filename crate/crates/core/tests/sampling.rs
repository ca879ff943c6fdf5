use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use tfgrad::augment::{child_rng, sample_background, sample_pose, BackgroundMode};
use tfgrad::scorer::sample_negatives;

#[test]
fn pose_ranges_and_yaw_uniformity() {
    let r = 2.5;
    let mut rng = child_rng(11, 0, 0);
    let bins = 20;
    let mut counts = vec![0usize; bins];
    let n = 10_000;
    for _ in 0..n {
        let p = sample_pose(&mut rng, r);
        assert!(p.pitch.abs() <= PI / 14.0);
        assert!((2.0 * r..=4.0 * r).contains(&p.distance));
        assert!((0.0..TAU).contains(&p.yaw));
        counts[(p.yaw / TAU * bins as f64) as usize] += 1;
    }
    let expect = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    // 19 degrees of freedom, 0.999 quantile
    assert!(chi2 < 43.8, "chi2 = {chi2}");
}

#[test]
fn pattern_frequencies_are_uniform() {
    let mut rng = child_rng(12, 0, 0);
    let n = 3000;
    let mut counts: HashMap<BackgroundMode, usize> = HashMap::new();
    for _ in 0..n {
        let (mode, _) = sample_background(&BackgroundMode::AUGMENTED, &mut rng, 4, 4);
        *counts.entry(mode).or_default() += 1;
    }
    let p = 1.0 / 3.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for mode in BackgroundMode::AUGMENTED {
        let f = counts[&mode] as f64 / n as f64;
        assert!((f - p).abs() <= 3.0 * sigma, "{mode:?}: {f}");
    }
}

#[test]
fn negatives_from_two_line_pool() {
    let pool = vec!["first".to_string(), "second".to_string()];
    let draws = sample_negatives(&pool, 4000, &mut child_rng(13, 0, 0)).unwrap();
    let f = draws.iter().filter(|s| *s == "first").count() as f64 / 4000.0;
    assert!((f - 0.5).abs() <= 3.0 * (0.25f64 / 4000.0).sqrt());
}
