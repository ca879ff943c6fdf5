//! Plain-text transfer-function files.
//!
//! ```text
//! # comment lines start with '#'
//! <M> <value_min> <value_max>
//! <position> <density> <r> <g> <b>     (M records)
//! ```
//!
//! Densities are extinction coefficients in `[0, 255]` per world unit;
//! colors are linear RGB in `[0, 1]`. Numbers are written in shortest
//! round-trip form, so export followed by import is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::TfRealized;
use crate::error::{Error, Result};

const MAX_CONTROL_POINTS: usize = 1 << 20;

pub fn write_tf(tf: &TfRealized) -> String {
    let mut out = String::new();
    out.push_str("# transfer function: position density r g b\n");
    let _ = writeln!(out, "{} {} {}", tf.control_points(), tf.value_min(), tf.value_max());
    for k in 0..tf.control_points() {
        let c = tf.color[k];
        let _ = writeln!(out, "{} {} {} {} {}", tf.positions[k], tf.density[k], c[0], c[1], c[2]);
    }
    out
}

pub fn parse_tf(text: &str) -> Result<TfRealized> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| Error::format("transfer function file is empty"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::format(format!("line {hline}: header needs `M value_min value_max`")));
    }
    let m: usize = fields[0]
        .parse()
        .map_err(|_| Error::format(format!("line {hline}: bad control-point count `{}`", fields[0])))?;
    if !(2..=MAX_CONTROL_POINTS).contains(&m) {
        return Err(Error::format(format!("line {hline}: control-point count {m} out of range")));
    }
    let lo = parse_num(fields[1], hline)?;
    let hi = parse_num(fields[2], hline)?;

    let mut positions = Vec::with_capacity(m);
    let mut density = Vec::with_capacity(m);
    let mut color = Vec::with_capacity(m);
    for (lineno, line) in lines {
        if positions.len() == m {
            return Err(Error::format(format!("line {lineno}: more than {m} records")));
        }
        let nums = line
            .split_whitespace()
            .map(|t| parse_num(t, lineno))
            .collect::<Result<Vec<f64>>>()?;
        if nums.len() != 5 {
            return Err(Error::format(format!(
                "line {lineno}: expected `position density r g b`, got {} fields",
                nums.len()
            )));
        }
        positions.push(nums[0]);
        density.push(nums[1]);
        color.push([nums[2], nums[3], nums[4]]);
    }
    if positions.len() != m {
        return Err(Error::format(format!("expected {m} records, found {}", positions.len())));
    }
    let tf = TfRealized::new(positions, density, color)?;
    let tol = |v: f64| 1e-9 * v.abs().max(1.0);
    if (tf.value_min() - lo).abs() > tol(lo) || (tf.value_max() - hi).abs() > tol(hi) {
        return Err(Error::format(format!(
            "header range [{lo}, {hi}] disagrees with first/last positions [{}, {}]",
            tf.value_min(),
            tf.value_max()
        )));
    }
    Ok(tf)
}

fn parse_num(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::format(format!("line {line}: `{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::format(format!("line {line}: non-finite value `{tok}`")));
    }
    Ok(v)
}

pub fn export_tf(tf: &TfRealized, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_tf(tf))?;
    Ok(())
}

pub fn import_tf(path: impl AsRef<Path>) -> Result<TfRealized> {
    parse_tf(&fs::read_to_string(path)?)
}

/// Indices of density local maxima. A plateau counts once (at its first
/// index) when every neighboring value is strictly lower; a flat function
/// has no peaks.
pub fn density_peaks(tf: &TfRealized) -> Vec<usize> {
    let d = &tf.density;
    let mut peaks = Vec::new();
    let mut start = 0;
    while start < d.len() {
        let mut end = start;
        while end + 1 < d.len() && d[end + 1] == d[start] {
            end += 1;
        }
        let left_lower = start == 0 || d[start - 1] < d[start];
        let right_lower = end + 1 == d.len() || d[end + 1] < d[start];
        let has_neighbor = start > 0 || end + 1 < d.len();
        if left_lower && right_lower && has_neighbor {
            peaks.push(start);
        }
        start = end + 1;
    }
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tf::TfParams;

    fn gray_ramp() -> TfRealized {
        TfRealized::new(vec![0.0, 1.0], vec![0.0, 255.0], vec![[0.0; 3], [1.0; 3]]).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let p = TfParams::new(vec![0.3, -1.7, 0.01], vec![0.2, -3.0, 1.0, 0.7], vec![[0.1, -0.4, 2.0]; 4]).unwrap();
        let tf = p.realize(-12.25, 1e4 / 3.0).unwrap();
        let back = parse_tf(&write_tf(&tf)).unwrap();
        assert_eq!(back, tf);
    }

    #[test]
    fn gray_ramp_has_two_records() {
        let text = write_tf(&gray_ramp());
        let records = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
        assert_eq!(records, 2);
    }

    #[test]
    fn rejects_decreasing_positions() {
        let err = parse_tf("2 0 1\n1 0 0 0 0\n0 0 0 0 0\n");
        assert!(err.is_err());
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "2 0\n",
            "2 0 1\n0 0 0 0 0\n",
            "2 0 1\n0 0 0 0 0\n1 0 0 0 0\n1.5 0 0 0 0\n",
            "2 0 1\n0 0 0 0\n1 0 0 0 0\n",
            "2 0 1\n0 nan 0 0 0\n1 0 0 0 0\n",
            "2 0 1\n0 300 0 0 0\n1 0 0 0 0\n",
            "2 0 1\n0 0 0 0 2\n1 0 0 0 0\n",
            "2 0 2\n0 0 0 0 0\n1 0 0 0 0\n",
            "1 0 1\n0 0 0 0 0\n",
        ] {
            assert!(parse_tf(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn peaks() {
        let mk = |d: Vec<f64>| {
            let n = d.len();
            TfRealized::new((0..n).map(|i| i as f64).collect(), d, vec![[0.5; 3]; n]).unwrap()
        };
        assert_eq!(density_peaks(&mk(vec![0.0, 5.0, 0.0, 9.0, 1.0])), vec![1, 3]);
        assert!(density_peaks(&mk(vec![3.0; 6])).is_empty());
        assert_eq!(density_peaks(&mk(vec![0.0, 4.0, 4.0, 0.0])), vec![1]);
        assert_eq!(density_peaks(&mk(vec![4.0, 1.0, 2.0])), vec![0, 2]);
        assert!(density_peaks(&mk(vec![0.0, 1.0, 1.0, 2.0])).len() == 1);
    }
}
