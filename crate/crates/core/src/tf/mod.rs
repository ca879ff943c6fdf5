//! Piecewise-linear density and color transfer functions.
//!
//! The trainable parameters are unconstrained. Control-point positions come
//! from softplus-transformed spacings, accumulated and rescaled so the first
//! point sits at the field minimum and the last at the maximum. Densities map
//! to `[0, 255]` and color channels to `[0, 1]` through `(tanh(x) + 1) / 2`,
//! computed here as the equivalent `sigmoid(2x)`.
//!
//! Flat parameter layout, used by gradients and the optimizer:
//! `[spacings (M-1) | densities (M) | colors (3M, rgb interleaved)]`.

mod init;
mod io;

pub use init::{init_params, InitConfig, InitReport};
pub use io::{density_peaks, export_tf, import_tf, parse_tf, write_tf};

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

pub const DENSITY_MAX: f64 = 255.0;
pub const DEFAULT_CONTROL_POINTS: usize = 32;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Maps a raw density parameter to `[0, 255]`.
#[inline]
pub fn map_density(raw: f64) -> f64 {
    DENSITY_MAX * sigmoid(2.0 * raw)
}

/// Derivative of [`map_density`], equal to `127.5 * (1 - tanh^2(raw))`.
#[inline]
pub fn map_density_deriv(raw: f64) -> f64 {
    let s = sigmoid(2.0 * raw);
    2.0 * DENSITY_MAX * s * (1.0 - s)
}

#[inline]
pub fn map_color(raw: f64) -> f64 {
    sigmoid(2.0 * raw)
}

#[inline]
pub fn map_color_deriv(raw: f64) -> f64 {
    let s = sigmoid(2.0 * raw);
    2.0 * s * (1.0 - s)
}

fn half_logit(u: f64) -> f64 {
    let u = u.clamp(1e-300, 1.0 - 1e-16);
    0.5 * (u / (1.0 - u)).ln()
}

/// Inverse of [`map_density`]. Endpoints are pulled just inside the range.
pub fn density_to_raw(density: f64) -> f64 {
    half_logit(density / DENSITY_MAX)
}

pub fn color_to_raw(c: f64) -> f64 {
    half_logit(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfParams {
    pub raw_spacings: Vec<f64>,
    pub raw_density: Vec<f64>,
    pub raw_color: Vec<Rgb>,
}

impl TfParams {
    pub fn new(raw_spacings: Vec<f64>, raw_density: Vec<f64>, raw_color: Vec<Rgb>) -> Result<Self> {
        let p = TfParams { raw_spacings, raw_density, raw_color };
        p.validate()?;
        Ok(p)
    }

    /// Evenly spaced control points, mid-range density, gray color.
    pub fn uniform(control_points: usize) -> Result<Self> {
        if control_points < 2 {
            return Err(Error::invalid("a transfer function needs at least 2 control points"));
        }
        Self::new(
            vec![0.0; control_points - 1],
            vec![0.0; control_points],
            vec![[0.0; 3]; control_points],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.raw_density.len();
        if m < 2 {
            return Err(Error::invalid("a transfer function needs at least 2 control points"));
        }
        if self.raw_spacings.len() != m - 1 || self.raw_color.len() != m {
            return Err(Error::invalid(format!(
                "inconsistent parameter lengths: {} spacings, {} densities, {} colors",
                self.raw_spacings.len(),
                m,
                self.raw_color.len()
            )));
        }
        let all_finite = self.raw_spacings.iter().all(|v| v.is_finite())
            && self.raw_density.iter().all(|v| v.is_finite())
            && self.raw_color.iter().flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("transfer function parameter".into()));
        }
        Ok(())
    }

    pub fn control_points(&self) -> usize {
        self.raw_density.len()
    }

    /// Length of the flat parameter vector, `5M - 1`.
    pub fn len(&self) -> usize {
        flat_len(self.control_points())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn density_offset(&self) -> usize {
        self.control_points() - 1
    }

    pub fn color_offset(&self) -> usize {
        2 * self.control_points() - 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.raw_spacings);
        v.extend_from_slice(&self.raw_density);
        v.extend(self.raw_color.iter().flatten());
        v
    }

    pub fn from_flat(control_points: usize, flat: &[f64]) -> Result<Self> {
        if control_points < 2 || flat.len() != flat_len(control_points) {
            return Err(Error::invalid(format!(
                "flat vector of length {} does not match {} control points",
                flat.len(),
                control_points
            )));
        }
        let m = control_points;
        Self::new(
            flat[..m - 1].to_vec(),
            flat[m - 1..2 * m - 1].to_vec(),
            flat[2 * m - 1..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        )
    }

    /// Applies the deterministic transform to positions, densities, colors.
    pub fn realize(&self, value_min: f64, value_max: f64) -> Result<TfRealized> {
        self.validate()?;
        if !(value_min.is_finite() && value_max.is_finite() && value_min < value_max) {
            return Err(Error::Degenerate(format!(
                "transfer function domain [{value_min}, {value_max}] is empty"
            )));
        }
        let m = self.control_points();
        let range = value_max - value_min;
        let cumulative = cumulative_spacings(&self.raw_spacings);
        let total = cumulative[m - 1];
        let mut positions: Vec<f64> =
            cumulative.iter().map(|c| value_min + range * (c / total)).collect();
        positions[0] = value_min;
        positions[m - 1] = value_max;
        if positions.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Degenerate(
                "control-point spacing underflowed; positions are not strictly increasing".into(),
            ));
        }
        Ok(TfRealized {
            positions,
            density: self.raw_density.iter().map(|&r| map_density(r)).collect(),
            color: self
                .raw_color
                .iter()
                .map(|c| [map_color(c[0]), map_color(c[1]), map_color(c[2])])
                .collect(),
        })
    }

    /// Chains control-point gradients through the parameter transform.
    pub fn backprop(&self, realized: &TfRealized, grads: &ControlPointGrads) -> Vec<f64> {
        let m = self.control_points();
        debug_assert_eq!(grads.density.len(), m);
        let mut out = vec![0.0; self.len()];

        let cumulative = cumulative_spacings(&self.raw_spacings);
        let total = cumulative[m - 1];
        let range = realized.value_max() - realized.value_min();
        // dp_k/dsoftplus_j = range * ([j < k] / total - c_k / total^2)
        let weighted: f64 = grads.position.iter().zip(&cumulative).map(|(g, c)| g * c).sum::<f64>() / total;
        let mut suffix = 0.0;
        for j in (0..m - 1).rev() {
            suffix += grads.position[j + 1];
            out[j] = range / total * (suffix - weighted) * sigmoid(self.raw_spacings[j]);
        }

        let d_off = self.density_offset();
        let c_off = self.color_offset();
        for k in 0..m {
            out[d_off + k] = grads.density[k] * map_density_deriv(self.raw_density[k]);
            for ch in 0..3 {
                out[c_off + 3 * k + ch] = grads.color[k][ch] * map_color_deriv(self.raw_color[k][ch]);
            }
        }
        out
    }

    /// Density, color, and their partials with respect to every flat
    /// parameter at scalar `s`.
    pub fn eval_with_jacobian(&self, value_min: f64, value_max: f64, s: f64) -> Result<Jacobian> {
        let realized = self.realize(value_min, value_max)?;
        let seg = realized.segment(s);
        let m = self.control_points();

        let mut g = ControlPointGrads::zeros(m);
        seg.accumulate(&realized, &mut g, 1.0, [0.0; 3]);
        let d_density = self.backprop(&realized, &g);

        let mut d_color = vec![[0.0; 3]; self.len()];
        for ch in 0..3 {
            let mut upstream = [0.0; 3];
            upstream[ch] = 1.0;
            let mut g = ControlPointGrads::zeros(m);
            seg.accumulate(&realized, &mut g, 0.0, upstream);
            for (dst, v) in d_color.iter_mut().zip(self.backprop(&realized, &g)) {
                dst[ch] = v;
            }
        }
        Ok(Jacobian { density: seg.density, color: seg.color, d_density, d_color })
    }

    /// Recovers parameters that realize to `tf` (densities and colors at the
    /// exact range endpoints are pulled slightly inside).
    pub fn from_realized(tf: &TfRealized) -> Result<Self> {
        let m = tf.control_points();
        let range = tf.value_max() - tf.value_min();
        let raw_spacings = tf
            .positions
            .windows(2)
            .map(|w| softplus_inv((w[1] - w[0]) / range * (m - 1) as f64))
            .collect();
        Self::new(
            raw_spacings,
            tf.density.iter().map(|&d| density_to_raw(d)).collect(),
            tf.color.iter().map(|c| c.map(color_to_raw)).collect(),
        )
    }
}

pub fn flat_len(control_points: usize) -> usize {
    5 * control_points - 1
}

fn cumulative_spacings(raw_spacings: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw_spacings.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for &r in raw_spacings {
        acc += softplus(r);
        out.push(acc);
    }
    out
}

/// Partial derivatives returned by [`TfParams::eval_with_jacobian`].
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub density: f64,
    pub color: Rgb,
    pub d_density: Vec<f64>,
    pub d_color: Vec<Rgb>,
}

/// Realized control points: strictly increasing positions spanning the
/// field range, densities in `[0, 255]`, colors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfRealized {
    pub positions: Vec<f64>,
    pub density: Vec<f64>,
    pub color: Vec<Rgb>,
}

impl TfRealized {
    pub fn new(positions: Vec<f64>, density: Vec<f64>, color: Vec<Rgb>) -> Result<Self> {
        let tf = TfRealized { positions, density, color };
        tf.validate()?;
        Ok(tf)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.positions.len();
        if m < 2 {
            return Err(Error::invalid("a transfer function needs at least 2 control points"));
        }
        if self.density.len() != m || self.color.len() != m {
            return Err(Error::invalid("positions, densities, and colors differ in length"));
        }
        if self.positions.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("control-point position".into()));
        }
        if self.positions.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::format("control-point positions must be strictly increasing"));
        }
        if self.density.iter().any(|d| !(0.0..=DENSITY_MAX).contains(d)) {
            return Err(Error::format("densities must lie in [0, 255]"));
        }
        if self.color.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::format("color channels must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn control_points(&self) -> usize {
        self.positions.len()
    }

    pub fn value_min(&self) -> f64 {
        self.positions[0]
    }

    pub fn value_max(&self) -> f64 {
        self.positions[self.positions.len() - 1]
    }

    /// Locates `s` (clamped to the domain) and interpolates. On a control
    /// point the segment to its right is used.
    #[inline]
    pub fn segment(&self, s: f64) -> Segment {
        let m = self.positions.len();
        let s = s.clamp(self.value_min(), self.value_max());
        let index = self.positions.partition_point(|&p| p <= s).saturating_sub(1).min(m - 2);
        let (p0, p1) = (self.positions[index], self.positions[index + 1]);
        let width = p1 - p0;
        let weight = (s - p0) / width;
        let lerp = |a: f64, b: f64| a + (b - a) * weight;
        let (c0, c1) = (self.color[index], self.color[index + 1]);
        Segment {
            index,
            weight,
            density: lerp(self.density[index], self.density[index + 1]),
            color: [lerp(c0[0], c1[0]), lerp(c0[1], c1[1]), lerp(c0[2], c1[2])],
            dweight_dleft: (weight - 1.0) / width,
            dweight_dright: -weight / width,
        }
    }

    pub fn eval(&self, s: f64) -> (f64, Rgb) {
        let seg = self.segment(s);
        (seg.density, seg.color)
    }
}

/// One evaluation of the transfer function, with the local interpolation
/// data needed to chain gradients back to control points.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub index: usize,
    pub weight: f64,
    pub density: f64,
    pub color: Rgb,
    pub dweight_dleft: f64,
    pub dweight_dright: f64,
}

impl Segment {
    /// Adds `d_density * dσ/d(·) + d_color · dc/d(·)` into control-point grads.
    #[inline]
    pub fn accumulate(&self, tf: &TfRealized, grads: &mut ControlPointGrads, d_density: f64, d_color: Rgb) {
        let (k, w) = (self.index, self.weight);
        grads.density[k] += d_density * (1.0 - w);
        grads.density[k + 1] += d_density * w;
        let mut dw = d_density * (tf.density[k + 1] - tf.density[k]);
        let (c0, c1) = (tf.color[k], tf.color[k + 1]);
        for ch in 0..3 {
            grads.color[k][ch] += d_color[ch] * (1.0 - w);
            grads.color[k + 1][ch] += d_color[ch] * w;
            dw += d_color[ch] * (c1[ch] - c0[ch]);
        }
        grads.position[k] += dw * self.dweight_dleft;
        grads.position[k + 1] += dw * self.dweight_dright;
    }
}

/// Loss gradients with respect to realized control-point values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointGrads {
    pub density: Vec<f64>,
    pub color: Vec<Rgb>,
    pub position: Vec<f64>,
}

impl ControlPointGrads {
    pub fn zeros(control_points: usize) -> Self {
        ControlPointGrads {
            density: vec![0.0; control_points],
            color: vec![[0.0; 3]; control_points],
            position: vec![0.0; control_points],
        }
    }

    pub fn add_assign(&mut self, other: &ControlPointGrads) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        for (a, b) in self.position.iter_mut().zip(&other.position) {
            *a += b;
        }
    }
}
