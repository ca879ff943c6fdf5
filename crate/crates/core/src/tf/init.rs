//! Initialization to a target mean transmittance.
//!
//! Densities start inversely proportional to the value histogram (one bin
//! per control point, one count added to every bin) so that rare values are
//! the most opaque. The seed is then scaled by a single factor α, found by a
//! safeguarded Newton iteration on `ln mean T_N(α) = ln ρ` in `ln α`, with
//! the derivative taken from the renderer adjoint. The scale is capped so the
//! densest control point starts unsaturated.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{color_to_raw, density_to_raw, TfParams, DEFAULT_CONTROL_POINTS, DENSITY_MAX};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{render, render_adjoint_control_points, CameraPose, RenderConfig};
use crate::volume::ScalarField;

const COLOR_INIT_RANGE: (f64, f64) = (0.3, 0.7);
const MIN_SCALE: f64 = 1e-9;
/// The densest seed bin stops at the midpoint of the density map, where its
/// gradient is largest; beyond that the map saturates and training stalls.
const MAX_SCALE: f64 = DENSITY_MAX / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub control_points: usize,
    /// Target mean final transmittance ρ.
    pub target: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { control_points: DEFAULT_CONTROL_POINTS, target: 0.05, tolerance: 0.01, max_iterations: 50 }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.control_points < 2 {
            return Err(Error::invalid("control_points must be at least 2"));
        }
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::invalid("target mean transmittance must lie in (0, 1)"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitReport {
    pub mean_transmittance: f64,
    /// Factor applied to the normalized histogram seed.
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Seeds parameters for `field` and scales densities until the mean final
/// transmittance at `pose` is within tolerance of the target. Missing the
/// tolerance is logged and the closest candidate is returned.
pub fn init_params<R: Rng + ?Sized>(
    field: &ScalarField,
    config: &InitConfig,
    render_config: &RenderConfig,
    pose: &CameraPose,
    rng: &mut R,
) -> Result<(TfParams, InitReport)> {
    config.validate()?;
    let m = config.control_points;
    let hist = field.histogram(m)?;
    let mut shape: Vec<f64> = hist.iter().map(|&h| 1.0 / (h as f64 + 1.0)).collect();
    let peak = shape.iter().cloned().fold(0.0, f64::max);
    shape.iter_mut().for_each(|s| *s /= peak);

    let (lo_c, hi_c) = COLOR_INIT_RANGE;
    let raw_color = (0..m)
        .map(|_| std::array::from_fn(|_| color_to_raw(rng.random_range(lo_c..=hi_c))))
        .collect();
    let mut params = TfParams::new(vec![0.0; m - 1], vec![0.0; m], raw_color)?;

    let probe = Probe { field, render_config, pose, background: Image::new(render_config.width, render_config.height) };
    let ln_target = config.target.ln();
    let mut lo = MIN_SCALE.ln();
    let mut hi = MAX_SCALE.ln();
    let mut u: f64 = 0.0;
    let mut best = (f64::INFINITY, u, 1.0);
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let alpha = u.exp();
        set_scale(&mut params, &shape, alpha);
        let (mean_t, d_alpha) = probe.eval(&params, &shape)?;
        let err = (mean_t - config.target).abs();
        if err < best.0 {
            best = (err, u, mean_t);
        }
        if err <= config.tolerance {
            break;
        }
        // h(u) = ln T(e^u) - ln ρ is decreasing in u
        let h = mean_t.max(f64::MIN_POSITIVE).ln() - ln_target;
        if h > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        if h > 0.0 && u >= MAX_SCALE.ln() - 1e-12 {
            break;
        }
        let dh = alpha * d_alpha / mean_t.max(f64::MIN_POSITIVE);
        let newton = u - h / dh;
        u = if dh < 0.0 && newton > lo && newton < hi {
            newton
        } else if dh < 0.0 && newton >= hi && hi == MAX_SCALE.ln() {
            hi
        } else {
            0.5 * (lo + hi)
        };
    }

    let (err, u_best, mean_t) = best;
    let converged = err <= config.tolerance;
    set_scale(&mut params, &shape, u_best.exp());
    if !converged {
        warn!(
            "initialization reached mean transmittance {mean_t:.4} (target {}, tolerance {}) after {iterations} iterations",
            config.target, config.tolerance
        );
    }
    Ok((params, InitReport { mean_transmittance: mean_t, scale: u_best.exp(), iterations, converged }))
}

fn set_scale(params: &mut TfParams, shape: &[f64], alpha: f64) {
    for (raw, s) in params.raw_density.iter_mut().zip(shape) {
        *raw = density_to_raw(alpha * s);
    }
}

struct Probe<'a> {
    field: &'a ScalarField,
    render_config: &'a RenderConfig,
    pose: &'a CameraPose,
    background: Image,
}

impl Probe<'_> {
    /// Mean transmittance over hit rays and its derivative with respect to
    /// the density scale.
    fn eval(&self, params: &TfParams, shape: &[f64]) -> Result<(f64, f64)> {
        let tf = params.realize(self.field.value_min(), self.field.value_max())?;
        let out = render(self.field, &tf, self.pose, self.render_config, &self.background)?;
        let hits = out.hit_count();
        if hits == 0 {
            return Err(Error::Degenerate("no ray from the initialization view hits the volume".into()));
        }
        let d_trans: Vec<f64> = out.hit.iter().map(|&h| if h { 1.0 / hits as f64 } else { 0.0 }).collect();
        let zero = Image::new(self.render_config.width, self.render_config.height);
        let grads = render_adjoint_control_points(&tf, &out, &self.background, &zero, Some(&d_trans))?;
        let d_alpha = grads.density.iter().zip(shape).map(|(g, s)| g * s).sum();
        Ok((out.mean_transmittance(), d_alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::child_rng;
    use crate::tf::{map_color, map_density};

    fn blob() -> ScalarField {
        ScalarField::from_fn([12, 12, 12], [1.0; 3], |x, y, z| {
            let d = [x, y, z].map(|v| v as f64 - 5.5);
            (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 12.0).exp()
        })
        .unwrap()
    }

    fn run(target: f64) -> (TfParams, InitReport) {
        let field = blob();
        let rc = RenderConfig::for_field(&field, 24, 24);
        let cfg = InitConfig { control_points: 8, target, ..InitConfig::default() };
        init_params(&field, &cfg, &rc, &CameraPose::initial(field.bounding_radius()), &mut child_rng(1, 0, 0)).unwrap()
    }

    #[test]
    fn reaches_target() {
        let (params, report) = run(0.05);
        assert!(report.converged, "{report:?}");
        assert!((report.mean_transmittance - 0.05).abs() <= 0.01);
        for c in &params.raw_color {
            for &r in c {
                let v = map_color(r);
                assert!((0.3 - 1e-12..=0.7 + 1e-12).contains(&v));
            }
        }
    }

    #[test]
    fn near_transparent_target() {
        let (params, report) = run(0.99);
        assert!(report.converged, "{report:?}");
        assert!(params.raw_density.iter().all(|&r| map_density(r) < 1.0));
    }

    #[test]
    fn rare_bins_are_densest() {
        let (params, _) = run(0.5);
        let field = blob();
        let hist = field.histogram(8).unwrap();
        let (rare, _) = hist.iter().enumerate().min_by_key(|(_, &h)| h).unwrap();
        let d: Vec<f64> = params.raw_density.iter().map(|&r| map_density(r)).collect();
        let max = d.iter().cloned().fold(0.0, f64::max);
        assert!((d[rare] - max).abs() <= 1e-9 * max);
    }

    #[test]
    fn rejects_bad_config() {
        let field = blob();
        let rc = RenderConfig::for_field(&field, 4, 4);
        let pose = CameraPose::initial(field.bounding_radius());
        for cfg in [
            InitConfig { control_points: 1, ..InitConfig::default() },
            InitConfig { target: 1.0, ..InitConfig::default() },
        ] {
            assert!(init_params(&field, &cfg, &rc, &pose, &mut child_rng(0, 0, 0)).is_err());
        }
    }
}
