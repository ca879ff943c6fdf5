//! Emission-absorption ray marching with a reverse-mode adjoint.
//!
//! Each ray is clipped to the volume box and marched with fixed steps of
//! length δ, sampling at step midpoints; a final partial step covers the
//! remainder of the segment. With `τ_n = σ_n · len_n` and `e_n = exp(-τ_n)`:
//!
//! ```text
//! T_0 = 1,  T_n = T_{n-1} · e_n
//! C   = Σ_n T_{n-1} · (1 - e_n) · c_n
//! I   = C + T_N · B
//! ```
//!
//! The adjoint replays each ray from the cached scalar samples, so memory
//! scales with the number of samples and not with samples × parameters.

mod camera;

pub use camera::{clip_to_box, Camera, CameraPose, RaySegment, PITCH_LIMIT, WORLD_UP};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tf::{ControlPointGrads, Rgb, TfParams, TfRealized};
use crate::volume::ScalarField;

pub const DEFAULT_IMAGE_SIZE: usize = 224;
/// Fits the bounding sphere at the closest orbit distance (2r).
pub const DEFAULT_FOV_Y_DEGREES: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Step length δ in world units.
    pub step_size: f64,
    /// Upper bound on steps per ray.
    pub max_steps: usize,
    pub fov_y_degrees: f64,
}

impl RenderConfig {
    /// Defaults for `field`: δ = half the smallest voxel spacing, and enough
    /// steps to cross the bounding sphere.
    pub fn for_field(field: &ScalarField, width: usize, height: usize) -> Self {
        let step_size = 0.5 * field.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        let max_steps = (2.0 * field.bounding_radius() / step_size).ceil() as usize + 2;
        RenderConfig { width, height, step_size, max_steps, fov_y_degrees: DEFAULT_FOV_Y_DEGREES }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be positive"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Steps taken by one ray; all but the last have length δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRecord {
    pub offset: usize,
    pub count: usize,
    pub last_len: f64,
}

/// Scalar samples along every ray, kept for the adjoint pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MarchCache {
    pub step_size: f64,
    pub rays: Vec<RayRecord>,
    pub scalars: Vec<f64>,
}

impl MarchCache {
    fn ray_steps(&self, ray: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let rec = self.rays[ray];
        let step = self.step_size;
        self.scalars[rec.offset..rec.offset + rec.count]
            .iter()
            .enumerate()
            .map(move |(n, &s)| (s, if n + 1 == rec.count { rec.last_len } else { step }))
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
    pub image: Image,
    /// Whether each pixel's ray intersects the volume box.
    pub hit: Vec<bool>,
    pub cache: Option<MarchCache>,
}

impl RenderOutput {
    /// Mean final transmittance over the rays that intersect the volume.
    pub fn mean_transmittance(&self) -> f64 {
        let (sum, n) = self
            .transmittance
            .iter()
            .zip(&self.hit)
            .filter(|(_, &h)| h)
            .fold((0.0, 0usize), |(s, n), (t, _)| (s + t, n + 1));
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    pub fn hit_count(&self) -> usize {
        self.hit.iter().filter(|&&h| h).count()
    }

    pub fn discard_cache(mut self) -> Self {
        self.cache = None;
        self
    }
}

/// One ray per pixel, clipped to the volume box; misses are `None`.
pub fn generate_rays(field: &ScalarField, pose: &CameraPose, config: &RenderConfig) -> Result<Vec<Option<RaySegment>>> {
    config.validate()?;
    let camera = Camera::new(pose, config.width, config.height, config.fov_y_degrees)?;
    let (lo, hi) = field.bounds();
    let mut rays = Vec::with_capacity(config.pixel_count());
    for y in 0..config.height {
        for x in 0..config.width {
            rays.push(clip_to_box(camera.eye(), camera.direction(x, y), lo, hi));
        }
    }
    Ok(rays)
}

/// Step layout for a segment: `(full steps, trailing partial length)`.
fn step_layout(length: f64, step: f64, max_steps: usize) -> (usize, Option<f64>) {
    let full = (length / step).floor() as usize;
    if full >= max_steps {
        return (max_steps, None);
    }
    let rem = length - full as f64 * step;
    if rem > 1e-9 * step && full < max_steps {
        (full, Some(rem))
    } else {
        (full, None)
    }
}

fn march_ray(field: &ScalarField, ray: &RaySegment, config: &RenderConfig, scalars: &mut Vec<f64>) -> RayRecord {
    let offset = scalars.len();
    let step = config.step_size;
    let (full, partial) = step_layout(ray.length(), step, config.max_steps);
    for n in 0..full {
        scalars.push(field.sample(ray.at(ray.t_entry + (n as f64 + 0.5) * step)));
    }
    let last_len = match partial {
        Some(rem) => {
            scalars.push(field.sample(ray.at(ray.t_entry + full as f64 * step + 0.5 * rem)));
            rem
        }
        None => step,
    };
    RayRecord { offset, count: scalars.len() - offset, last_len }
}

/// Front-to-back compositing of one ray's samples: `(C, T_N)`.
fn composite<'a>(tf: &TfRealized, steps: impl Iterator<Item = (f64, f64)> + 'a) -> (Rgb, f64) {
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    for (s, len) in steps {
        let (sigma, c) = tf.eval(s);
        let e = (-sigma * len).exp();
        let w = trans * (1.0 - e);
        for ch in 0..3 {
            color[ch] += w * c[ch];
        }
        trans *= e;
    }
    (color, trans)
}

struct RowForward {
    color: Vec<f64>,
    trans: Vec<f64>,
    hit: Vec<bool>,
    rays: Vec<RayRecord>,
    scalars: Vec<f64>,
}

pub fn render(
    field: &ScalarField,
    tf: &TfRealized,
    pose: &CameraPose,
    config: &RenderConfig,
    background: &Image,
) -> Result<RenderOutput> {
    config.validate()?;
    if background.width() != config.width || background.height() != config.height {
        return Err(Error::invalid(format!(
            "background is {}x{}, render target is {}x{}",
            background.width(),
            background.height(),
            config.width,
            config.height
        )));
    }
    let camera = Camera::new(pose, config.width, config.height, config.fov_y_degrees)?;
    let (lo, hi) = field.bounds();
    let rows: Vec<RowForward> = (0..config.height)
        .into_par_iter()
        .map(|y| {
            let mut row = RowForward {
                color: Vec::with_capacity(3 * config.width),
                trans: Vec::with_capacity(config.width),
                hit: Vec::with_capacity(config.width),
                rays: Vec::with_capacity(config.width),
                scalars: Vec::new(),
            };
            for x in 0..config.width {
                let seg = clip_to_box(camera.eye(), camera.direction(x, y), lo, hi);
                let rec = match &seg {
                    Some(ray) => march_ray(field, ray, config, &mut row.scalars),
                    None => RayRecord { offset: row.scalars.len(), count: 0, last_len: config.step_size },
                };
                let steps = row.scalars[rec.offset..rec.offset + rec.count]
                    .iter()
                    .enumerate()
                    .map(|(n, &s)| (s, if n + 1 == rec.count { rec.last_len } else { config.step_size }));
                let (c, t) = composite(tf, steps);
                row.color.extend_from_slice(&c);
                row.trans.push(t);
                row.hit.push(seg.is_some());
                row.rays.push(rec);
            }
            row
        })
        .collect();

    let n = config.pixel_count();
    let mut color = Vec::with_capacity(3 * n);
    let mut transmittance = Vec::with_capacity(n);
    let mut hit = Vec::with_capacity(n);
    let mut rays = Vec::with_capacity(n);
    let mut scalars = Vec::with_capacity(rows.iter().map(|r| r.scalars.len()).sum());
    for row in rows {
        let base = scalars.len();
        rays.extend(row.rays.into_iter().map(|r| RayRecord { offset: r.offset + base, ..r }));
        scalars.extend(row.scalars);
        color.extend(row.color);
        transmittance.extend(row.trans);
        hit.extend(row.hit);
    }

    let mut image = background.clone();
    for (p, px) in image.data_mut().chunks_exact_mut(3).enumerate() {
        for ch in 0..3 {
            px[ch] = color[3 * p + ch] + transmittance[p] * px[ch];
        }
    }
    Ok(RenderOutput {
        color: Image::from_vec(config.width, config.height, color)?,
        transmittance,
        image,
        hit,
        cache: Some(MarchCache { step_size: config.step_size, rays, scalars }),
    })
}

/// Reverse pass to control-point gradients. `d_image` is dL/dI; the
/// optional `d_transmittance` adds a direct dL/dT_N per pixel (used by
/// transmittance priors).
pub fn render_adjoint_control_points(
    tf: &TfRealized,
    output: &RenderOutput,
    background: &Image,
    d_image: &Image,
    d_transmittance: Option<&[f64]>,
) -> Result<ControlPointGrads> {
    let cache = output.cache.as_ref().ok_or(Error::MissingCache)?;
    let (w, h) = (output.image.width(), output.image.height());
    if !d_image.same_shape(&output.image) || !background.same_shape(&output.image) {
        return Err(Error::invalid("adjoint inputs do not match the rendered image shape"));
    }
    if let Some(dt) = d_transmittance {
        if dt.len() != w * h {
            return Err(Error::invalid("transmittance adjoint has the wrong length"));
        }
    }
    let m = tf.control_points();

    let partials: Vec<ControlPointGrads> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut grads = ControlPointGrads::zeros(m);
            let mut steps: Vec<StepState> = Vec::new();
            for x in 0..w {
                let p = y * w + x;
                if cache.rays[p].count == 0 {
                    continue;
                }
                let g_color = d_image.pixel(x, y);
                let bg = background.pixel(x, y);
                let mut g_trans = (0..3).map(|ch| g_color[ch] * bg[ch]).sum::<f64>();
                if let Some(dt) = d_transmittance {
                    g_trans += dt[p];
                }
                if g_trans == 0.0 && g_color == [0.0; 3] {
                    continue;
                }
                ray_adjoint(tf, cache.ray_steps(p), g_color, g_trans, &mut steps, &mut grads);
            }
            grads
        })
        .collect();

    let mut total = ControlPointGrads::zeros(m);
    for g in &partials {
        total.add_assign(g);
    }
    Ok(total)
}

/// Reverse pass all the way to the flat parameter vector of `params`.
pub fn render_adjoint(
    params: &TfParams,
    tf: &TfRealized,
    output: &RenderOutput,
    background: &Image,
    d_image: &Image,
    d_transmittance: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let grads = render_adjoint_control_points(tf, output, background, d_image, d_transmittance)?;
    Ok(params.backprop(tf, &grads))
}

struct StepState {
    seg: crate::tf::Segment,
    len: f64,
    e: f64,
    t_before: f64,
}

fn ray_adjoint(
    tf: &TfRealized,
    samples: impl Iterator<Item = (f64, f64)>,
    g_color: Rgb,
    g_trans: f64,
    steps: &mut Vec<StepState>,
    grads: &mut ControlPointGrads,
) {
    steps.clear();
    let mut trans = 1.0;
    for (s, len) in samples {
        let seg = tf.segment(s);
        let e = (-seg.density * len).exp();
        steps.push(StepState { seg, len, e, t_before: trans });
        trans *= e;
    }
    let t_final = trans;

    // suffix = Σ_{m>n} T_{m-1}(1 - e_m) c_m, built back to front.
    let mut suffix = [0.0; 3];
    for st in steps.iter().rev() {
        let t_after = st.t_before * st.e;
        let alpha_w = st.t_before * (1.0 - st.e);
        let mut g_tau = -g_trans * t_final;
        for ch in 0..3 {
            g_tau += g_color[ch] * (t_after * st.seg.color[ch] - suffix[ch]);
        }
        let d_color = [g_color[0] * alpha_w, g_color[1] * alpha_w, g_color[2] * alpha_w];
        st.seg.accumulate(tf, grads, g_tau * st.len, d_color);
        for ch in 0..3 {
            suffix[ch] += alpha_w * st.seg.color[ch];
        }
    }
}
