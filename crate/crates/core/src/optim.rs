//! The optimization loop: heavy-ball SGD with linear learning-rate
//! annealing over multi-view renders.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::augment::{child_rng, generate_background, sample_background, sample_pose, BackgroundMode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::{beta_prior_loss, tf_reg_loss, BackgroundPhase, ObjectiveConfig};
use crate::render::{render, render_adjoint, CameraPose, RenderConfig};
use crate::scorer::{sample_negatives, PromptSet, Scorer, ViewContext};
use crate::tf::{init_params, InitConfig, InitReport, TfParams, TfRealized};
use crate::volume::ScalarField;

/// Stream 0 of each step feeds negative sampling; view `v` uses `v + 1`.
const NEGATIVES_STREAM: u64 = 0;
/// Stream for the initialization colors.
pub const INIT_STREAM: u64 = u64::MAX;
/// Gray level for snapshot renders.
pub const SNAPSHOT_GRAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub views_per_step: usize,
    pub seed: u64,
    /// Render a snapshot at the initial view every this many steps; 0 disables.
    pub snapshot_interval: usize,
    pub background_modes: Vec<BackgroundMode>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 10.0,
            momentum: 0.75,
            steps: 300,
            views_per_step: 3,
            seed: 0,
            snapshot_interval: 0,
            background_modes: BackgroundMode::AUGMENTED.to_vec(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.views_per_step == 0 {
            return Err(Error::invalid("views_per_step must be at least 1"));
        }
        if self.background_modes.is_empty() {
            return Err(Error::invalid("background_modes must not be empty"));
        }
        Ok(())
    }

    /// Learning rate at 1-based step `i`: `η₀ (1 - (i - 1) / S)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * (1.0 - (step as f64 - 1.0) / self.steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Number of steps taken so far, skipped ones included.
    pub step: usize,
    pub params: TfParams,
    pub momentum: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: TfParams) -> Self {
        let momentum = vec![0.0; params.len()];
        OptimizerState { step: 0, params, momentum }
    }

    /// `m ← μm + g; φ ← φ − η m`.
    pub fn apply(&mut self, grad: &[f64], lr: f64, mu: f64) -> Result<()> {
        if grad.len() != self.momentum.len() {
            return Err(Error::invalid("gradient length does not match the parameters"));
        }
        let mut flat = self.params.to_flat();
        for ((p, m), g) in flat.iter_mut().zip(&mut self.momentum).zip(grad) {
            *m = mu * *m + g;
            *p -= lr * *m;
        }
        self.params = TfParams::from_flat(self.params.control_points(), &flat)?;
        Ok(())
    }
}

/// Prompts plus the pool that per-step negatives are drawn from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prompts {
    pub positive: String,
    pub user_negatives: Vec<String>,
    pub pool: Vec<String>,
}

/// Everything a run needs besides the volume and the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub init: InitConfig,
    pub render: RenderConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn new(field: &ScalarField, image_size: usize) -> Self {
        TrainConfig {
            init: InitConfig::default(),
            render: RenderConfig::for_field(field, image_size, image_size),
            objective: ObjectiveConfig::default(),
            optim: OptimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.init.validate()?;
        self.render.validate()?;
        self.objective.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub pose: CameraPose,
    pub background_mode: BackgroundMode,
    pub background: Image,
}

/// Pose and background for view `view` of 1-based `step`.
pub fn sample_view(config: &TrainConfig, radius: f64, step: usize, view: usize) -> ViewSample {
    let mut rng = child_rng(config.optim.seed, step as u64, view as u64 + 1);
    let pose = sample_pose(&mut rng, radius);
    let (w, h) = (config.render.width, config.render.height);
    let (background_mode, background) = match config.objective.schedule(step).background {
        BackgroundPhase::Gray => (BackgroundMode::ConstantGray, generate_background(BackgroundMode::ConstantGray, &mut rng, h, w)),
        BackgroundPhase::Augmented => sample_background(&config.optim.background_modes, &mut rng, h, w),
    };
    ViewSample { pose, background_mode, background }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewLog {
    pub pose: CameraPose,
    pub background: BackgroundMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub l_clip: f64,
    pub l_density: f64,
    pub l_reg: f64,
    pub mean_transmittance: f64,
    pub skipped: bool,
    pub views: Vec<ViewLog>,
    /// Averaged gradient; empty when the step was skipped.
    pub gradient: Vec<f64>,
}

/// Loss terms and flat gradient for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGradient {
    pub l_clip: f64,
    pub l_density: f64,
    pub l_reg: f64,
    pub mean_transmittance: f64,
    pub gradient: Vec<f64>,
}

/// Renders, scores, and differentiates a single view.
pub fn view_gradient(
    field: &ScalarField,
    params: &TfParams,
    config: &TrainConfig,
    scorer: &mut dyn Scorer,
    ctx: &ViewContext<'_>,
) -> Result<ViewGradient> {
    let tf = params.realize(field.value_min(), field.value_max())?;
    let out = render(field, &tf, &ctx.pose, &config.render, ctx.background)?;
    let score = scorer.score(ctx, &out.image)?;
    score.validate(&out.image)?;

    let obj = &config.objective;
    let (l_density, d_trans) = if obj.schedule(ctx.step).prior_active {
        let (l, mut g) = beta_prior_loss(&out.transmittance, obj.beta_a, obj.transmittance_eps);
        g.iter_mut().for_each(|v| *v *= obj.density_weight);
        (l, Some(g))
    } else {
        (0.0, None)
    };
    let mut gradient = render_adjoint(params, &tf, &out, ctx.background, &score.dloss_dimage, d_trans.as_deref())?;
    let (l_reg, g_reg) = tf_reg_loss(params, obj.lambda_density, obj.lambda_color);
    for (g, r) in gradient.iter_mut().zip(g_reg) {
        *g += r;
    }
    Ok(ViewGradient { l_clip: score.loss, l_density, l_reg, mean_transmittance: out.mean_transmittance(), gradient })
}

/// One optimization step. Scorer failures and non-finite values skip the
/// update and leave parameters and momentum untouched.
pub fn step(
    state: &mut OptimizerState,
    field: &ScalarField,
    config: &TrainConfig,
    prompts: &Prompts,
    scorer: &mut dyn Scorer,
) -> Result<StepReport> {
    let i = state.step + 1;
    let lr = config.optim.learning_rate_at(i);
    let radius = field.bounding_radius();
    let pool_negatives = if prompts.pool.is_empty() {
        Vec::new()
    } else {
        let mut rng = child_rng(config.optim.seed, i as u64, NEGATIVES_STREAM);
        sample_negatives(&prompts.pool, config.objective.negatives_per_step, &mut rng)?
    };
    let prompt_set = PromptSet {
        positive: prompts.positive.clone(),
        user_negatives: prompts.user_negatives.clone(),
        pool_negatives,
    };

    let views: Vec<ViewSample> = (0..config.optim.views_per_step).map(|v| sample_view(config, radius, i, v)).collect();
    let mut report = StepReport {
        step: i,
        lr,
        l_clip: 0.0,
        l_density: 0.0,
        l_reg: 0.0,
        mean_transmittance: 0.0,
        skipped: false,
        views: views.iter().map(|v| ViewLog { pose: v.pose, background: v.background_mode }).collect(),
        gradient: Vec::new(),
    };

    let n = views.len() as f64;
    let mut sum = vec![0.0; state.params.len()];
    let mut failure = None;
    for (v, sample) in views.iter().enumerate() {
        let ctx = ViewContext { step: i, view: v, pose: sample.pose, background: &sample.background, prompts: &prompt_set };
        match view_gradient(field, &state.params, config, scorer, &ctx) {
            Ok(vg) => {
                report.l_clip += vg.l_clip / n;
                report.l_density += vg.l_density / n;
                report.l_reg += vg.l_reg / n;
                report.mean_transmittance += vg.mean_transmittance / n;
                for (s, g) in sum.iter_mut().zip(&vg.gradient) {
                    *s += g;
                }
            }
            Err(e @ (Error::Scorer(_) | Error::Protocol { .. } | Error::NonFinite(_) | Error::Io(_))) => {
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    state.step = i;

    let gradient: Vec<f64> = sum.iter().map(|s| s / n).collect();
    if failure.is_none() && gradient.iter().any(|g| !g.is_finite()) {
        failure = Some(Error::NonFinite("gradient".into()));
    }
    match failure {
        Some(e) => {
            warn!("step {i} skipped: {e}");
            report.skipped = true;
        }
        None => {
            state.apply(&gradient, lr, config.optim.momentum)?;
            report.gradient = gradient;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<StepReport>,
}

impl TrainingLog {
    pub fn header(views: usize) -> Vec<String> {
        let mut cols: Vec<String> =
            ["step", "lr", "l_clip", "l_density", "l_reg", "mean_T_N", "skipped"].iter().map(|s| s.to_string()).collect();
        for v in 0..views {
            for field in ["yaw", "pitch", "distance", "background"] {
                cols.push(format!("view{v}_{field}"));
            }
        }
        cols
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let views = self.rows.first().map_or(0, |r| r.views.len());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::header(views))?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                r.lr.to_string(),
                r.l_clip.to_string(),
                r.l_density.to_string(),
                r.l_reg.to_string(),
                r.mean_transmittance.to_string(),
                u8::from(r.skipped).to_string(),
            ];
            for v in &r.views {
                rec.push(v.pose.yaw.to_string());
                rec.push(v.pose.pitch.to_string());
                rec.push(v.pose.distance.to_string());
                rec.push(v.background.name().to_string());
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: TfParams,
    pub tf: TfRealized,
    pub init: InitReport,
    pub log: TrainingLog,
}

/// Renders `tf` at the initial view over the snapshot gray.
pub fn snapshot(field: &ScalarField, tf: &TfRealized, render_config: &RenderConfig) -> Result<Image> {
    let bg = Image::filled(render_config.width, render_config.height, [SNAPSHOT_GRAY; 3]);
    Ok(render(field, tf, &CameraPose::initial(field.bounding_radius()), render_config, &bg)?.image)
}

/// Initializes and runs all steps. Snapshots go to `snapshot_dir` when set
/// and the interval is nonzero.
pub fn run(
    field: &ScalarField,
    config: &TrainConfig,
    prompts: &Prompts,
    scorer: &mut dyn Scorer,
    snapshot_dir: Option<&Path>,
) -> Result<RunOutput> {
    config.validate()?;
    let pose0 = CameraPose::initial(field.bounding_radius());
    let mut rng = child_rng(config.optim.seed, 0, INIT_STREAM);
    let (params, init) = init_params(field, &config.init, &config.render, &pose0, &mut rng)?;
    info!(
        "initialized {} control points: mean T_N {:.4} after {} iterations",
        params.control_points(),
        init.mean_transmittance,
        init.iterations
    );
    let mut state = OptimizerState::new(params);
    let mut log = TrainingLog::default();
    let interval = config.optim.snapshot_interval;
    if let Some(dir) = snapshot_dir.filter(|_| interval > 0) {
        fs::create_dir_all(dir)?;
    }
    for _ in 0..config.optim.steps {
        let report = step(&mut state, field, config, prompts, scorer)?;
        info!(
            "step {:>4} lr {:.4} l_clip {:.6} l_density {:.4} l_reg {:.6} T {:.4}{}",
            report.step,
            report.lr,
            report.l_clip,
            report.l_density,
            report.l_reg,
            report.mean_transmittance,
            if report.skipped { " (skipped)" } else { "" }
        );
        if let Some(dir) = snapshot_dir {
            if interval > 0 && report.step % interval == 0 {
                let tf = state.params.realize(field.value_min(), field.value_max())?;
                snapshot(field, &tf, &config.render)?.save_png(dir.join(format!("step_{:04}.png", report.step)))?;
            }
        }
        log.rows.push(StepReport { gradient: Vec::new(), ..report });
    }
    let tf = state.params.realize(field.value_min(), field.value_max())?;
    Ok(RunOutput { params: state.params, tf, init, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_sequence_is_linear_and_positive() {
        let cfg = OptimConfig { steps: 4, learning_rate: 8.0, ..OptimConfig::default() };
        let lrs: Vec<f64> = (1..=4).map(|i| cfg.learning_rate_at(i)).collect();
        assert_eq!(lrs, vec![8.0, 6.0, 4.0, 2.0]);
        let cfg = OptimConfig::default();
        assert_eq!(cfg.learning_rate_at(1), 10.0);
        assert!((cfg.learning_rate_at(300) - 10.0 / 300.0).abs() < 1e-12);
    }

    #[test]
    fn heavy_ball_update() {
        let mut state = OptimizerState::new(TfParams::uniform(2).unwrap());
        let g: Vec<f64> = (0..9).map(|k| k as f64).collect();
        state.apply(&g, 0.5, 0.75).unwrap();
        state.apply(&g, 0.5, 0.75).unwrap();
        let flat = state.params.to_flat();
        for (k, p) in flat.iter().enumerate() {
            // m1 = g, m2 = 1.75 g, φ = -0.5 (g + 1.75 g)
            assert!((p + 0.5 * 2.75 * k as f64).abs() < 1e-12);
            assert!((state.momentum[k] - 1.75 * k as f64).abs() < 1e-12);
        }
        assert!(state.apply(&[1.0], 0.1, 0.5).is_err());
    }

    #[test]
    fn log_header_layout() {
        let h = TrainingLog::header(2);
        assert_eq!(&h[..7], &["step", "lr", "l_clip", "l_density", "l_reg", "mean_T_N", "skipped"]);
        assert_eq!(h.len(), 7 + 8);
        assert_eq!(h[14], "view1_background");
    }
}
