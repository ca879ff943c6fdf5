//! Run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tfgrad::augment::BackgroundMode;
use tfgrad::objective::ObjectiveConfig;
use tfgrad::optim::{OptimConfig, TrainConfig};
use tfgrad::render::{RenderConfig, DEFAULT_FOV_Y_DEGREES, DEFAULT_IMAGE_SIZE};
use tfgrad::tf::{InitConfig, DEFAULT_CONTROL_POINTS};
use tfgrad::volume::{Dtype, ScalarField, VolumeMeta};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub volume: VolumeSection,
    #[serde(default)]
    pub prompts: PromptSection,
    #[serde(default)]
    pub tf: TfSection,
    #[serde(default)]
    pub render: RenderSection,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub scorer: ScorerSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSection {
    pub path: PathBuf,
    /// Taken from a sidecar or the file name when absent.
    pub dims: Option<[usize; 3]>,
    pub dtype: Option<Dtype>,
    pub spacing: Option<[f64; 3]>,
}

impl VolumeSection {
    pub fn validate(&self) -> Result<(), CliError> {
        require_file("volume.path", &self.path)?;
        if self.dims.is_some() != self.dtype.is_some() {
            return Err(invalid("volume", "dims and dtype must be given together"));
        }
        if let Some(dims) = self.dims {
            if dims.contains(&0) {
                return Err(invalid("volume.dims", "every dimension must be positive"));
            }
        }
        if let Some(sp) = self.spacing {
            if sp.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(invalid("volume.spacing", "spacing must be positive"));
            }
        }
        Ok(())
    }

    /// Explicit dims/dtype, else the sidecar, else the file name.
    pub fn meta(&self) -> Result<VolumeMeta, CliError> {
        let mut meta = match (self.dims, self.dtype) {
            (Some(dims), Some(dtype)) => VolumeMeta::new(dims, dtype),
            _ => VolumeMeta::resolve(&self.path).map_err(|e| invalid("volume", e.to_string()))?,
        };
        if let Some(sp) = self.spacing {
            meta.spacing = sp;
        }
        meta.validate().map_err(|e| invalid("volume", e.to_string()))?;
        Ok(meta)
    }

    pub fn load(&self) -> Result<ScalarField, CliError> {
        self.validate()?;
        let meta = self.meta()?;
        ScalarField::load_raw(&self.path, &meta).map_err(|e| match e {
            tfgrad::Error::Format(msg) => invalid("volume.path", msg),
            e => e.into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub positive: String,
    pub negatives: Vec<String>,
    /// One prompt per line; negatives are sampled from it every step.
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfSection {
    pub control_points: usize,
    pub target_transmittance: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for TfSection {
    fn default() -> Self {
        let init = InitConfig::default();
        TfSection {
            control_points: DEFAULT_CONTROL_POINTS,
            target_transmittance: init.target,
            tolerance: init.tolerance,
            max_iterations: init.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub image_size: usize,
    /// Half the smallest voxel spacing when absent.
    pub step_size: Option<f64>,
    pub max_steps: Option<usize>,
    pub fov_y_degrees: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection { image_size: DEFAULT_IMAGE_SIZE, step_size: None, max_steps: None, fov_y_degrees: DEFAULT_FOV_Y_DEGREES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub views_per_step: usize,
    pub snapshot_interval: usize,
    pub background_modes: Vec<BackgroundMode>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimConfig::default();
        OptimizerSection {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            steps: d.steps,
            views_per_step: d.views_per_step,
            snapshot_interval: d.snapshot_interval,
            background_modes: d.background_modes,
        }
    }
}

/// Exactly one of the three must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    /// Ground-truth transfer function rendered at every sampled view.
    pub reference_tf: Option<PathBuf>,
    /// Fixed reference image (PNG, `image_size` square).
    pub reference_image: Option<PathBuf>,
    /// `tcp://host:port` or `exec:<command>`.
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerChoice {
    ReferenceTf(PathBuf),
    ReferenceImage(PathBuf),
    Endpoint(String),
}

pub(crate) fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Validation { field: field.to_string(), message: message.into() }
}

fn require_file(field: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(field, format!("file `{}` does not exist", path.display())))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| invalid("config", format!("cannot read `{}`: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.volume.path);
        if let Some(p) = &mut self.prompts.pool {
            fix(p);
        }
        if let Some(p) = &mut self.scorer.reference_tf {
            fix(p);
        }
        if let Some(p) = &mut self.scorer.reference_image {
            fix(p);
        }
    }

    pub fn scorer_choice(&self) -> Result<ScorerChoice, CliError> {
        let s = &self.scorer;
        let set = [s.reference_tf.is_some(), s.reference_image.is_some(), s.endpoint.is_some()];
        match set.iter().filter(|&&b| b).count() {
            1 => {}
            0 => return Err(invalid("scorer", "set one of reference_tf, reference_image, endpoint")),
            _ => return Err(invalid("scorer", "only one of reference_tf, reference_image, endpoint may be set")),
        }
        Ok(if let Some(p) = &s.reference_tf {
            ScorerChoice::ReferenceTf(p.clone())
        } else if let Some(p) = &s.reference_image {
            ScorerChoice::ReferenceImage(p.clone())
        } else {
            ScorerChoice::Endpoint(s.endpoint.clone().unwrap_or_default())
        })
    }

    /// Checks every field that can be checked without loading the volume.
    pub fn validate(&self) -> Result<(), CliError> {
        self.volume.validate()?;
        let choice = self.scorer_choice()?;
        match &choice {
            ScorerChoice::ReferenceTf(p) => require_file("scorer.reference_tf", p)?,
            ScorerChoice::ReferenceImage(p) => require_file("scorer.reference_image", p)?,
            ScorerChoice::Endpoint(e) => {
                if !(e.starts_with("tcp://") || e.starts_with("exec:")) {
                    return Err(invalid("scorer.endpoint", "must start with tcp:// or exec:"));
                }
                if self.prompts.positive.trim().is_empty() {
                    return Err(invalid("prompts.positive", "a remote scorer needs a positive prompt"));
                }
                if self.prompts.pool.is_none() && self.prompts.negatives.is_empty() {
                    return Err(invalid("prompts", "a remote scorer needs a pool or at least one negative prompt"));
                }
            }
        }
        if let Some(pool) = &self.prompts.pool {
            require_file("prompts.pool", pool)?;
        }
        if self.tf.control_points < 2 {
            return Err(invalid("tf.control_points", "must be at least 2"));
        }
        if !(self.tf.target_transmittance > 0.0 && self.tf.target_transmittance < 1.0) {
            return Err(invalid("tf.target_transmittance", "must lie in (0, 1)"));
        }
        if !(self.tf.tolerance > 0.0) {
            return Err(invalid("tf.tolerance", "must be positive"));
        }
        if self.render.image_size == 0 {
            return Err(invalid("render.image_size", "must be positive"));
        }
        if let Some(d) = self.render.step_size {
            if !(d.is_finite() && d > 0.0) {
                return Err(invalid("render.step_size", "must be positive"));
            }
        }
        if self.render.max_steps == Some(0) {
            return Err(invalid("render.max_steps", "must be positive"));
        }
        if !(self.render.fov_y_degrees > 0.0 && self.render.fov_y_degrees < 180.0) {
            return Err(invalid("render.fov_y_degrees", "must lie in (0, 180)"));
        }
        self.objective.validate().map_err(|e| invalid("objective", e.to_string()))?;
        if self.objective.negatives_per_step == 0 && self.prompts.pool.is_some() {
            return Err(invalid("objective.negatives_per_step", "must be at least 1 when a pool is set"));
        }
        self.optim_config().validate().map_err(|e| invalid("optimizer", e.to_string()))?;
        Ok(())
    }

    pub fn optim_config(&self) -> OptimConfig {
        let o = &self.optimizer;
        OptimConfig {
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            steps: o.steps,
            views_per_step: o.views_per_step,
            seed: self.seed,
            snapshot_interval: o.snapshot_interval,
            background_modes: o.background_modes.clone(),
        }
    }

    pub fn render_config(&self, field: &ScalarField) -> RenderConfig {
        let n = self.render.image_size;
        let mut rc = RenderConfig::for_field(field, n, n);
        if let Some(d) = self.render.step_size {
            rc.step_size = d;
            rc.max_steps = (2.0 * field.bounding_radius() / d).ceil() as usize + 2;
        }
        if let Some(m) = self.render.max_steps {
            rc.max_steps = m;
        }
        rc.fov_y_degrees = self.render.fov_y_degrees;
        rc
    }

    pub fn train_config(&self, field: &ScalarField) -> TrainConfig {
        TrainConfig {
            init: InitConfig {
                control_points: self.tf.control_points,
                target: self.tf.target_transmittance,
                tolerance: self.tf.tolerance,
                max_iterations: self.tf.max_iterations,
            },
            render: self.render_config(field),
            objective: self.objective,
            optim: self.optim_config(),
        }
    }

    /// Copy with every optional value materialized and absolute paths.
    pub fn resolved(&self, field: &ScalarField) -> Result<Self, CliError> {
        let mut out = self.clone();
        let meta = self.volume.meta()?;
        out.volume.dims = Some(meta.dims);
        out.volume.dtype = Some(meta.dtype);
        out.volume.spacing = Some(meta.spacing);
        let rc = self.render_config(field);
        out.render.step_size = Some(rc.step_size);
        out.render.max_steps = Some(rc.max_steps);
        let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        out.volume.path = abs(&out.volume.path);
        out.output_dir = abs(&out.output_dir);
        out.prompts.pool = out.prompts.pool.as_deref().map(abs);
        out.scorer.reference_tf = out.scorer.reference_tf.as_deref().map(abs);
        out.scorer.reference_image = out.scorer.reference_image.as_deref().map(abs);
        Ok(out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
