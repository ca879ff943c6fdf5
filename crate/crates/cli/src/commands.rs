use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use tfgrad::augment::child_rng;
use tfgrad::image::Image;
use tfgrad::optim::{self, Prompts, INIT_STREAM, SNAPSHOT_GRAY};
use tfgrad::render::{render, CameraPose, RenderConfig};
use tfgrad::scorer::{load_prompt_pool, ImageReferenceScorer, ReferenceTfScorer, RemoteScorer, Scorer};
use tfgrad::synthetic::{bonsai_like, two_shells, two_shells_tf};
use tfgrad::tf::{density_peaks, export_tf, import_tf, init_params, InitConfig, InitReport, TfRealized};
use tfgrad::volume::{Dtype, ScalarField, VolumeMeta};

use crate::config::{invalid, RunConfig, ScorerChoice, VolumeSection};
use crate::CliError;

pub const TF_FILE: &str = "final.tf";
pub const LOG_FILE: &str = "log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const FINAL_RENDER_FILE: &str = "final.png";
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Debug, Clone)]
pub struct OptimizeOutput {
    pub run_dir: PathBuf,
    pub tf: TfRealized,
    pub init: InitReport,
    pub skipped_steps: usize,
}

impl OptimizeOutput {
    pub fn tf_path(&self) -> PathBuf {
        self.run_dir.join(TF_FILE)
    }

    pub fn log_path(&self) -> PathBuf {
        self.run_dir.join(LOG_FILE)
    }

    pub fn resolved_config_path(&self) -> PathBuf {
        self.run_dir.join(RESOLVED_CONFIG_FILE)
    }
}

/// Creates a fresh `run-<timestamp>` directory under `root`.
fn timestamped_dir(root: &Path) -> io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("run-%Y%m%dT%H%M%S%.3f").to_string().replace('.', "-");
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("unbounded suffix search")
}

fn build_scorer<'a>(
    choice: &ScorerChoice,
    field: &'a ScalarField,
    render: &RenderConfig,
) -> Result<Box<dyn Scorer + 'a>, CliError> {
    Ok(match choice {
        ScorerChoice::ReferenceTf(path) => {
            let tf = import_tf(path).map_err(|e| invalid("scorer.reference_tf", e.to_string()))?;
            Box::new(ReferenceTfScorer::new(field, tf, *render))
        }
        ScorerChoice::ReferenceImage(path) => {
            let reference = Image::load_png(path).map_err(|e| invalid("scorer.reference_image", e.to_string()))?;
            if reference.width() != render.width || reference.height() != render.height {
                return Err(invalid(
                    "scorer.reference_image",
                    format!(
                        "image is {}x{} but render.image_size is {}",
                        reference.width(),
                        reference.height(),
                        render.width
                    ),
                ));
            }
            Box::new(ImageReferenceScorer { reference })
        }
        ScorerChoice::Endpoint(endpoint) => {
            let remote = RemoteScorer::connect(endpoint)?;
            let hs = remote.handshake();
            info!(
                "scorer service: model {} input size {:?} temperature {:?}",
                hs.model, hs.input_size, hs.temperature
            );
            Box::new(remote)
        }
    })
}

/// Runs initialization and all optimization steps, writing every artifact
/// to a new timestamped directory under `config.output_dir`.
pub fn cmd_optimize(config: &RunConfig) -> Result<OptimizeOutput, CliError> {
    config.validate()?;
    let field = config.volume.load()?;
    let train = config.train_config(&field);
    train.validate().map_err(|e| invalid("config", e.to_string()))?;
    let choice = config.scorer_choice()?;
    let pool = match &config.prompts.pool {
        Some(path) => load_prompt_pool(path).map_err(|e| invalid("prompts.pool", e.to_string()))?,
        None => Vec::new(),
    };
    let prompts = Prompts {
        positive: config.prompts.positive.clone(),
        user_negatives: config.prompts.negatives.clone(),
        pool,
    };

    let run_dir = timestamped_dir(&config.output_dir).map_err(tfgrad::Error::from)?;
    let resolved = config.resolved(&field)?;
    let resolved_text = resolved.to_toml();
    info!("resolved configuration:\n{resolved_text}");
    fs::write(run_dir.join(RESOLVED_CONFIG_FILE), &resolved_text).map_err(tfgrad::Error::from)?;

    let mut scorer = build_scorer(&choice, &field, &train.render)?;
    info!(
        "volume {:?} values [{}, {}]; scorer {}; writing to {}",
        field.dims(),
        field.value_min(),
        field.value_max(),
        scorer.describe(),
        run_dir.display()
    );
    let snapshots = run_dir.join(SNAPSHOT_DIR);
    let out = optim::run(&field, &train, &prompts, scorer.as_mut(), Some(&snapshots))?;

    export_tf(&out.tf, run_dir.join(TF_FILE))?;
    out.log.write_csv(fs::File::create(run_dir.join(LOG_FILE)).map_err(tfgrad::Error::from)?)?;
    optim::snapshot(&field, &out.tf, &train.render)?.save_png(run_dir.join(FINAL_RENDER_FILE))?;
    let skipped_steps = out.log.rows.iter().filter(|r| r.skipped).count();
    if skipped_steps > 0 {
        warn!("{skipped_steps} of {} steps were skipped", out.log.rows.len());
    }
    Ok(OptimizeOutput { run_dir, tf: out.tf, init: out.init, skipped_steps })
}

/// Camera and image size for a single render. `distance` defaults to 3r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewArgs {
    pub yaw: f64,
    pub pitch: f64,
    pub distance: Option<f64>,
    pub size: usize,
}

impl Default for ViewArgs {
    fn default() -> Self {
        ViewArgs { yaw: 0.0, pitch: 0.0, distance: None, size: tfgrad::render::DEFAULT_IMAGE_SIZE }
    }
}

/// Renders `tf` over constant gray at the requested view.
pub fn render_view(field: &ScalarField, tf: &TfRealized, view: &ViewArgs) -> Result<Image, CliError> {
    if view.size == 0 {
        return Err(invalid("size", "must be positive"));
    }
    let distance = view.distance.unwrap_or(3.0 * field.bounding_radius());
    let pose = CameraPose::new(view.yaw, view.pitch, distance);
    pose.validate().map_err(|e| invalid("pose", e.to_string()))?;
    let rc = RenderConfig::for_field(field, view.size, view.size);
    let bg = Image::filled(view.size, view.size, [SNAPSHOT_GRAY; 3]);
    Ok(render(field, tf, &pose, &rc, &bg)?.image)
}

pub fn cmd_render(volume: &VolumeSection, tf_path: &Path, view: &ViewArgs, out: &Path) -> Result<Image, CliError> {
    let field = volume.load()?;
    let tf = import_tf(tf_path).map_err(|e| invalid("tf", e.to_string()))?;
    let image = render_view(&field, &tf, view)?;
    image.save_png(out)?;
    Ok(image)
}

#[derive(Debug, Clone)]
pub struct InitDensityOutput {
    pub tf: TfRealized,
    pub report: InitReport,
}

/// Initialization only: writes the TF and reports the achieved mean
/// transmittance at the initial view. A missed target is logged by the
/// initializer and reported through `converged`, not raised.
pub fn cmd_init_density(
    volume: &VolumeSection,
    init: &InitConfig,
    size: usize,
    seed: u64,
    out: &Path,
) -> Result<InitDensityOutput, CliError> {
    if init.control_points < 2 {
        return Err(invalid("control_points", "must be at least 2"));
    }
    if size == 0 {
        return Err(invalid("size", "must be positive"));
    }
    init.validate().map_err(|e| invalid("init", e.to_string()))?;
    let field = volume.load()?;
    let rc = RenderConfig::for_field(&field, size, size);
    let pose = CameraPose::initial(field.bounding_radius());
    let (params, report) = init_params(&field, init, &rc, &pose, &mut child_rng(seed, 0, INIT_STREAM))?;
    let tf = params.realize(field.value_min(), field.value_max())?;
    export_tf(&tf, out)?;
    Ok(InitDensityOutput { tf, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfSummary {
    pub tf: TfRealized,
    /// Indices of density local maxima.
    pub peaks: Vec<usize>,
    /// Indices where the color differs from the previous control point.
    pub color_stops: Vec<usize>,
}

pub fn inspect_tf(tf: &TfRealized) -> TfSummary {
    let color_stops = (0..tf.control_points()).filter(|&k| k == 0 || tf.color[k] != tf.color[k - 1]).collect();
    TfSummary { tf: tf.clone(), peaks: density_peaks(tf), color_stops }
}

pub fn cmd_inspect_tf(path: &Path) -> Result<TfSummary, CliError> {
    let tf = import_tf(path).map_err(|e| invalid("tf", e.to_string()))?;
    Ok(inspect_tf(&tf))
}

impl fmt::Display for TfSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tf = &self.tf;
        writeln!(f, "control points: {}  value range: [{:.6}, {:.6}]", tf.control_points(), tf.value_min(), tf.value_max())?;
        writeln!(f, "{:>4} {:>14} {:>12}  color", "k", "position", "density")?;
        for k in 0..tf.control_points() {
            let c = tf.color[k];
            writeln!(f, "{k:>4} {:>14.6} {:>12.6}  ({:.3}, {:.3}, {:.3})", tf.positions[k], tf.density[k], c[0], c[1], c[2])?;
        }
        writeln!(f, "density peaks: {}", self.peaks.len())?;
        for &k in &self.peaks {
            writeln!(f, "  k={k} position {:.6} density {:.6}", tf.positions[k], tf.density[k])?;
        }
        writeln!(f, "color stops: {}", self.color_stops.len())?;
        for &k in &self.color_stops {
            let c = tf.color[k];
            writeln!(f, "  k={k} position {:.6} color ({:.3}, {:.3}, {:.3})", tf.positions[k], c[0], c[1], c[2])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Float32 nested shells with a ground-truth TF.
    TwoShells,
    /// Uint8 potted-tree scene.
    Bonsai,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub volume_path: PathBuf,
    pub tf_path: Option<PathBuf>,
}

/// Writes a synthetic volume named by the `name_XxYxZ_dtype.raw`
/// convention. The two-shell ground truth is computed from the stored
/// float32 values, so it matches what a later load sees.
pub fn cmd_synth(kind: SynthKind, n: usize, out_dir: &Path) -> Result<SynthOutput, CliError> {
    let (name, dtype, field) = match kind {
        SynthKind::TwoShells => {
            if n < 12 {
                return Err(invalid("size", "two-shells needs at least 12 voxels per side"));
            }
            ("two_shells", Dtype::Float32, two_shells(n)?)
        }
        SynthKind::Bonsai => {
            if n < 8 {
                return Err(invalid("size", "bonsai needs at least 8 voxels per side"));
            }
            ("bonsai", Dtype::Uint8, bonsai_like(n)?)
        }
    };
    fs::create_dir_all(out_dir).map_err(tfgrad::Error::from)?;
    let volume_path = out_dir.join(format!("{name}_{n}x{n}x{n}_{}.raw", dtype_name(dtype)));
    fs::write(&volume_path, field.to_raw_bytes(dtype)).map_err(tfgrad::Error::from)?;
    let tf_path = match kind {
        SynthKind::TwoShells => {
            let stored = ScalarField::load_raw(&volume_path, &VolumeMeta::new([n; 3], dtype))?;
            let path = out_dir.join(format!("{name}_gt.tf"));
            export_tf(&two_shells_tf(&stored)?, &path)?;
            Some(path)
        }
        SynthKind::Bonsai => None,
    };
    Ok(SynthOutput { volume_path, tf_path })
}

fn dtype_name(dtype: Dtype) -> &'static str {
    match dtype {
        Dtype::Uint8 => "uint8",
        Dtype::Uint16 => "uint16",
        Dtype::Float32 => "float32",
    }
}
