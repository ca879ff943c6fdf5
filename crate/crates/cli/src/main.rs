use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use tfgrad::tf::InitConfig;
use tfgrad::volume::Dtype;
use tfgrad_cli::config::VolumeSection;
use tfgrad_cli::{cmd_init_density, cmd_inspect_tf, cmd_optimize, cmd_render, cmd_synth, CliError, RunConfig, SynthKind, ViewArgs};

#[derive(Parser)]
#[command(name = "tfgrad", version, about = "Gradient-based transfer function optimization for volume rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a transfer function from a run configuration file.
    Optimize(OptimizeArgs),
    /// Render one image over gray 0.5 and write a PNG.
    Render(RenderArgs),
    /// Run the density initialization only.
    InitDensity(InitArgs),
    /// Summarize a transfer function file.
    InspectTf { file: PathBuf },
    /// Write a synthetic test volume.
    Synth(SynthArgs),
}

/// Flags override the matching config keys.
#[derive(Args)]
struct OptimizeArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    control_points: Option<usize>,
    #[arg(long)]
    snapshot_interval: Option<usize>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    positive: Option<String>,
}

#[derive(Args)]
struct VolumeArgs {
    /// Raw little-endian volume.
    #[arg(long)]
    volume: PathBuf,
    /// Needed together with --dtype unless a sidecar or the file name says.
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    dims: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
    #[arg(long, num_args = 3, value_names = ["SX", "SY", "SZ"])]
    spacing: Option<Vec<f64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    Uint8,
    Uint16,
    Float32,
}

impl VolumeArgs {
    fn section(&self) -> VolumeSection {
        VolumeSection {
            path: self.volume.clone(),
            dims: self.dims.as_ref().map(|d| [d[0], d[1], d[2]]),
            dtype: self.dtype.map(|d| match d {
                DtypeArg::Uint8 => Dtype::Uint8,
                DtypeArg::Uint16 => Dtype::Uint16,
                DtypeArg::Float32 => Dtype::Float32,
            }),
            spacing: self.spacing.as_ref().map(|s| [s[0], s[1], s[2]]),
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    volume: VolumeArgs,
    #[arg(long)]
    tf: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pitch: f64,
    /// Defaults to three bounding radii.
    #[arg(long)]
    distance: Option<f64>,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    volume: VolumeArgs,
    #[arg(long, default_value_t = 32)]
    control_points: usize,
    /// Target mean transmittance.
    #[arg(long, default_value_t = 0.05)]
    target: f64,
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthArg,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthArg {
    TwoShells,
    Bonsai,
}

fn optimize(args: OptimizeArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = args.steps {
        cfg.optimizer.steps = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.optimizer.learning_rate = v;
    }
    if let Some(v) = args.image_size {
        cfg.render.image_size = v;
    }
    if let Some(v) = args.control_points {
        cfg.tf.control_points = v;
    }
    if let Some(v) = args.snapshot_interval {
        cfg.optimizer.snapshot_interval = v;
    }
    if let Some(v) = args.endpoint {
        cfg.scorer = Default::default();
        cfg.scorer.endpoint = Some(v);
    }
    if let Some(v) = args.positive {
        cfg.prompts.positive = v;
    }
    let out = cmd_optimize(&cfg)?;
    println!("mean T_N after init: {:.4}", out.init.mean_transmittance);
    println!("skipped steps: {}", out.skipped_steps);
    println!("artifacts: {}", out.run_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Optimize(args) => optimize(args),
        Command::Render(a) => {
            let view = ViewArgs { yaw: a.yaw, pitch: a.pitch, distance: a.distance, size: a.size };
            cmd_render(&a.volume.section(), &a.tf, &view, &a.out)?;
            info!("wrote {}", a.out.display());
            Ok(())
        }
        Command::InitDensity(a) => {
            let init = InitConfig { control_points: a.control_points, target: a.target, tolerance: a.tolerance, ..InitConfig::default() };
            let out = cmd_init_density(&a.volume.section(), &init, a.size, a.seed, &a.out)?;
            println!("mean T_N: {}", out.report.mean_transmittance);
            println!("scale: {}  iterations: {}  converged: {}", out.report.scale, out.report.iterations, out.report.converged);
            Ok(())
        }
        Command::InspectTf { file } => {
            let summary = cmd_inspect_tf(&file)?;
            // A closed pipe (`| head`) is not an error worth reporting.
            let _ = write!(std::io::stdout().lock(), "{summary}");
            Ok(())
        }
        Command::Synth(a) => {
            let kind = match a.kind {
                SynthArg::TwoShells => SynthKind::TwoShells,
                SynthArg::Bonsai => SynthKind::Bonsai,
            };
            let out = cmd_synth(kind, a.size, &a.out_dir)?;
            println!("{}", out.volume_path.display());
            if let Some(tf) = out.tf_path {
                println!("{}", tf.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
