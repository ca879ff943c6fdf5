use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tfgrad::synthetic::{two_shells, two_shells_tf};
use tfgrad::tf::{export_tf, InitConfig, TfRealized};
use tfgrad_cli::config::VolumeSection;
use tfgrad_cli::{
    cmd_init_density, cmd_inspect_tf, cmd_optimize, cmd_render, cmd_synth, render_view, CliError, RunConfig,
    SynthKind, ViewArgs,
};

const GOLDEN: &str = "tests/golden/two_shells_16_render32.f64le";

struct Fixture {
    dir: tempfile::TempDir,
    volume: PathBuf,
    gt: PathBuf,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_synth(SynthKind::TwoShells, n, dir.path()).unwrap();
    Fixture { volume: out.volume_path, gt: out.tf_path.unwrap(), dir }
}

fn volume(path: &Path) -> VolumeSection {
    VolumeSection { path: path.to_path_buf(), dims: None, dtype: None, spacing: None }
}

fn write_config(fx: &Fixture, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 5
output_dir = "runs"

[volume]
path = "{}"

[tf]
control_points = 8

[render]
image_size = 16

[optimizer]
steps = 8

{extra}"#,
        fx.volume.file_name().unwrap().to_str().unwrap()
    );
    let path = fx.dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn field_of(err: CliError) -> String {
    match err {
        CliError::Validation { field, .. } => field,
        other => panic!("expected a validation error, got {other}"),
    }
}

#[test]
fn both_scorers_is_a_validation_error() {
    let fx = fixture(16);
    let path = write_config(&fx, "[scorer]\nreference_tf = \"two_shells_gt.tf\"\nendpoint = \"tcp://127.0.0.1:9\"\n");
    let err = cmd_optimize(&RunConfig::load(&path).unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert_eq!(field_of(err), "scorer");
}

#[test]
fn missing_volume_names_the_field() {
    let fx = fixture(16);
    let path = write_config(&fx, "[scorer]\nreference_tf = \"two_shells_gt.tf\"\n");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.volume.path = fx.dir.path().join("nope.raw");
    let err = cmd_optimize(&cfg).unwrap_err();
    assert!(err.to_string().contains("nope.raw"));
    assert_eq!(field_of(err), "volume.path");
}

#[test]
fn endpoint_needs_prompts() {
    let fx = fixture(16);
    let path = write_config(&fx, "[scorer]\nendpoint = \"tcp://127.0.0.1:9\"\n");
    assert_eq!(field_of(RunConfig::load(&path).unwrap().validate().unwrap_err()), "prompts.positive");
    let path = write_config(&fx, "[prompts]\npositive = \"a tree\"\n\n[scorer]\nendpoint = \"tcp://127.0.0.1:9\"\n");
    assert_eq!(field_of(RunConfig::load(&path).unwrap().validate().unwrap_err()), "prompts");
}

#[test]
fn single_control_point_is_rejected() {
    let fx = fixture(16);
    let init = InitConfig { control_points: 1, ..InitConfig::default() };
    let err = cmd_init_density(&volume(&fx.volume), &init, 16, 0, &fx.dir.path().join("x.tf")).unwrap_err();
    assert_eq!(field_of(err), "control_points");
}

#[test]
fn init_density_reports_transmittance() {
    let fx = fixture(16);
    let init = InitConfig { control_points: 8, target: 0.5, ..InitConfig::default() };
    let out_path = fx.dir.path().join("init.tf");
    let out = cmd_init_density(&volume(&fx.volume), &init, 24, 0, &out_path).unwrap();
    assert!((out.report.mean_transmittance - 0.5).abs() <= 0.01, "{}", out.report.mean_transmittance);
    assert_eq!(tfgrad::tf::import_tf(&out_path).unwrap(), out.tf);
}

#[test]
fn zero_density_renders_uniform_gray() {
    let fx = fixture(16);
    let tf = TfRealized::new(vec![0.0, 1.0], vec![0.0; 2], vec![[0.9, 0.1, 0.1]; 2]).unwrap();
    let tf_path = fx.dir.path().join("empty.tf");
    export_tf(&tf, &tf_path).unwrap();
    let png = fx.dir.path().join("empty.png");
    let view = ViewArgs { yaw: 0.4, size: 12, ..ViewArgs::default() };
    let image = cmd_render(&volume(&fx.volume), &tf_path, &view, &png).unwrap();
    assert!(image.data().iter().all(|&v| v == 0.5));
    let bytes = tfgrad::image::Image::load_png(&png).unwrap();
    assert!(bytes.data().windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn repeated_renders_are_byte_identical() {
    let fx = fixture(16);
    let view = ViewArgs { yaw: 1.3, pitch: -0.1, distance: None, size: 20 };
    let (a, b) = (fx.dir.path().join("a.png"), fx.dir.path().join("b.png"));
    cmd_render(&volume(&fx.volume), &fx.gt, &view, &a).unwrap();
    cmd_render(&volume(&fx.volume), &fx.gt, &view, &b).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn malformed_tf_fails_validation() {
    let fx = fixture(16);
    let bad = fx.dir.path().join("bad.tf");
    fs::write(&bad, "3 0 1\n0 0 0 0 0\n").unwrap();
    let err = cmd_render(&volume(&fx.volume), &bad, &ViewArgs::default(), &fx.dir.path().join("x.png")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(cmd_inspect_tf(&bad).is_err());
}

fn ulp_distance(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

/// Set `TFGRAD_BLESS_GOLDEN=1` to regenerate the frozen image.
#[test]
fn two_shells_render_matches_golden() {
    let field = two_shells(16).unwrap();
    let tf = two_shells_tf(&field).unwrap();
    let view = ViewArgs { yaw: 0.6, pitch: 0.2, distance: None, size: 32 };
    let image = render_view(&field, &tf, &view).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("TFGRAD_BLESS_GOLDEN").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&golden, bytes).unwrap();
    }
    let bytes = fs::read(&golden).unwrap();
    let stored: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(stored.len(), image.data().len());
    for (i, (&got, &want)) in image.data().iter().zip(&stored).enumerate() {
        assert!(ulp_distance(got, want) <= 1, "pixel value {i}: {got} vs {want}");
    }
}

#[test]
fn inspect_counts_peaks() {
    let dir = tempfile::tempdir().unwrap();
    let gray = [0.5; 3];
    let flat = TfRealized::new(vec![0.0, 0.5, 1.0], vec![2.0; 3], vec![gray; 3]).unwrap();
    let two = TfRealized::new(
        vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        vec![0.0, 3.0, 0.0, 0.0, 5.0, 1.0],
        vec![gray, gray, [0.1, 0.2, 0.3], [0.1, 0.2, 0.3], gray, gray],
    )
    .unwrap();
    for (tf, peaks, stops) in [(&flat, 0, 1), (&two, 2, 3)] {
        let path = dir.path().join("t.tf");
        export_tf(tf, &path).unwrap();
        let summary = cmd_inspect_tf(&path).unwrap();
        assert_eq!(summary.peaks.len(), peaks);
        assert_eq!(summary.color_stops.len(), stops);
        assert_eq!(&summary.tf, tf);
        let text = summary.to_string();
        assert!(text.contains(&format!("control points: {}", tf.control_points())));
        assert!(text.contains(&format!("density peaks: {peaks}")));
    }
    assert_eq!(cmd_inspect_tf(&dir.path().join("t.tf")).unwrap().peaks, vec![1, 4]);
}

#[test]
fn inspect_round_trip_lists_every_point() {
    let field = two_shells(16).unwrap();
    let tf = two_shells_tf(&field).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.tf");
    export_tf(&tf, &path).unwrap();
    let text = cmd_inspect_tf(&path).unwrap().to_string();
    let rows = text.lines().skip(2).take_while(|l| !l.starts_with("density peaks")).count();
    assert_eq!(rows, tf.control_points());
}

#[test]
fn resolved_config_replays_bit_for_bit() {
    let fx = fixture(16);
    let path = write_config(&fx, "[scorer]\nreference_tf = \"two_shells_gt.tf\"\n");
    let first = cmd_optimize(&RunConfig::load(&path).unwrap()).unwrap();
    let resolved = RunConfig::load(&first.resolved_config_path()).unwrap();
    assert_eq!(resolved.volume.dims, Some([16; 3]));
    assert!(resolved.render.step_size.is_some() && resolved.volume.path.is_absolute());
    let second = cmd_optimize(&resolved).unwrap();
    assert_ne!(first.run_dir, second.run_dir);
    assert_eq!(fs::read(first.tf_path()).unwrap(), fs::read(second.tf_path()).unwrap());
    assert_eq!(fs::read(first.log_path()).unwrap(), fs::read(second.log_path()).unwrap());
    assert_eq!(fs::read_to_string(second.resolved_config_path()).unwrap(), fs::read_to_string(first.resolved_config_path()).unwrap());
    let log = fs::read_to_string(first.log_path()).unwrap();
    assert_eq!(log.lines().count(), 9);
}

#[test]
fn snapshots_follow_the_interval() {
    let fx = fixture(16);
    let path = write_config(&fx, "[scorer]\nreference_tf = \"two_shells_gt.tf\"\n");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.optimizer.snapshot_interval = 3;
    let out = cmd_optimize(&cfg).unwrap();
    let mut names: Vec<String> = fs::read_dir(out.run_dir.join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, vec!["step_0003.png", "step_0006.png"]);
    assert!(out.run_dir.join("final.png").is_file());
}

fn tfgrad_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfgrad"))
}

#[test]
fn exit_codes() {
    let fx = fixture(16);
    let ok = tfgrad_bin().args(["inspect-tf"]).arg(&fx.gt).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("density peaks: 2"));

    let path = write_config(&fx, "[scorer]\nreference_tf = \"two_shells_gt.tf\"\nreference_image = \"x.png\"\n");
    let bad = tfgrad_bin().args(["optimize", "--config"]).arg(&path).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("scorer"));

    assert_eq!(tfgrad_bin().arg("no-such-command").output().unwrap().status.code(), Some(1));

    // valid config, but nothing listens on the endpoint
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let path = write_config(
        &fx,
        &format!("[prompts]\npositive = \"a tree\"\nnegatives = [\"a rock\"]\n\n[scorer]\nendpoint = \"tcp://127.0.0.1:{port}\"\n"),
    );
    let failed = tfgrad_bin().args(["optimize", "--config"]).arg(&path).output().unwrap();
    assert_eq!(failed.status.code(), Some(2), "{}", String::from_utf8_lossy(&failed.stderr));
}

#[test]
fn flags_override_the_config() {
    let fx = fixture(16);
    let path = write_config(&fx, "[scorer]\nreference_tf = \"two_shells_gt.tf\"\n");
    let out_dir = fx.dir.path().join("flagged");
    let status = tfgrad_bin()
        .args(["optimize", "--steps", "2", "--seed", "9", "--config"])
        .arg(&path)
        .arg("--output-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let run = fs::read_dir(&out_dir).unwrap().next().unwrap().unwrap().path();
    let resolved = RunConfig::load(&run.join("resolved_config.toml")).unwrap();
    assert_eq!(resolved.optimizer.steps, 2);
    assert_eq!(resolved.seed, 9);
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 3);
}
