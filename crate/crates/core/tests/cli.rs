use std::path::Path;
use std::process::{Command, Output};

use hsdip::io::{read_cube, write_cube};
use hsdip::pipeline::{ReportRecord, StopReason};
use hsdip::quality::MetricsReport;
use hsdip::{Cube, Rng};

fn hsdip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsdip"))
        .args(args)
        .env_clear()
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_cube(dir: &Path, seed: u64) -> std::path::PathBuf {
    phantom_file(dir, 8, seed)
}

/// SSIM needs at least 11x11 pixels.
fn eval_cube(dir: &Path, seed: u64) -> std::path::PathBuf {
    phantom_file(dir, 16, seed)
}

fn phantom_file(dir: &Path, side: usize, seed: u64) -> std::path::PathBuf {
    let cube = hsdip::noise::phantom(side, side, 4, &mut Rng::new(seed)).unwrap();
    let path = dir.join("clean.hsic");
    write_cube(&cube, &path).unwrap();
    path
}

#[test]
fn evaluate_identity() {
    let dir = tempfile::tempdir().unwrap();
    let clean = eval_cube(dir.path(), 1);
    let out = hsdip(&["evaluate", "--reference", p(&clean), "--estimate", p(&clean), "--csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("\"inf\""), "{stdout}");
    let json_end = stdout.rfind('}').unwrap() + 1;
    let report: MetricsReport = serde_json::from_str(&stdout[..json_end]).unwrap();
    assert!(report.psnr.is_infinite());
    assert_eq!(report.ssim, 1.0);
    assert_eq!(report.sam, 0.0);
    let mut csv = stdout[json_end..].lines().filter(|l| !l.is_empty());
    assert_eq!(csv.next().unwrap(), MetricsReport::csv_header());
    assert!(csv.next().unwrap().starts_with("inf,"));
}

#[test]
fn usage_errors_exit_2() {
    let out = hsdip(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = hsdip(&["simulate", "--input", "x.hsic", "--case", "9", "--out", "y.hsic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = hsdip(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["simulate", "denoise", "evaluate", "reproduce-case", "trace-plot-data"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.hsic");
    let out = hsdip(&["evaluate", "--reference", p(&missing), "--estimate", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.hsic"));

    let garbage = dir.path().join("garbage.hsic");
    std::fs::write(&garbage, b"not a cube").unwrap();
    let out = hsdip(&["evaluate", "--reference", p(&garbage), "--estimate", p(&garbage)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let a = eval_cube(dir.path(), 1);
    let b = dir.path().join("b.hsic");
    write_cube(&Cube::zeros(16, 16, 3).unwrap(), &b).unwrap();
    let out = hsdip(&["evaluate", "--reference", p(&a), "--estimate", p(&b)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_denoise_trace_plot() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_cube(dir.path(), 4);
    let noisy = dir.path().join("noisy.hsic");
    let out = hsdip(&["simulate", "--input", p(&clean), "--case", "2", "--seed", "5", "--out", p(&noisy)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let y = read_cube(&noisy).unwrap();
    assert_eq!(y.dims(), (8, 8, 4));
    assert!(dir.path().join("noisy.noise.json").exists());

    let den = dir.path().join("den.hsic");
    let common = ["--kmax", "6", "--relerr-tol", "1e-12", "--check-interval", "2", "--channels", "4", "--seed", "3"];
    let mut args = vec!["denoise", "--input", p(&noisy), "--out", p(&den), "--case", "2", "--trace-ref", p(&clean)];
    args.extend(common);
    let out = hsdip(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_cube(&den).unwrap().dims(), (8, 8, 4));
    assert!(dir.path().join("den.best.hsic").exists());
    let record: ReportRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("den.report.json")).unwrap()).unwrap();
    assert_eq!(record.iterations, 6);
    assert_eq!(record.stop_reason, StopReason::MaxIterations);
    assert_eq!(record.network.channels, vec![4]);
    let trace = std::fs::read_to_string(dir.path().join("den.trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,loss,rel_err,psnr");
    assert_eq!(trace.lines().count(), 7);

    let base = dir.path().join("base.hsic");
    let mut args = vec!["denoise", "--baseline", "--input", p(&noisy), "--out", p(&base), "--trace-ref", p(&clean)];
    args.extend(common);
    let out = hsdip(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let merged = dir.path().join("merged.csv");
    let out = hsdip(&[
        "trace-plot-data",
        p(&dir.path().join("den.trace.csv")),
        p(&dir.path().join("base.trace.csv")),
        "--labels",
        "tv,plain",
        "--out",
        p(&merged),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let merged = std::fs::read_to_string(merged).unwrap();
    let mut lines = merged.lines();
    assert_eq!(lines.next().unwrap(), "iteration,tv,plain");
    assert_eq!(lines.count(), 6);
}

#[test]
fn env_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let clean = small_cube(dir.path(), 6);
    let den = dir.path().join("den.hsic");
    let out = Command::new(env!("CARGO_BIN_EXE_hsdip"))
        .args(["denoise", "--input", p(&clean), "--out", p(&den)])
        .env_clear()
        .env("HSDIP_KMAX", "3")
        .env("HSDIP_CHANNELS", "4")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: ReportRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("den.report.json")).unwrap()).unwrap();
    assert_eq!(record.iterations, 3);
}
