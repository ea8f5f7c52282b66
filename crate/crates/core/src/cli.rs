//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or invalid argument, 3 I/O or file
//! format error, 4 numerical abort (non-finite loss).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{case_lambda_over_n, RunFile};
use crate::cube::Cube;
use crate::error::{Error, Result};
use crate::io::{load_cube, write_bytes, write_cube};
use crate::noise::{corrupt_logged, NoiseLog, NoiseSpec};
use crate::pipeline::{self, RunReport};
use crate::quality::{self, de_db, ser_db, MetricsReport};
use crate::tensor::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Stream of the master seed that drives noise simulation.
const STREAM_NOISE: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "hsdip", version, about = "Unsupervised mixed-noise removal for hyperspectral cubes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt a clean cube with a noise case.
    Simulate(SimulateArgs),
    /// Denoise a noisy cube.
    Denoise(DenoiseArgs),
    /// Compare an estimate with a reference cube.
    Evaluate(EvaluateArgs),
    /// Simulate, denoise and evaluate one noise case end to end.
    ReproduceCase(ReproduceArgs),
    /// Merge per-iteration PSNR columns of several trace CSVs.
    TracePlotData(TracePlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Clean cube (cube file or .npy), values in [0, 1].
    #[arg(long, env = "HSDIP_INPUT")]
    pub input: PathBuf,
    /// Noise case 1-5.
    #[arg(long, env = "HSDIP_CASE", value_parser = clap::value_parser!(u8).range(1..=5))]
    pub case: u8,
    #[arg(long, env = "HSDIP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Noisy cube to write; a `.noise.json` sidecar is written next to it.
    #[arg(long, env = "HSDIP_OUT")]
    pub out: PathBuf,
}

/// Run settings shared by `denoise` and `reproduce-case`. Each flag
/// overrides the run file, which overrides the case preset.
#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// JSON run file.
    #[arg(long, env = "HSDIP_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "HSDIP_SEED")]
    pub seed: Option<u64>,
    /// λ·N, with N = H·W·B.
    #[arg(long, env = "HSDIP_LAMBDA_OVER_N")]
    pub lambda_over_n: Option<f64>,
    #[arg(long, env = "HSDIP_ALPHA1")]
    pub alpha1: Option<f64>,
    #[arg(long, env = "HSDIP_ALPHA2")]
    pub alpha2: Option<f64>,
    #[arg(long, env = "HSDIP_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "HSDIP_KMAX")]
    pub kmax: Option<usize>,
    #[arg(long, env = "HSDIP_RELERR_TOL")]
    pub relerr_tol: Option<f64>,
    #[arg(long, env = "HSDIP_CHECK_INTERVAL")]
    pub check_interval: Option<usize>,
    /// Channel widths per encoder stage, e.g. `16,32,64`.
    #[arg(long, env = "HSDIP_CHANNELS", value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Noisy cube (cube file or .npy).
    #[arg(long, env = "HSDIP_INPUT")]
    pub input: PathBuf,
    /// Denoised cube to write; `.report.json` and `.trace.csv` go next to it.
    #[arg(long, env = "HSDIP_OUT")]
    pub out: PathBuf,
    /// Noise case whose λ preset to use.
    #[arg(long, env = "HSDIP_CASE", value_parser = clap::value_parser!(u8).range(1..=5))]
    pub case: Option<u8>,
    /// Clean cube for per-iteration PSNR; also writes the best iterate.
    #[arg(long, env = "HSDIP_TRACE_REF")]
    pub trace_ref: Option<PathBuf>,
    /// Fit with the data term only (λ = 0).
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
    /// Also print a CSV header and row.
    #[arg(long)]
    pub csv: bool,
    /// Write the JSON report here as well.
    #[arg(long, env = "HSDIP_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Clean cube (cube file or .npy), values in [0, 1].
    #[arg(long, env = "HSDIP_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "HSDIP_CASE", value_parser = clap::value_parser!(u8).range(1..=5))]
    pub case: u8,
    /// Output directory.
    #[arg(long, env = "HSDIP_OUT")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct TracePlotArgs {
    /// Trace CSVs written by `denoise` or `reproduce-case`.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Column labels, one per trace; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Write the merged CSV here instead of stdout.
    #[arg(long, env = "HSDIP_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecord {
    pub case: u8,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub log: NoiseLog,
}

/// One table row of a reproduced case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRow {
    pub case: u8,
    pub seed: u64,
    pub lambda_over_n: f64,
    pub iterations: usize,
    pub stop_reason: pipeline::StopReason,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
    pub noisy_sam: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub best_psnr: f64,
    pub best_iteration: usize,
}

impl CaseRow {
    pub fn csv_header() -> &'static str {
        "case,seed,lambda_over_n,iterations,stop_reason,noisy_psnr,noisy_ssim,noisy_sam,psnr,ssim,sam,best_psnr,best_iteration"
    }

    pub fn csv_row(&self) -> String {
        let reason = match self.stop_reason {
            pipeline::StopReason::Tolerance => "tolerance",
            pipeline::StopReason::MaxIterations => "max-iterations",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.case,
            self.seed,
            self.lambda_over_n,
            self.iterations,
            reason,
            quality::fmt_db(self.noisy_psnr),
            self.noisy_ssim,
            self.noisy_sam,
            quality::fmt_db(self.psnr),
            self.ssim,
            self.sam,
            quality::fmt_db(self.best_psnr),
            self.best_iteration
        )
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format { .. } | Error::Json { .. } => EXIT_IO,
        Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Denoise(a) => denoise(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ReproduceCase(a) => reproduce(a),
        Command::TracePlotData(a) => trace_plot(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

fn to_json<T: Serialize>(v: &T) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).expect("records always serialize"))
}

/// `out` with `suffix` appended to its file stem, e.g. `x.hsic` → `x.trace.csv`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

fn simulate_cube(clean: &Cube, case: u8, seed: u64) -> Result<(Cube, SimulationRecord)> {
    let spec = NoiseSpec::case(case)?;
    let mut rng = Rng::new(seed).substream(STREAM_NOISE);
    let (noisy, log) = corrupt_logged(clean, &spec, &mut rng)?;
    Ok((
        noisy,
        SimulationRecord {
            case,
            seed,
            noise: spec,
            log,
        },
    ))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let clean = load_cube(&a.input)?;
    let (noisy, record) = simulate_cube(&clean, a.case, a.seed)?;
    ensure_parent(&a.out)?;
    write_cube(&noisy, &a.out)?;
    write_text(&sibling(&a.out, "noise.json"), &to_json(&record))?;
    Ok(())
}

/// Run file after applying the case preset, the config file and the flags.
fn resolve_run_file(run: &RunArgs, case: Option<u8>) -> Result<RunFile> {
    let mut rf = match &run.config {
        Some(path) => RunFile::load(path)?,
        None => RunFile::default(),
    };
    if let Some(c) = case {
        rf.case = Some(c);
        if run.config.is_none() {
            rf.lambda_over_n = case_lambda_over_n(c)?;
        }
    }
    if let Some(v) = run.seed {
        rf.seed = v;
    }
    if let Some(v) = run.lambda_over_n {
        rf.lambda_over_n = v;
    }
    if let Some(v) = run.alpha1 {
        rf.alpha1 = v;
    }
    if let Some(v) = run.alpha2 {
        rf.alpha2 = v;
    }
    if let Some(v) = run.lr {
        rf.lr = v;
    }
    if let Some(v) = run.kmax {
        rf.stop.k_max = v;
    }
    if let Some(v) = run.relerr_tol {
        rf.stop.r = v;
    }
    if let Some(v) = run.check_interval {
        rf.stop.check_interval = v;
    }
    if let Some(ch) = &run.channels {
        rf.network.depth = ch.len();
        rf.network.channels = ch.clone();
    }
    rf.validate()?;
    Ok(rf)
}

struct Outputs {
    report: RunReport,
    record: pipeline::ReportRecord,
}

fn fit(noisy: &Cube, rf: &RunFile, trace: Option<Cube>, baseline: bool) -> Result<Outputs> {
    let cfg = rf.run_config(noisy.dims(), trace)?;
    let report = if baseline {
        pipeline::run_dip_baseline(noisy, &cfg)?
    } else {
        pipeline::run(noisy, &cfg)?
    };
    eprintln!(
        "{} iterations ({:?}) in {:.2} s",
        report.iterations,
        report.stop_reason,
        report.wall_time.as_secs_f64()
    );
    let mut cfg = cfg;
    if baseline {
        cfg.weights.lambda = 0.0;
    }
    let record = report.summary(&cfg);
    Ok(Outputs { report, record })
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let noisy = load_cube(&a.input)?;
    let rf = resolve_run_file(&a.run, a.case)?;
    let trace = a.trace_ref.as_ref().map(load_cube).transpose()?;
    let out = fit(&noisy, &rf, trace, a.baseline)?;
    ensure_parent(&a.out)?;
    write_cube(&out.report.output, &a.out)?;
    write_text(&sibling(&a.out, "report.json"), &to_json(&out.record))?;
    write_text(&sibling(&a.out, "trace.csv"), &out.report.trace_csv())?;
    if let Some(best) = &out.report.best {
        write_cube(&best.output, sibling(&a.out, "best.hsic"))?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let reference = load_cube(&a.reference)?;
    let estimate = load_cube(&a.estimate)?;
    let report = MetricsReport::compute(&reference, &estimate)?;
    let json = to_json(&report);
    print!("{json}");
    if a.csv {
        println!("{}", MetricsReport::csv_header());
        println!("{}", report.csv_row());
    }
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        write_text(out, &json)?;
    }
    Ok(())
}

fn reproduce(a: ReproduceArgs) -> Result<()> {
    let clean = load_cube(&a.input)?;
    let rf = resolve_run_file(&a.run, Some(a.case))?;
    let (noisy, sim) = simulate_cube(&clean, a.case, rf.seed)?;
    // Metrics and the saved cubes both see f32-rounded values.
    let noisy = crate::io::quantize(&noisy);
    let out = fit(&noisy, &rf, Some(clean.clone()), false)?;
    let denoised = crate::io::quantize(&out.report.output);
    let best = out.report.best.as_ref().expect("trace reference given");

    let before = MetricsReport::compute(&clean, &noisy)?;
    let after = MetricsReport::compute(&clean, &denoised)?;
    let row = CaseRow {
        case: a.case,
        seed: rf.seed,
        lambda_over_n: rf.lambda_over_n,
        iterations: out.report.iterations,
        stop_reason: out.report.stop_reason,
        noisy_psnr: before.psnr,
        noisy_ssim: before.ssim,
        noisy_sam: before.sam,
        psnr: after.psnr,
        ssim: after.ssim,
        sam: after.sam,
        best_psnr: best.psnr,
        best_iteration: best.iteration,
    };

    let dir = &a.out;
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    write_cube(&noisy, dir.join("noisy.hsic"))?;
    write_text(&dir.join("noisy.noise.json"), &to_json(&sim))?;
    write_cube(&denoised, dir.join("denoised.hsic"))?;
    write_cube(&best.output, dir.join("best.hsic"))?;
    write_text(&dir.join("run.json"), &rf.to_json())?;
    write_text(&dir.join("report.json"), &to_json(&out.record))?;
    write_text(&dir.join("trace.csv"), &out.report.trace_csv())?;
    write_text(&dir.join("metrics.json"), &to_json(&after))?;
    write_text(&dir.join("row.json"), &to_json(&row))?;
    let table = format!("{}\n{}\n", CaseRow::csv_header(), row.csv_row());
    write_text(&dir.join("row.csv"), &table)?;
    print!("{table}");
    Ok(())
}

/// `(iteration, psnr)` pairs from a trace CSV.
fn read_trace_psnr(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty trace".into()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (it_col, psnr_col) = match (col("iteration"), col("psnr")) {
        (Some(i), Some(p)) => (i, p),
        _ => return Err(bad("trace needs `iteration` and `psnr` columns".into())),
    };
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let get = |c: usize| fields.get(c).map(|s| s.trim()).ok_or_else(|| bad(format!("line {}: missing field", n + 2)));
        let it: usize = get(it_col)?
            .parse()
            .map_err(|_| bad(format!("line {}: bad iteration", n + 2)))?;
        rows.push((it, get(psnr_col)?.to_string()));
    }
    Ok(rows)
}

/// Merged CSV: `iteration` then one PSNR column per trace; blanks where a
/// trace has no value.
pub fn merge_traces(traces: &[(String, Vec<(usize, String)>)]) -> String {
    let mut iterations: Vec<usize> = traces.iter().flat_map(|(_, r)| r.iter().map(|(i, _)| *i)).collect();
    iterations.sort_unstable();
    iterations.dedup();
    let mut out = String::from("iteration");
    for (label, _) in traces {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    let maps: Vec<std::collections::BTreeMap<usize, &str>> = traces
        .iter()
        .map(|(_, r)| r.iter().map(|(i, v)| (*i, v.as_str())).collect())
        .collect();
    for it in iterations {
        out.push_str(&it.to_string());
        for m in &maps {
            out.push(',');
            out.push_str(m.get(&it).copied().unwrap_or(""));
        }
        out.push('\n');
    }
    out
}

fn trace_plot(a: TracePlotArgs) -> Result<()> {
    let labels: Vec<String> = match &a.labels {
        Some(l) if l.len() == a.traces.len() => l.clone(),
        Some(l) => {
            return Err(Error::invalid(format!(
                "{} labels for {} traces",
                l.len(),
                a.traces.len()
            )))
        }
        None => a
            .traces
            .iter()
            .map(|p| {
                let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                name.trim_end_matches(".csv").trim_end_matches(".trace").to_string()
            })
            .collect(),
    };
    let mut traces = Vec::new();
    for (label, path) in labels.into_iter().zip(&a.traces) {
        traces.push((label, read_trace_psnr(path)?));
    }
    let csv = merge_traces(&traces);
    match &a.out {
        Some(out) => {
            ensure_parent(out)?;
            write_text(out, &csv)
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
