use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use thiserror::Error;

use trojatensor::cluster::Method;
use trojatensor::features::{RpScheme, Scaling};
use trojatensor::heatmap::{render_heatmap, HeatmapStyle};
use trojatensor::pipeline::{detect, detect_path, DetectOptions, PipelineError, StageTimings};
use trojatensor::report::{self, ReportError};
use trojatensor::stats::{CorrelationReport, Multiplicity};
use trojatensor::synth::{generate_zoo, write_zoo, SynthError, SynthSpec};
use trojatensor::zoo::{activations_from_npy, load_manifest, load_zoo, write_activations, IngestError};
use trojatensor::DMatrix;

const THREADS_ENV: &str = "TROJATENSOR_THREADS";

#[derive(Parser, Debug)]
#[command(name = "trojatensor", version, about = "Backdoor detection across model zoos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic zoo with a planted backdoor subspace.
    Synth(SynthArgs),
    /// Convert an (M, C, d) .npy array to an activation file.
    Convert(ConvertArgs),
    /// Run detection on a zoo and write the report files.
    Detect(DetectArgs),
    /// Time every pipeline stage per method.
    Bench(BenchArgs),
    /// Summarize an existing report.json and optionally re-render its heatmap.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    models: usize,
    #[arg(long, default_value_t = 0.5)]
    backdoor_fraction: f64,
    #[arg(long, default_value_t = 10)]
    exemplars: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    d_min: usize,
    #[arg(long, default_value_t = 512)]
    d_max: usize,
    #[arg(long, default_value_t = 5)]
    shared_dim: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.1)]
    gain_jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Model id stored with the activations (defaults to the input file stem).
    #[arg(long)]
    id: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Iva,
    Parafac2,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Iva => Method::Iva,
            MethodArg::Parafac2 => Method::Parafac2,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Gaussian,
    Sparse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScalingArg {
    Center,
    UnitRms,
    Standardize,
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = 500)]
    rp_dim: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Gaussian)]
    rp_scheme: SchemeArg,
    /// Draw an independent projection per model instead of one shared projection.
    #[arg(long)]
    rp_per_model: bool,
    #[arg(long, value_enum, default_value_t = ScalingArg::UnitRms)]
    scaling: ScalingArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// PCA/IVA model order.
    #[arg(long, default_value_t = 10)]
    order: usize,
    #[arg(long, default_value_t = 1e-6)]
    iva_tol: f64,
    #[arg(long, default_value_t = 1024)]
    iva_max_iter: usize,
    /// PARAFAC2 rank.
    #[arg(long, default_value_t = 10)]
    rank: usize,
    #[arg(long, default_value_t = 1e-8)]
    pf2_tol: f64,
    #[arg(long, default_value_t = 2000)]
    pf2_max_iter: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Bonferroni over the K-1 tests of a row instead of all pairs.
    #[arg(long)]
    per_row_bonferroni: bool,
}

impl PipelineArgs {
    fn options(&self, method: Method) -> DetectOptions {
        let mut o = DetectOptions::default().with_seed(self.seed);
        o.method = method;
        o.rp.target_dim = self.rp_dim;
        o.rp.scheme = match self.rp_scheme {
            SchemeArg::Gaussian => RpScheme::Gaussian,
            SchemeArg::Sparse => RpScheme::SparseSign,
        };
        o.rp.shared = !self.rp_per_model;
        o.scaling = match self.scaling {
            ScalingArg::Center => Scaling::Center,
            ScalingArg::UnitRms => Scaling::UnitRms,
            ScalingArg::Standardize => Scaling::Standardize,
        };
        o.order = match method {
            Method::Iva => self.order,
            Method::Parafac2 => self.rank,
        };
        o.iva.tol = self.iva_tol;
        o.iva.max_iter = self.iva_max_iter;
        o.parafac2.tol = self.pf2_tol;
        o.parafac2.max_iter = self.pf2_max_iter;
        o.alpha = self.alpha;
        o.multiplicity = if self.per_row_bonferroni {
            Multiplicity::PerRow
        } else {
            Multiplicity::AllPairs
        };
        o
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MethodArg::Iva, MethodArg::Parafac2])]
    methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report.json written by `detect`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    cell: usize,
}

#[derive(Error, Debug)]
enum CliError {
    #[error("ingest failed: {0}")]
    Ingest(#[from] IngestError),
    #[error("synthesis failed: {0}")]
    Synth(#[from] SynthError),
    #[error("detection failed: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("writing outputs failed: {0}")]
    Report(#[from] ReportError),
    #[error("cannot read {}: {source}", .path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report {}: {detail}", .path.display())]
    BadReport { path: PathBuf, detail: String },
    #[error("{0}")]
    Usage(String),
}

enum Outcome {
    Done,
    NotConverged,
}

fn configure_threads() {
    let Ok(value) = std::env::var(THREADS_ENV) else { return };
    match value.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("could not size the worker pool: {e}");
            }
        }
        _ => warn!("ignoring {THREADS_ENV}={value}: expected a positive integer"),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<Outcome, CliError> {
    let spec = SynthSpec {
        models: a.models,
        backdoor_fraction: a.backdoor_fraction,
        exemplars: a.exemplars,
        classes: a.classes,
        d_min: a.d_min,
        d_max: a.d_max,
        shared_dim: a.shared_dim,
        snr_db: a.snr_db,
        gain_jitter: a.gain_jitter,
        seed: a.seed,
    };
    let zoo = generate_zoo(&spec)?;
    let path = write_zoo(&zoo, &a.out)?;
    println!("wrote {} models to {}", zoo.sets.len(), path.display());
    Ok(Outcome::Done)
}

fn cmd_convert(a: &ConvertArgs) -> Result<Outcome, CliError> {
    let id = a
        .id
        .clone()
        .or_else(|| a.input.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into());
    if !a.input.exists() {
        return Err(IngestError::MissingFile(a.input.clone()).into());
    }
    let set = activations_from_npy(&id, &a.input)?;
    write_activations(&set, &a.output)?;
    println!(
        "wrote {} ({}x{}x{})",
        a.output.display(),
        set.exemplars,
        set.classes,
        set.width
    );
    Ok(Outcome::Done)
}

fn cmd_detect(a: &DetectArgs) -> Result<Outcome, CliError> {
    let opts = a.pipeline.options(a.method.into());
    let (rep, timings) = detect_path(&a.manifest, &opts)?;
    report::write_all(&rep, &a.out)?;
    info!("finished in {:.2}s", timings.total().as_secs_f64());
    print!("{}", report::summary(&rep));
    println!("outputs in {}", a.out.display());
    if rep.converged() {
        Ok(Outcome::Done)
    } else {
        warn!("decomposition did not converge; results are from the last iterate");
        Ok(Outcome::NotConverged)
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn cmd_bench(a: &BenchArgs) -> Result<Outcome, CliError> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &m in &a.methods {
        let method: Method = m.into();
        let opts = a.pipeline.options(method);
        let mut runs: Vec<StageTimings> = Vec::with_capacity(a.repeats);
        for _ in 0..a.repeats {
            let t = std::time::Instant::now();
            let manifest = load_manifest(&a.manifest)?;
            let sets = load_zoo(&manifest)?;
            let ingest = t.elapsed();
            let (_, mut timings) = detect(&manifest, &sets, &opts)?;
            timings.ingest = ingest;
            runs.push(timings);
        }
        let pick = |f: fn(&StageTimings) -> Duration| median(runs.iter().map(f).collect());
        rows.push((
            method.to_string(),
            StageTimings {
                ingest: pick(|t| t.ingest),
                features: pick(|t| t.features),
                decomposition: pick(|t| t.decomposition),
                stats: pick(|t| t.stats),
            },
        ));
    }
    report::write_timings(&rows, &a.out)?;
    for (m, t) in &rows {
        println!("{m}: total {:.3}s (decomposition {:.3}s)", t.total().as_secs_f64(), t.decomposition.as_secs_f64());
    }
    Ok(Outcome::Done)
}

fn matrix_from_json<T, F>(value: &serde_json::Value, path: &Path, field: &str, f: F) -> Result<DMatrix<T>, CliError>
where
    T: nalgebra::Scalar,
    F: Fn(&serde_json::Value) -> Option<T>,
{
    let bad = |detail: String| CliError::BadReport {
        path: path.to_path_buf(),
        detail,
    };
    let rows = value
        .get("correlation")
        .and_then(|c| c.get(field))
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad(format!("missing correlation.{field}")))?;
    let k = rows.len();
    let mut flat = Vec::with_capacity(k * k);
    for row in rows {
        let row = row.as_array().filter(|r| r.len() == k).ok_or_else(|| bad(format!("correlation.{field} is not square")))?;
        for v in row {
            flat.push(f(v).ok_or_else(|| bad(format!("bad entry in correlation.{field}")))?);
        }
    }
    Ok(DMatrix::from_row_iterator(k, k, flat))
}

fn cmd_report(a: &ReportArgs) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&a.input).map_err(|source| CliError::Read {
        path: a.input.clone(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::BadReport {
        path: a.input.clone(),
        detail: e.to_string(),
    })?;
    let get = |k: &str| value.get(k).cloned().unwrap_or(serde_json::Value::Null);
    println!("method: {}", get("method"));
    println!("confusion: {}", get("confusion"));
    println!("metrics: {}", get("metrics"));
    println!("ci_halfwidth: {}", get("ci_halfwidth"));
    println!("roc_auc: {}", get("roc_auc"));
    if let Some(s) = value.get("clustering").and_then(|c| c.get("mean_silhouette")) {
        println!("mean silhouette: {s}");
    }
    if let Some(out) = &a.heatmap {
        let r = matrix_from_json(&value, &a.input, "r", |v| v.as_f64())?;
        let significant = matrix_from_json(&value, &a.input, "significant", |v| v.as_bool())?;
        let k = r.nrows();
        let corr = CorrelationReport {
            p_raw: DMatrix::zeros(k, k),
            p_adj: DMatrix::zeros(k, k),
            r,
            significant,
            sample_size: 0,
            alpha: 0.0,
        };
        let style = HeatmapStyle {
            cell: a.cell,
            ..Default::default()
        };
        std::fs::write(out, render_heatmap(&corr, &style).to_ppm()).map_err(|source| CliError::Read {
            path: out.clone(),
            source,
        })?;
        println!("heatmap written to {}", out.display());
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
