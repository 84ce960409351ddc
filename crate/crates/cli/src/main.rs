//! `lordba`: compress LoRA factor files into double-binary adapters, train
//! toy adapters, reconstruct/inspect artifacts, run the Monte-Carlo
//! validators, and benchmark the packed kernel.
//!
//! Exit codes: 0 success, 2 input problems (missing/corrupt files, malformed
//! config), 3 validation problems (parameter values), 4 runtime failures.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lordba::adapter::diagnose;
use lordba::format::{crc32, decode_factors, save_adapter};
use lordba::kernel::{bench, report_csv, BenchShape};
use lordba::ptq::{run_admm, sign_margin, AdmmConfig, PtqError};
use lordba::qat::{adapter_toy_loss, train, QatConfig, QatError, QatInit, QatMode, ToyTask};
use lordba::theory::{
    check_entry_tail, check_reconstruction_bound, check_sign_consistency, check_signal_lowerbound,
    NoiseDist, SignNoiseModel, TheoryError,
};

// Working magnitude of the compressor's residual balancer; inputs are
// rescaled here and the fitted scales rescaled back at export.
const SOLVER_RMS: f64 = 1e-3;

#[derive(Debug)]
enum CliError {
    Input(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input: {m}"),
            CliError::Validation(m) => write!(f, "validation: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
        }
    }
}

fn ptq_err(e: PtqError) -> CliError {
    match e {
        PtqError::InvalidConfig(m) => CliError::Validation(m),
        PtqError::ZeroTarget => CliError::Input(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn qat_err(e: QatError) -> CliError {
    match e {
        QatError::InvalidConfig(_) | QatError::ShapeMismatch(_) | QatError::InitMismatch(_) => {
            CliError::Validation(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

fn theory_err(e: TheoryError) -> CliError {
    CliError::Validation(e.to_string())
}

// ---- CLI surface ---------------------------------------------------------

#[derive(Parser)]
#[command(name = "lordba", version, about, max_term_width = 100)]
struct Cli {
    /// key=value defaults file; command-line flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a double-binary adapter to an LRF1 factor file and write LBA1
    Compress(CompressArgs),
    /// Train an adapter on a planted synthetic regression task
    TrainToy(TrainToyArgs),
    /// Dump an LBA1 adapter's dense delta as CSV
    Reconstruct(ReconstructArgs),
    /// Magnitude diagnostics of an LRF1 factor file
    Diagnose(DiagnoseArgs),
    /// Monte-Carlo checks of the reconstruction theory
    McValidate(McValidateArgs),
    /// Packed-kernel throughput and storage benchmark (CSV)
    BenchKernel(BenchKernelArgs),
}

#[derive(Args)]
struct CompressArgs {
    /// input LRF1 factor file
    input: PathBuf,
    /// carrier rank R
    #[arg(short = 'R', long)]
    rank: Option<usize>,
    /// envelope count
    #[arg(short = 'l', long)]
    envelopes: Option<usize>,
    /// ADMM sweep budget
    #[arg(long)]
    sweeps: Option<usize>,
    /// penalty multiplier of the residual balancer
    #[arg(long)]
    tau: Option<f64>,
    /// residual ratio triggering a penalty change
    #[arg(long)]
    mu: Option<f64>,
    /// recorded for provenance; the compressor itself is deterministic
    #[arg(long)]
    seed: Option<u64>,
    /// output LBA1 adapter file
    #[arg(short = 'o', long)]
    output: PathBuf,
    /// write the JSON report here instead of stdout
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    steps: Option<usize>,
    /// smooth-sign temperature
    #[arg(long)]
    kappa: Option<f64>,
    /// learning rate; defaults per mode
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// warm-start adapter (LBA1); planted truth is used when omitted
    #[arg(long)]
    init: Option<PathBuf>,
    /// task input width
    #[arg(long)]
    n: Option<usize>,
    /// task output width
    #[arg(long)]
    m: Option<usize>,
    #[arg(short = 'R', long)]
    rank: Option<usize>,
    #[arg(short = 'l', long)]
    envelopes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// output LBA1 adapter file
    #[arg(short = 'o', long)]
    output: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// input LBA1 adapter file
    input: PathBuf,
    /// CSV destination; stdout when omitted
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// input LRF1 factor file
    input: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct McValidateArgs {
    /// which check to run
    #[arg(value_enum)]
    which: CheckArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(short = 'R', long)]
    rank: Option<usize>,
    #[arg(long)]
    mu_a: Option<f64>,
    #[arg(long)]
    mu_b: Option<f64>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    /// std for gaussian noise, half-width for uniform
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// quantile parameter of the theorem1 check
    #[arg(long)]
    delta: Option<f64>,
    /// comma-separated thresholds for the tail check
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchKernelArgs {
    /// shapes as TxNxRxMxL, comma separated
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<String>>,
    #[arg(long)]
    trials: Option<usize>,
    /// CSV destination; stdout when omitted
    #[arg(short = 'o', long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Freeze,
    Scratch,
}

impl FromStr for ModeArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ModeArg::Full),
            "freeze" => Ok(ModeArg::Freeze),
            "scratch" => Ok(ModeArg::Scratch),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl ModeArg {
    fn to_qat(self) -> QatMode {
        match self {
            ModeArg::Full => QatMode::Full,
            ModeArg::Freeze => QatMode::Freeze,
            ModeArg::Scratch => QatMode::Scratch,
        }
    }
    fn name(self) -> &'static str {
        match self {
            ModeArg::Full => "full",
            ModeArg::Freeze => "freeze",
            ModeArg::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CheckArg {
    /// error-vs-noise scaling of the canonical reconstruction
    Theorem1,
    /// observed-sign flip rate against the union bound
    Signcons,
    /// carrier energy lower-bound frequency
    Signal,
    /// entrywise residual tail
    Tail,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Uniform,
}

impl FromStr for NoiseArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(NoiseArg::Gaussian),
            "uniform" => Ok(NoiseArg::Uniform),
            other => Err(format!("unknown noise family {other:?}")),
        }
    }
}

// ---- config resolution ----------------------------------------------------

/// Flag > config-file entry > built-in default; every resolved value is
/// recorded so the report can embed the effective configuration.
struct Resolver {
    kv: BTreeMap<String, String>,
    resolved: BTreeMap<String, serde_json::Value>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut kv = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Input(format!(
                        "config {} line {}: expected key=value",
                        path.display(),
                        idx + 1
                    ))
                })?;
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Resolver { kv, resolved: BTreeMap::new() })
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        self.resolved.insert(key.to_string(), serde_json::to_value(value).unwrap());
    }

    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.kv.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Input(format!("config key {key}: cannot parse {s:?}"))),
        }
    }

    fn get<T: FromStr + Serialize>(
        &mut self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self.lookup(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    fn get_opt<T: FromStr + Serialize>(
        &mut self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.lookup(key)?,
        };
        self.record(key, &v);
        Ok(v)
    }

    fn get_required<T: FromStr + Serialize>(
        &mut self,
        flag: Option<T>,
        key: &str,
    ) -> Result<T, CliError> {
        self.get_opt(flag, key)?
            .ok_or_else(|| CliError::Validation(format!("{key} is required (flag or config file)")))
    }
}

// ---- report envelope ------------------------------------------------------

#[derive(Serialize)]
struct InputRecord {
    path: String,
    bytes: u64,
    crc32: String,
}

#[derive(Serialize)]
struct OutputRecord {
    path: String,
    bytes: u64,
    crc32: String,
}

#[derive(Serialize)]
struct Report<T: Serialize> {
    tool: &'static str,
    tool_version: &'static str,
    /// container format generation this build reads and writes
    format_version: u16,
    command: &'static str,
    config: BTreeMap<String, serde_json::Value>,
    inputs: Vec<InputRecord>,
    /// the one non-deterministic field
    wall_time_s: f64,
    result: T,
}

fn file_record(path: &Path) -> Result<(Vec<u8>, InputRecord), CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let rec = InputRecord {
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        crc32: format!("{:#010x}", crc32(&bytes)),
    };
    Ok((bytes, rec))
}

fn output_record(path: &Path) -> Result<OutputRecord, CliError> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(OutputRecord {
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        crc32: format!("{:#010x}", crc32(&bytes)),
    })
}

fn emit_report<T: Serialize>(report: &Report<T>, dest: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Runtime(format!("report serialization: {e}")))?;
    text.push('\n');
    match dest {
        Some(path) => fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_text(text: &str, dest: Option<&Path>) -> Result<(), CliError> {
    match dest {
        Some(path) => fs::write(path, text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ---- commands -------------------------------------------------------------

#[derive(Serialize)]
struct CompressResult {
    n: usize,
    m: usize,
    input_rank: usize,
    normalization: f64,
    objective_history: Vec<f64>,
    dual_identity_worst: f64,
    freeze_sweep: Option<usize>,
    sign_margin: f64,
    relative_error: f64,
    storage_bits: u64,
    bpw_carriers: f64,
    bpw_total: f64,
    output: OutputRecord,
}

fn cmd_compress(args: CompressArgs, mut r: Resolver, started: Instant) -> Result<(), CliError> {
    let (bytes, input_rec) = file_record(&args.input)?;
    let factors = decode_factors(&bytes).map_err(|e| CliError::Input(e.to_string()))?;

    let rank = r.get_required(args.rank, "rank")?;
    let envelopes = r.get(args.envelopes, "envelopes", 1usize)?;
    let mut cfg = AdmmConfig::new(rank);
    cfg.envelope_rank = envelopes;
    cfg.max_sweeps = r.get(args.sweeps, "sweeps", cfg.max_sweeps)?;
    cfg.tau = r.get(args.tau, "tau", cfg.tau)?;
    cfg.mu = r.get(args.mu, "mu", cfg.mu)?;
    cfg.r0_ref = Some(factors.rank());
    r.get(args.seed, "seed", 0u64)?;

    let delta = lordba::adapter::gauge_fix(&factors).delta();
    let (n, m) = delta.shape();
    let rms = delta.frob_norm() / ((n * m) as f64).sqrt();
    // Zero targets fall through to the solver's own diagnostic.
    let c = if rms > 0.0 { SOLVER_RMS / rms } else { 1.0 };
    let (mut adapter, state) = run_admm(&delta.scaled(c), &cfg).map_err(ptq_err)?;
    for env in adapter.envelopes.iter_mut() {
        env.beta.iter_mut().for_each(|b| *b /= c);
    }

    save_adapter(&args.output, &adapter).map_err(|e| CliError::Runtime(e.to_string()))?;
    let recon = adapter.reconstruct();
    let relative_error = delta.sub(&recon).frob_norm() / delta.frob_norm();
    let (bpw_carriers, bpw_total) = adapter.bpw();
    let result = CompressResult {
        n,
        m,
        input_rank: factors.rank(),
        normalization: c,
        objective_history: state.objective_history.iter().map(|o| o / (c * c)).collect(),
        dual_identity_worst: state.dual_identity_history.iter().cloned().fold(0.0, f64::max),
        freeze_sweep: state.freeze_sweep,
        sign_margin: sign_margin(&state),
        relative_error,
        storage_bits: adapter.storage_bits(),
        bpw_carriers,
        bpw_total,
        output: output_record(&args.output)?,
    };
    let report = Report {
        tool: "lordba",
        tool_version: env!("CARGO_PKG_VERSION"),
        format_version: 1,
        command: "compress",
        config: r.resolved,
        inputs: vec![input_rec],
        wall_time_s: started.elapsed().as_secs_f64(),
        result,
    };
    emit_report(&report, args.report.as_deref())
}

#[derive(Serialize)]
struct TrainToyResult {
    mode: String,
    steps: usize,
    kappa: f64,
    lr: f64,
    init_loss: f64,
    final_loss: f64,
    loss_history: Vec<f64>,
    trainable_params: usize,
    output: OutputRecord,
}

fn cmd_train_toy(args: TrainToyArgs, mut r: Resolver, started: Instant) -> Result<(), CliError> {
    let mode = match args.mode {
        Some(m) => m,
        None => r.lookup::<ModeArg>("mode")?.unwrap_or(ModeArg::Full),
    };
    r.record("mode", &mode.name());
    let steps = r.get(args.steps, "steps", 2000usize)?;
    let n = r.get(args.n, "n", 32usize)?;
    let m = r.get(args.m, "m", 32usize)?;
    let rank = r.get(args.rank, "rank", 4usize)?;
    let envelopes = r.get(args.envelopes, "envelopes", 1usize)?;
    let samples = r.get(args.samples, "samples", 256usize)?;
    let seed = r.get(args.seed, "seed", 0u64)?;
    if !(n.is_power_of_two() && m.is_power_of_two()) {
        return Err(CliError::Validation(
            "the planted task uses orthogonal sign carriers; n and m must be powers of two".into(),
        ));
    }
    if rank >= n.min(m) {
        return Err(CliError::Validation(format!("rank {rank} too large for {n}x{m}")));
    }

    let (task, hidden) = ToyTask::planted(n, m, rank, envelopes, samples, seed);

    let mut cfg = QatConfig::new(mode.to_qat(), steps);
    cfg.kappa = r.get(args.kappa, "kappa", cfg.kappa)?;
    cfg.lr = r.get_opt(args.lr, "lr")?;
    cfg.seed = seed;

    let init_path = match &args.init {
        Some(p) => Some(p.clone()),
        None => r.lookup::<PathBuf>("init")?,
    };
    let mut inputs = Vec::new();
    let loaded;
    let init = match (&init_path, mode) {
        (_, ModeArg::Scratch) => {
            QatInit::Random { carrier_rank: rank, envelope_rank: envelopes, r0_ref: rank }
        }
        (Some(path), _) => {
            let (bytes, rec) = file_record(path)?;
            inputs.push(rec);
            loaded = lordba::format::decode_adapter(&bytes)
                .map_err(|e| CliError::Input(e.to_string()))?;
            if loaded.n() != n || loaded.m() != m {
                return Err(CliError::Validation(format!(
                    "init adapter is {}x{}, task is {n}x{m}",
                    loaded.n(),
                    loaded.m()
                )));
            }
            QatInit::Adapter(&loaded)
        }
        // No init file: warm-start from the planted truth.
        (None, _) => QatInit::Adapter(&hidden),
    };
    r.record("init", &init_path.as_ref().map(|p| p.display().to_string()));

    let init_loss = match &init {
        QatInit::Adapter(a) => adapter_toy_loss(a, &task),
        QatInit::Random { .. } => f64::NAN,
    };
    let (trained, state) = train(&task, init, &cfg).map_err(qat_err)?;
    save_adapter(&args.output, &trained).map_err(|e| CliError::Runtime(e.to_string()))?;

    let result = TrainToyResult {
        mode: mode.name().to_string(),
        steps,
        kappa: cfg.kappa,
        lr: cfg.effective_lr(),
        init_loss,
        final_loss: *state.loss_history.last().unwrap(),
        loss_history: state.loss_history.clone(),
        trainable_params: state.trainable_params(mode.to_qat()),
        output: output_record(&args.output)?,
    };
    let report = Report {
        tool: "lordba",
        tool_version: env!("CARGO_PKG_VERSION"),
        format_version: 1,
        command: "train-toy",
        config: r.resolved,
        inputs,
        wall_time_s: started.elapsed().as_secs_f64(),
        result,
    };
    emit_report(&report, args.report.as_deref())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let (bytes, _) = file_record(&args.input)?;
    let adapter =
        lordba::format::decode_adapter(&bytes).map_err(|e| CliError::Input(e.to_string()))?;
    let delta = adapter.reconstruct();
    let mut out = String::new();
    for i in 0..delta.rows() {
        let row: Vec<String> = delta.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    emit_text(&out, args.output.as_deref())
}

#[derive(Serialize)]
struct DiagnoseResult {
    n: usize,
    m: usize,
    rank: usize,
    #[serde(flatten)]
    diagnostics: lordba::adapter::DiagnosticsReport,
}

fn cmd_diagnose(args: DiagnoseArgs, r: Resolver, started: Instant) -> Result<(), CliError> {
    let (bytes, input_rec) = file_record(&args.input)?;
    let factors = decode_factors(&bytes).map_err(|e| CliError::Input(e.to_string()))?;
    let diagnostics = diagnose(&factors).map_err(|e| CliError::Validation(e.to_string()))?;
    let result = DiagnoseResult {
        n: factors.a.rows(),
        m: factors.b.rows(),
        rank: factors.rank(),
        diagnostics,
    };
    let report = Report {
        tool: "lordba",
        tool_version: env!("CARGO_PKG_VERSION"),
        format_version: 1,
        command: "diagnose",
        config: r.resolved,
        inputs: vec![input_rec],
        wall_time_s: started.elapsed().as_secs_f64(),
        result,
    };
    emit_report(&report, args.report.as_deref())
}

fn cmd_mc_validate(args: McValidateArgs, mut r: Resolver, started: Instant) -> Result<(), CliError> {
    let n = r.get(args.n, "n", 16usize)?;
    let m = r.get(args.m, "m", 16usize)?;
    let rank = r.get(args.rank, "rank", 4usize)?;
    let trials = r.get(args.trials, "trials", 1000usize)?;
    let seed = r.get(args.seed, "seed", 0u64)?;

    let report_body = match args.which {
        CheckArg::Signal => {
            r.record("check", &"signal");
            check_signal_lowerbound(n, m, rank, trials, seed).map_err(theory_err)?
        }
        which => {
            let mu_a = r.get(args.mu_a, "mu_a", 1.0f64)?;
            let mu_b = r.get(args.mu_b, "mu_b", 1.0f64)?;
            let noise = match args.noise {
                Some(v) => v,
                None => r.lookup::<NoiseArg>("noise")?.unwrap_or(NoiseArg::Gaussian),
            };
            let scale = r.get(args.noise_scale, "noise_scale", 0.05f64)?;
            let dist = match noise {
                NoiseArg::Gaussian => {
                    r.record("noise", &"gaussian");
                    NoiseDist::Gaussian { std: scale }
                }
                NoiseArg::Uniform => {
                    r.record("noise", &"uniform");
                    NoiseDist::Uniform { half_width: scale }
                }
            };
            let model = SignNoiseModel::new(n, m, rank, mu_a, mu_b, dist, seed);
            match which {
                CheckArg::Theorem1 => {
                    r.record("check", &"theorem1");
                    let delta = r.get(args.delta, "delta", 0.05f64)?;
                    check_reconstruction_bound(&model, trials, delta).map_err(theory_err)?
                }
                CheckArg::Signcons => {
                    r.record("check", &"signcons");
                    check_sign_consistency(&model, trials).map_err(theory_err)?
                }
                CheckArg::Tail => {
                    r.record("check", &"tail");
                    let grid = match args.t_grid {
                        Some(g) => g,
                        None => vec![0.5, 1.0, 2.0, 4.0],
                    };
                    if grid.is_empty() {
                        return Err(CliError::Validation("t_grid must be non-empty".into()));
                    }
                    r.record("t_grid", &grid);
                    check_entry_tail(&model, trials, &grid).map_err(theory_err)?
                }
                CheckArg::Signal => unreachable!(),
            }
        }
    };
    let report = Report {
        tool: "lordba",
        tool_version: env!("CARGO_PKG_VERSION"),
        format_version: 1,
        command: "mc-validate",
        config: r.resolved,
        inputs: Vec::new(),
        wall_time_s: started.elapsed().as_secs_f64(),
        result: report_body,
    };
    emit_report(&report, args.report.as_deref())
}

fn parse_shape(text: &str) -> Result<BenchShape, CliError> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Validation(format!("bad shape {text:?}, want TxNxRxMxL")))?;
    if parts.len() != 5 || parts.iter().any(|&v| v == 0) {
        return Err(CliError::Validation(format!("bad shape {text:?}, want TxNxRxMxL")));
    }
    Ok(BenchShape { t: parts[0], n: parts[1], r: parts[2], m: parts[3], l: parts[4] })
}

fn cmd_bench_kernel(args: BenchKernelArgs, mut r: Resolver) -> Result<(), CliError> {
    let trials = r.get(args.trials, "trials", 5usize)?;
    if trials < 3 {
        return Err(CliError::Validation("need at least 3 trials for a stable median".into()));
    }
    let specs = match args.shapes {
        Some(s) => s,
        None => match r.lookup::<String>("shapes")? {
            Some(joined) => joined.split(',').map(str::to_string).collect(),
            None => vec![
                "8x1024x16x1024x1".into(),
                "8x1024x64x1024x1".into(),
                "8x2048x32x2048x1".into(),
            ],
        },
    };
    let shapes: Vec<BenchShape> = specs.iter().map(|s| parse_shape(s)).collect::<Result<_, _>>()?;
    let reports = bench(&shapes, trials);
    emit_text(&report_csv(&reports), args.output.as_deref())
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("LORDBA_THREADS") {
        match v.parse::<usize>() {
            Ok(k) if k >= 1 => {
                rayon::ThreadPoolBuilder::new().num_threads(k).build_global().ok();
            }
            _ => {
                eprintln!("validation: LORDBA_THREADS={v:?} is not a positive integer");
                return ExitCode::from(3);
            }
        }
    }
    let cli = Cli::parse();
    let started = Instant::now();
    let outcome = Resolver::load(cli.config.as_deref()).and_then(|r| match cli.command {
        Command::Compress(a) => cmd_compress(a, r, started),
        Command::TrainToy(a) => cmd_train_toy(a, r, started),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Diagnose(a) => cmd_diagnose(a, r, started),
        Command::McValidate(a) => cmd_mc_validate(a, r, started),
        Command::BenchKernel(a) => cmd_bench_kernel(a, r),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
