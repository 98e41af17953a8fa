//! `adafe` — command-line surface for the adaptive Gabor front end.
//!
//! One process, eight subcommands: feature extraction from WAV files,
//! filter-response and Q-trace dumps, synthetic-task generation, training,
//! evaluation, the six-variant ablation matrix, and the gradient
//! finite-difference check.
//!
//! Configuration is a key-value file (`key = value` per line, `#`
//! comments) plus repeatable `--set key=value` overrides; the full
//! effective configuration is echoed as JSON into every output directory.
//! Every command honors `--seed` and is bit-reproducible. Exit codes:
//! 0 success, 1 check or run failure, 2 partial batch failure, 64 usage
//! error. `ADAFE_THREADS` caps worker parallelism.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use adafe_core::audio::{decode_wav, encode_wav, ensure_16k, AudioError, Waveform, WavFormat};
use adafe_core::features::FeatureSeries;
use adafe_core::frontend::{frame_fd_check, Frontend, FrontendConfig, FrontendError};
use adafe_core::gabor::{synth_gabor, freq_response, GaborFilterSpec};
use adafe_core::grad::check::run_op_checks;
use adafe_core::grad::params::ParamStore;
use adafe_core::train::tasks::{gen_synthetic_task, TaskKind, ToyTask};
use adafe_core::train::{ablation_matrix, evaluate, train, TrainConfig, TrainError};

// ============================================================================
// Argument surface
// ============================================================================

#[derive(Parser)]
#[command(
    name = "adafe",
    version,
    about = "Adaptive Gabor front end: extraction, inspection, training, and evaluation",
    after_help = "Exit codes: 0 success, 1 check/run failure, 2 partial batch failure, \
                  64 usage error.\nEnvironment: ADAFE_THREADS caps worker parallelism."
)]
struct Cli {
    /// Key-value config file: one `key = value` per line, `#` comments.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set q_max=6.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for all randomized work (task generation and training).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract per-frame features from WAV files into ADFT files.
    Extract {
        /// Output directory (created if missing).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also write one CSV per input for inspection.
        #[arg(long)]
        csv: bool,
        /// Load controller parameters from a training checkpoint
        /// (default: freshly initialized from the seed).
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
        /// Input WAV files (mono PCM16 or float32; common rates resampled).
        #[arg(required = true, value_name = "WAV")]
        inputs: Vec<PathBuf>,
    },
    /// Dump Gabor filter frequency responses at several Q values as CSV.
    DumpFilters {
        /// Center frequency in Hz.
        #[arg(long, default_value_t = 3000.0)]
        fc: f64,
        /// Comma-separated Q values, one response column each.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.5, 2.0, 2.5])]
        q: Vec<f64>,
        /// Frequency-grid points spanning [0, fs/2].
        #[arg(long, default_value_t = 2048)]
        points: usize,
        /// Output directory for filters.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the front end and dump the per-frame Q and energy trace as CSV.
    DumpQtrace {
        /// Input WAV file (default: synthetic silence).
        #[arg(long, value_name = "WAV")]
        wav: Option<PathBuf>,
        /// Seconds of silence to analyze when no WAV is given.
        #[arg(long, value_name = "SECONDS", default_value_t = 1.0)]
        silence: f64,
        /// Load controller parameters from a training checkpoint.
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
        /// Output directory for qtrace.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate a synthetic task: WAV clips plus a JSON manifest.
    SynthTask {
        /// Task: loudness_tones, chirp_classes, or noisy_vowels.
        #[arg(long, value_name = "NAME")]
        task: String,
        /// Output directory for manifest.json and wavs/.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a front-end variant jointly with the classifier on a task.
    Train {
        /// Task: loudness_tones, chirp_classes, or noisy_vowels.
        #[arg(long, value_name = "NAME")]
        task: String,
        /// Output directory for checkpoint.bin and report.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate saved parameters on a task's test split.
    Eval {
        /// Task: loudness_tones, chirp_classes, or noisy_vowels.
        #[arg(long, value_name = "NAME")]
        task: String,
        /// Parameter checkpoint from `train`.
        #[arg(long, value_name = "FILE")]
        params: PathBuf,
        /// Output directory for report.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run all six variants across seeds and emit the results matrix.
    Ablate {
        /// Task: loudness_tones, chirp_classes, or noisy_vowels.
        #[arg(long, value_name = "NAME")]
        task: String,
        /// Comma-separated training seeds (one run per variant per seed).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
        seeds: Vec<u64>,
        /// Output directory for results.csv and summary.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Check every autodiff op and the one-frame graph against finite
    /// differences; prints the worst relative error per op.
    Gradcheck {
        /// Fault-injection mode: corrupt the tanh backward and expect the
        /// suite to catch it (exercises the checker itself).
        #[arg(long)]
        corrupt_tanh: bool,
    },
}

// ============================================================================
// Errors and exit codes
// ============================================================================

#[derive(Debug)]
enum CliError {
    /// Bad flags, bad config keys/values: exit 64.
    Usage(String),
    /// A computation or verification failed: exit 1.
    Run(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(format!("i/o error: {e}"))
    }
}

impl From<FrontendError> for CliError {
    fn from(e: FrontendError) -> Self {
        CliError::Run(format!("front-end error: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Run(format!("training error: {e}"))
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        CliError::Run(format!("audio error: {e}"))
    }
}

// ============================================================================
// Configuration
// ============================================================================

/// Everything a run needs, echoed verbatim into output directories.
#[derive(Debug, Clone, Serialize)]
struct FullConfig {
    /// Seed for synthetic-task generation (clip content).
    task_seed: u64,
    frontend: FrontendConfig,
    train: TrainConfig,
}

impl Default for FullConfig {
    fn default() -> Self {
        Self {
            task_seed: 0,
            frontend: FrontendConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| CliError::Usage(format!("bad value for {key}: {value:?} ({e})")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(CliError::Usage(format!("bad boolean for {key}: {other:?}"))),
    }
}

/// Applies one `key = value` pair. Unknown keys are usage errors — every
/// override must reference an existing config key.
fn apply_kv(cfg: &mut FullConfig, key: &str, value: &str) -> Result<(), CliError> {
    let f = &mut cfg.frontend;
    let t = &mut cfg.train;
    match key {
        "task_seed" => cfg.task_seed = parse_value(key, value)?,
        // Front-end geometry and behavior.
        "sample_rate" => f.sample_rate = parse_value(key, value)?,
        "n_filters" => f.n_filters = parse_value(key, value)?,
        "diff_order" => f.diff_order = parse_value(key, value)?,
        "filter_len" => f.filter_len = parse_value(key, value)?,
        "frame_ms" => f.frame_ms = parse_value(key, value)?,
        "dft_len" => f.dft_len = parse_value(key, value)?,
        "q_min" => f.q_min = parse_value(key, value)?,
        "q_max" => f.q_max = parse_value(key, value)?,
        "q_init" => f.q_init = parse_value(key, value)?,
        "fixed_q" => f.fixed_q = parse_value(key, value)?,
        "band_lo_hz" => f.band_lo_hz = parse_value(key, value)?,
        "band_hi_hz" => f.band_hi_hz = parse_value(key, value)?,
        "lda_enabled" => f.lda_enabled = parse_bool(key, value)?,
        "fixed_layer_enabled" => f.fixed_layer_enabled = parse_bool(key, value)?,
        "adaptation_enabled" => f.adaptation_enabled = parse_bool(key, value)?,
        "afc_input" => f.afc_input = parse_value(key, value)?,
        "controller_width" => f.controller_width = parse_value(key, value)?,
        "grad_through_synthesis" => f.grad_through_synthesis = parse_bool(key, value)?,
        // Training.
        "variant" => t.variant = parse_value(key, value)?,
        "seed" => t.seed = parse_value(key, value)?,
        "max_epochs" => t.max_epochs = parse_value(key, value)?,
        "patience" => t.patience = parse_value(key, value)?,
        "batch_size" => t.batch_size = parse_value(key, value)?,
        "clip_seconds" => t.clip_seconds = parse_value(key, value)?,
        "bptt_window" => t.bptt_window = parse_value(key, value)?,
        "lr" => t.lr = parse_value(key, value)?,
        "weight_decay" => t.weight_decay = parse_value(key, value)?,
        "hidden_width" => t.hidden_width = parse_value(key, value)?,
        "warm_start_bn" => t.warm_start_bn = parse_bool(key, value)?,
        "max_train_clips" => t.max_train_clips = parse_value(key, value)?,
        "max_valid_clips" => t.max_valid_clips = parse_value(key, value)?,
        other => {
            return Err(CliError::Usage(format!(
                "unknown config key {other:?} (see effective_config.json for valid keys)"
            )))
        }
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<FullConfig, CliError> {
    let mut cfg = FullConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            apply_kv(&mut cfg, key.trim(), value.trim())?;
        }
    }
    for kv in &cli.set {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        apply_kv(&mut cfg, key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.task_seed = seed;
        cfg.train.seed = seed;
    }
    cfg.frontend
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid front-end config: {e}")))?;
    Ok(cfg)
}

/// Writes the full effective configuration into the output directory so
/// every artifact records exactly how it was produced.
fn echo_config(out: &Path, cfg: &FullConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(out.join("effective_config.json"), json + "\n")?;
    Ok(())
}

fn load_task(name: &str, cfg: &FullConfig) -> Result<ToyTask, CliError> {
    let kind: TaskKind = name
        .parse()
        .map_err(|e: String| CliError::Usage(e))?;
    Ok(gen_synthetic_task(kind, cfg.task_seed))
}

fn load_params(
    fe: &Frontend<f32>,
    path: Option<&Path>,
    seed: u64,
) -> Result<ParamStore<f32>, CliError> {
    match path {
        Some(p) => ParamStore::<f32>::load_file(p)
            .map_err(|e| CliError::Run(format!("cannot load checkpoint {}: {e}", p.display()))),
        None => Ok(fe.init_params(seed)),
    }
}

// ============================================================================
// Commands
// ============================================================================

fn cmd_extract(
    cfg: &FullConfig,
    out: &Path,
    csv: bool,
    params_path: Option<&Path>,
    inputs: &[PathBuf],
) -> Result<i32, CliError> {
    echo_config(out, cfg)?;
    let fe = Frontend::<f32>::new(cfg.frontend.clone())?;
    let params = load_params(&fe, params_path, cfg.train.seed)?;

    let results: Vec<(PathBuf, Result<(), String>)> = inputs
        .par_iter()
        .map(|input| {
            let r = extract_one(&fe, &params, input, out, csv);
            (input.clone(), r)
        })
        .collect();

    let failures: Vec<&(PathBuf, Result<(), String>)> =
        results.iter().filter(|(_, r)| r.is_err()).collect();
    if !failures.is_empty() {
        let mut log = String::new();
        for (path, r) in &failures {
            let msg = r.as_ref().unwrap_err();
            let _ = writeln!(log, "{}: {}", path.display(), msg);
            eprintln!("error: {}: {}", path.display(), msg);
        }
        fs::write(out.join("errors.log"), log)?;
    }
    let ok = results.len() - failures.len();
    println!(
        "extracted {} of {} file(s){}",
        ok,
        results.len(),
        if failures.is_empty() { "".into() } else { format!(", {} failed", failures.len()) }
    );
    Ok(if failures.is_empty() {
        0
    } else if ok > 0 {
        2
    } else {
        1
    })
}

fn extract_one(
    fe: &Frontend<f32>,
    params: &ParamStore<f32>,
    input: &Path,
    out: &Path,
    csv: bool,
) -> Result<(), String> {
    let bytes = fs::read(input).map_err(|e| format!("read failed: {e}"))?;
    let wave = decode_wav(&bytes).map_err(|e| format!("decode failed: {e}"))?;
    let wave = ensure_16k(&wave).map_err(|e| format!("resample failed: {e}"))?;
    let mut scratch = fe.scratch();
    let result = fe
        .run_utterance(&wave, params, &mut scratch)
        .map_err(|e| format!("front end failed: {e}"))?;

    let channels = fe.output_channels();
    let mut series = FeatureSeries::new(channels, adafe_core::features::NUM_OCTAVES);
    let fd = result.feature_dim;
    for frame in result.features.chunks(fd) {
        series.push_frame(frame);
    }
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    series
        .save_file(&out.join(format!("{stem}.adft")))
        .map_err(|e| format!("write failed: {e}"))?;

    if csv {
        let mut text = String::from("frame");
        for ch in 0..channels {
            let _ = write!(text, ",ln_e_{ch}");
        }
        for ch in 0..channels {
            for oct in 0..adafe_core::features::NUM_OCTAVES {
                let _ = write!(text, ",cm_{ch}_{oct}");
            }
        }
        text.push('\n');
        for (t, frame) in result.features.chunks(fd).enumerate() {
            let _ = write!(text, "{t}");
            for v in frame {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
        fs::write(out.join(format!("{stem}.csv")), text)
            .map_err(|e| format!("write failed: {e}"))?;
    }
    Ok(())
}

fn cmd_dump_filters(
    cfg: &FullConfig,
    fc: f64,
    qs: &[f64],
    points: usize,
    out: &Path,
) -> Result<i32, CliError> {
    if qs.is_empty() {
        return Err(CliError::Usage("--q needs at least one value".into()));
    }
    echo_config(out, cfg)?;
    let fs_hz = cfg.frontend.sample_rate;
    let taps = cfg.frontend.filter_len;
    let mut columns = Vec::with_capacity(qs.len());
    for &q in qs {
        let spec = GaborFilterSpec::new(fc, q, taps, fs_hz)
            .map_err(|e| CliError::Usage(format!("bad filter spec: {e}")))?;
        let w: Vec<f64> = synth_gabor(&spec).map_err(|e| CliError::Run(e.to_string()))?;
        let resp = freq_response(&w, points).map_err(|e| CliError::Usage(e.to_string()))?;
        columns.push(resp);
    }
    let mut text = String::from("freq_hz");
    for &q in qs {
        let _ = write!(text, ",mag_q{q}");
    }
    text.push('\n');
    for i in 0..points {
        let freq = fs_hz / 2.0 * i as f64 / (points - 1) as f64;
        let _ = write!(text, "{freq}");
        for col in &columns {
            let _ = write!(text, ",{}", col[i]);
        }
        text.push('\n');
    }
    fs::write(out.join("filters.csv"), text)?;
    println!("wrote {} ({} Q columns, {points} rows)", out.join("filters.csv").display(), qs.len());
    Ok(0)
}

fn cmd_dump_qtrace(
    cfg: &FullConfig,
    wav: Option<&Path>,
    silence: f64,
    params_path: Option<&Path>,
    out: &Path,
) -> Result<i32, CliError> {
    echo_config(out, cfg)?;
    let wave = match wav {
        Some(p) => {
            let bytes = fs::read(p)?;
            ensure_16k(&decode_wav(&bytes)?)?
        }
        None => {
            if !(silence > 0.0) {
                return Err(CliError::Usage("--silence must be positive".into()));
            }
            let n = (silence * cfg.frontend.sample_rate).round() as usize;
            Waveform::new(vec![0.0; n], cfg.frontend.sample_rate as u32, "silence")
        }
    };
    let fe = Frontend::<f32>::new(cfg.frontend.clone())?;
    let params = load_params(&fe, params_path, cfg.train.seed)?;
    let mut scratch = fe.scratch();
    let result = fe.run_utterance(&wave, &params, &mut scratch)?;
    fs::write(out.join("qtrace.csv"), result.qtrace.to_csv())?;
    println!(
        "wrote {} ({} frames x {} channels)",
        out.join("qtrace.csv").display(),
        result.qtrace.frames(),
        result.qtrace.channels
    );
    Ok(0)
}

fn cmd_synth_task(cfg: &FullConfig, name: &str, out: &Path) -> Result<i32, CliError> {
    let task = load_task(name, cfg)?;
    echo_config(out, cfg)?;
    let wav_dir = out.join("wavs");
    fs::create_dir_all(&wav_dir)?;
    for clip in &task.clips {
        let bytes = encode_wav(&clip.wave, WavFormat::Float32);
        fs::write(wav_dir.join(format!("{}.wav", clip.id)), bytes)?;
    }
    fs::write(out.join("manifest.json"), task.manifest_json())?;
    println!(
        "wrote {} clips and manifest.json to {}",
        task.clips.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_train(cfg: &FullConfig, name: &str, out: &Path) -> Result<i32, CliError> {
    let task = load_task(name, cfg)?;
    echo_config(out, cfg)?;
    let (params, report) = train(&task, &cfg.train, &cfg.frontend)?;
    params
        .save_file(&out.join("checkpoint.bin"))
        .map_err(|e| CliError::Run(format!("cannot write checkpoint: {e}")))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("report.json"), json + "\n")?;
    println!(
        "{} seed {}: test top1 {:.4}, top5 {:.4}, {} epoch(s)",
        report.variant, report.seed, report.top1, report.top5, report.epochs
    );
    Ok(0)
}

fn cmd_eval(cfg: &FullConfig, name: &str, params_path: &Path, out: &Path) -> Result<i32, CliError> {
    let task = load_task(name, cfg)?;
    echo_config(out, cfg)?;
    let params = ParamStore::<f32>::load_file(params_path)
        .map_err(|e| CliError::Run(format!("cannot load checkpoint {}: {e}", params_path.display())))?;
    let report = evaluate(&task, &params, &cfg.train, &cfg.frontend)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("report.json"), json + "\n")?;
    println!(
        "{} on {}: test top1 {:.4}, top5 {:.4}",
        report.variant, name, report.top1, report.top5
    );
    Ok(0)
}

fn cmd_ablate(cfg: &FullConfig, name: &str, seeds: &[u64], out: &Path) -> Result<i32, CliError> {
    let task = load_task(name, cfg)?;
    echo_config(out, cfg)?;
    let matrix = ablation_matrix(&task, seeds, &cfg.frontend, &cfg.train)?;
    fs::write(out.join("results.csv"), &matrix.per_run_csv)?;
    fs::write(out.join("summary.csv"), &matrix.summary_csv)?;
    let json = serde_json::to_string_pretty(&matrix.runs).expect("reports serialize");
    fs::write(out.join("reports.json"), json + "\n")?;
    print!("{}", matrix.summary_csv);
    Ok(0)
}

fn cmd_gradcheck(corrupt_tanh: bool) -> Result<i32, CliError> {
    let mut report = run_op_checks(corrupt_tanh);
    if !corrupt_tanh {
        // The one-frame front-end graph (filter re-synthesis included).
        let frame = frame_fd_check();
        report.checks.extend(frame.checks);
    }
    for c in &report.checks {
        println!(
            "{:<22} max_rel_err {:>12.3e}  tol {:>8.1e}  {}",
            c.op,
            c.max_rel_err,
            c.tol,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    if report.all_pass() {
        println!("gradcheck: all {} checks passed", report.checks.len());
        Ok(0)
    } else {
        let failed: Vec<String> = report.failed().iter().map(|c| c.op.clone()).collect();
        println!("gradcheck: FAILED ops: {}", failed.join(", "));
        Ok(1)
    }
}

// ============================================================================
// Entry
// ============================================================================

fn init_threads() {
    if let Ok(v) = std::env::var("ADAFE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Cmd::Extract { out, csv, params, inputs } => {
            cmd_extract(&cfg, out, *csv, params.as_deref(), inputs)
        }
        Cmd::DumpFilters { fc, q, points, out } => cmd_dump_filters(&cfg, *fc, q, *points, out),
        Cmd::DumpQtrace { wav, silence, params, out } => {
            cmd_dump_qtrace(&cfg, wav.as_deref(), *silence, params.as_deref(), out)
        }
        Cmd::SynthTask { task, out } => cmd_synth_task(&cfg, task, out),
        Cmd::Train { task, out } => cmd_train(&cfg, task, out),
        Cmd::Eval { task, params, out } => cmd_eval(&cfg, task, params, out),
        Cmd::Ablate { task, seeds, out } => cmd_ablate(&cfg, task, seeds, out),
        Cmd::Gradcheck { corrupt_tanh } => cmd_gradcheck(*corrupt_tanh),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 64,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    init_threads();
    match dispatch(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code());
        }
    }
}
