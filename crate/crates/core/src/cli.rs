//! Command-line front end. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::encode::ImageFormatKind;
use crate::eval::{emit_report, parse_csv, write_report, EvalError, ReportRow};
use crate::ingest::Task;
use crate::net::checkpoint::{load_tensor_file, save_tensor_file};
use crate::net::init::cross_modality_init;
use crate::net::optim::lr_at;
use crate::net::{NetConfig, NetError, Preset, INPUT_CHANNELS};
use crate::workflow::{self, FlowOptions, SynthOptions, TrainOptions, WorkflowError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(ConfigError::Parse { .. } | ConfigError::Invalid(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowgest", about = "Motion-only surgical gesture recognition", disable_version_flag = true)]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML configuration layered over the defaults; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Less log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub quiet: u8,
    /// Print version and build information.
    #[arg(long)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut annotated clips out of per-trial frame directories.
    Preprocess {
        #[arg(long)]
        frames_dir: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate optical flow and store quantized magnitude/direction planes.
    Flow(FlowArgs),
    /// Render a synthetic corpus with known motion classes.
    Synth(SynthArgs),
    /// Build a flow-stack first-layer kernel from an RGB kernel file.
    InitWeights {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = INPUT_CHANNELS)]
        channels: usize,
    },
    /// Train one network per cross-validation fold.
    Train(TrainArgs),
    /// Evaluate fold checkpoints and write an accuracy table.
    Evaluate(EvaluateArgs),
    /// Merge CSV tables into one report.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the learning-rate schedule.
    LrShow {
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        step_size: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output root; defaults to the input directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plane image format: png or jpeg.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<ImageFormatKind>,
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
    /// Magnitude (pixels/frame) mapped to 255.
    #[arg(long)]
    pub mag_cap: Option<f32>,
    /// Also write unquantized flow fields.
    #[arg(long)]
    pub raw: bool,
    /// Pyramid downscale ratio in (0, 1).
    #[arg(long = "scale", alias = "pyr-scale")]
    pub pyr_scale: Option<f64>,
    /// Pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Odd averaging window size in pixels.
    #[arg(long = "win", alias = "win-size")]
    pub win_size: Option<usize>,
    /// Update iterations per level.
    #[arg(long = "iters", alias = "iterations")]
    pub iterations: Option<usize>,
    /// Odd polynomial expansion neighborhood width.
    #[arg(long)]
    pub poly_n: Option<usize>,
    /// Gaussian std of the expansion applicability.
    #[arg(long)]
    pub poly_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output of the flow command.
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Architecture preset: small or bn-resnet101 (replaces the [net] section).
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Folds to train (repeatable); all folds by default.
    #[arg(long = "fold")]
    pub folds: Vec<u32>,
    /// RGB first-layer kernel file for cross-modality initialization.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Random horizontal flips during training.
    #[arg(long)]
    pub flip: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding fold_<i>/best.ckpt.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Flow root; defaults to the manifest's directory.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "fold")]
    pub folds: Vec<u32>,
    #[arg(long, default_value = "Flow BN-ResNet")]
    pub method: String,
    #[arg(long, default_value = "LOSO")]
    pub evaluation: String,
    /// Report file; `.csv` selects CSV, anything else the text table.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_format(s: &str) -> Result<ImageFormatKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "png" => Ok(ImageFormatKind::Png),
        "jpeg" | "jpg" => Ok(ImageFormatKind::Jpeg),
        other => Err(format!("unknown format '{other}' (expected png or jpeg)")),
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

pub fn version_string() -> String {
    format!(
        "flowgest {} ({} build, {}-{})",
        env!("CARGO_PKG_VERSION"),
        if cfg!(debug_assertions) { "debug" } else { "release" },
        std::env::consts::ARCH,
        std::env::consts::OS,
    )
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
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
    init_logging(cli.verbose, cli.quiet);
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8, quiet: u8) {
    let level = match 2 + verbose as i32 - quiet as i32 {
        i32::MIN..=0 => log::LevelFilter::Error,
        1 => log::LevelFilter::Warn,
        2 => log::LevelFilter::Info,
        3 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.version {
        println!("{}", version_string());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()));
    };
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Threads(e.to_string()))?;
    pool.install(|| dispatch(command, cfg))
}

fn dispatch(command: Command, mut cfg: RunConfig) -> Result<(), CliError> {
    match command {
        Command::Preprocess {
            frames_dir,
            transcripts,
            out,
        } => {
            record_paths(&mut cfg, &[("frames_dir", &frames_dir), ("transcripts", &transcripts), ("out", &out)]);
            cfg.validate()?;
            let metas = workflow::run_preprocess(&frames_dir, &transcripts, &out)?;
            cfg.echo(&out)?;
            let kept = metas.iter().filter(|m| m.is_kept()).count();
            println!("{} segments, {} clips kept -> {}", metas.len(), kept, out.display());
        }
        Command::Flow(a) => {
            apply_flow_args(&mut cfg, &a);
            let out = a.out.clone().unwrap_or_else(|| a.input.clone());
            record_paths(&mut cfg, &[("in", &a.input), ("out", &out)]);
            cfg.validate()?;
            let opts = FlowOptions {
                params: cfg.flow,
                mag_cap: cfg.encode.mag_cap,
                format: cfg.encode.format,
                jpeg_quality: cfg.encode.jpeg_quality,
                raw: cfg.encode.raw,
            };
            let n = workflow::run_flow(&a.input, &out, &opts)?;
            cfg.echo(&out)?;
            println!("flow for {n} clips -> {}", out.display());
        }
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            set(&mut s.per_class, a.per_class);
            set(&mut s.size, a.size);
            set(&mut s.frames, a.frames);
            set(&mut s.seed, a.seed);
            set(&mut s.task, a.task);
            record_paths(&mut cfg, &[("out", &a.out)]);
            cfg.validate()?;
            let s = &cfg.synth;
            let opts = SynthOptions {
                per_class: s.per_class,
                size: s.size,
                frames: s.frames,
                seed: s.seed,
                task: s.task,
            };
            let metas = workflow::run_synth(&a.out, &opts)?;
            cfg.echo(&a.out)?;
            println!("{} synthetic clips -> {}", metas.len(), a.out.display());
        }
        Command::InitWeights { rgb, out, channels } => {
            if channels == 0 {
                return Err(CliError::Usage("--channels must be positive".into()));
            }
            let kernel = load_tensor_file(&rgb)?;
            let init = cross_modality_init(&kernel, channels)?;
            save_tensor_file(&out, &init)?;
            println!("{:?} -> {:?} written to {}", kernel.dims(), init.dims(), out.display());
        }
        Command::Train(a) => {
            if let Some(p) = a.preset {
                cfg.net = NetConfig::preset(p);
            }
            let t = &mut cfg.train;
            set(&mut t.max_epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.lr_base, a.lr);
            set(&mut t.seed, a.seed);
            t.flip |= a.flip;
            check_folds(&a.folds)?;
            let mut paths = vec![("flow", &a.flow), ("out", &a.out)];
            if let Some(p) = &a.pretrained {
                paths.push(("pretrained", p));
            }
            record_paths(&mut cfg, &paths);
            cfg.validate()?;
            let folds = if a.folds.is_empty() { (1..=5).collect() } else { a.folds.clone() };
            let opts = TrainOptions {
                net: cfg.net.clone(),
                train: cfg.train.clone(),
                task: a.task,
                folds,
                pretrained: a.pretrained.clone(),
            };
            cfg.echo(&a.out)?;
            for s in workflow::run_train(&a.flow, &a.out, &opts)? {
                let best = &s.log[s.best_epoch];
                println!(
                    "fold {}: best epoch {} (val_acc {:.4}, val_loss {:.4})",
                    s.fold, s.best_epoch, best.val_acc, best.val_loss
                );
            }
        }
        Command::Evaluate(a) => {
            check_folds(&a.folds)?;
            set(&mut cfg.train.seed, a.seed);
            let flow = match &a.flow {
                Some(f) => f.clone(),
                None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            record_paths(
                &mut cfg,
                &[("manifest", &a.manifest), ("checkpoints", &a.checkpoints), ("flow", &flow), ("out", &a.out)],
            );
            cfg.validate()?;
            let result = workflow::run_evaluate(&flow, &a.manifest, &a.checkpoints, a.task, cfg.train.seed, &a.folds)?;
            for (fold, e) in &result.folds {
                println!("fold {fold}: {:.2}%", e.accuracy);
            }
            let rows = vec![ReportRow {
                method: a.method,
                evaluation: a.evaluation,
                reports: vec![result.report],
            }];
            write_report(&a.out, &rows)?;
            cfg.echo_beside(&a.out)?;
            print!("{}", emit_report(&rows));
        }
        Command::Report { inputs, out } => {
            for (i, p) in inputs.iter().enumerate() {
                cfg.paths.insert(format!("input{}", i + 1), p.clone());
            }
            record_paths(&mut cfg, &[("out", &out)]);
            let mut rows: Vec<ReportRow> = Vec::new();
            for path in &inputs {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                for row in parse_csv(&text)? {
                    match rows
                        .iter_mut()
                        .find(|r| r.method == row.method && r.evaluation == row.evaluation)
                    {
                        Some(r) => r.reports.extend(row.reports),
                        None => rows.push(row),
                    }
                }
            }
            write_report(&out, &rows)?;
            cfg.echo_beside(&out)?;
            print!("{}", emit_report(&rows));
        }
        Command::LrShow {
            epochs,
            lr,
            step_size,
            gamma,
        } => {
            let t = &mut cfg.train;
            set(&mut t.lr_base, lr);
            set(&mut t.step_size, step_size);
            set(&mut t.gamma, gamma);
            cfg.validate()?;
            println!("epoch,lr");
            for e in 0..epochs {
                println!("{e},{:e}", lr_at(e, &cfg.train));
            }
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn record_paths(cfg: &mut RunConfig, paths: &[(&str, &PathBuf)]) {
    for (k, p) in paths {
        cfg.paths.insert((*k).to_string(), (*p).clone());
    }
}

fn check_folds(folds: &[u32]) -> Result<(), CliError> {
    match folds.iter().find(|f| !(1..=5).contains(*f)) {
        Some(f) => Err(CliError::Usage(format!("--fold {f} outside 1..=5"))),
        None => Ok(()),
    }
}

fn apply_flow_args(cfg: &mut RunConfig, a: &FlowArgs) {
    let f = &mut cfg.flow;
    set(&mut f.pyramid_scale, a.pyr_scale);
    set(&mut f.levels, a.levels);
    set(&mut f.window_size, a.win_size);
    set(&mut f.iterations, a.iterations);
    set(&mut f.poly_n, a.poly_n);
    set(&mut f.poly_sigma, a.poly_sigma);
    let e = &mut cfg.encode;
    set(&mut e.format, a.format);
    set(&mut e.jpeg_quality, a.jpeg_quality);
    set(&mut e.mag_cap, a.mag_cap);
    e.raw |= a.raw;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["flowgest", "flow"]), EXIT_USAGE);
        assert_eq!(run(["flowgest", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["flowgest"]), EXIT_USAGE);
    }

    #[test]
    fn version_and_help_exit_zero() {
        assert_eq!(run(["flowgest", "--version"]), EXIT_OK);
        assert!(version_string().starts_with("flowgest "));
    }

    #[test]
    fn missing_input_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let out = dir.path().join("out");
        let code = run([
            "flowgest".into(),
            "flow".into(),
            "--in".into(),
            missing.into_os_string(),
            "--out".into(),
            out.into_os_string(),
        ]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn invalid_value_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "flowgest".into(),
            "flow".into(),
            "--in".into(),
            dir.path().as_os_str().to_owned(),
            "--out".into(),
            dir.path().join("o").into_os_string(),
            "--poly-n".into(),
            "4".into(),
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn lr_show_runs() {
        assert_eq!(run(["flowgest", "lr-show", "--epochs", "3"]), EXIT_OK);
        assert_eq!(run(["flowgest", "lr-show", "--epochs", "3", "--gamma", "0"]), EXIT_USAGE);
    }

    #[test]
    fn format_parser() {
        assert_eq!(parse_format("JPG").unwrap(), ImageFormatKind::Jpeg);
        assert!(parse_format("bmp").is_err());
    }
}
