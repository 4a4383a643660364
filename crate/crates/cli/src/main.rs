//! `fmseg`: runs the annotation-free segmentation pipeline from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use fmseg_core::pipeline::{
    run_eval, run_infer, run_pipeline, run_stage1_command, run_synth, run_train, PipelineConfig,
};
use fmseg_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Generate the synthetic train and eval datasets.
    Synth,
    /// Produce the pseudo-annotation set.
    Stage1,
    /// Train the alignment head.
    Train,
    /// Write predicted label maps for the eval dataset.
    Infer,
    /// Score predictions and write the JSON report.
    Eval,
    /// synth (synthetic backend only), stage1, train, infer, eval.
    Pipeline,
}

#[derive(Debug, Parser)]
#[command(name = "fmseg", version, about = "Annotation-free semantic segmentation pipeline")]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// TOML config; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,

    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,

    /// Overlay majority-voted automatic masks during inference.
    #[arg(long)]
    refined: bool,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FMSEG_LOG", "warn"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn load_config(path: &Path, seed: Option<u64>, refined: bool) -> Result<PipelineConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: PipelineConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if refined {
        config.infer.refined = true;
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(command: Command, config: &PipelineConfig) -> Result<(), Error> {
    let refined = config.infer.refined;
    match command {
        Command::Synth => run_synth(config),
        Command::Stage1 => run_stage1_command(config).map(|set| {
            log::info!("stage1: {} annotations", set.annotations.len());
        }),
        Command::Train => run_train(config).map(|log| {
            if let Some(last) = log.last() {
                log::info!("train: {} steps, final loss {:.6}", log.len(), last.loss);
            }
        }),
        Command::Infer => run_infer(config, refined).map(|index| {
            log::info!("infer: {} images", index.images.len());
        }),
        Command::Eval => run_eval(config).map(|report| println!("mIoU {:.6}", report.miou)),
        Command::Pipeline => run_pipeline(config, refined).map(|report| println!("mIoU {:.6}", report.miou)),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();

    if cli.threads == 0 {
        eprintln!("error: --threads must be positive");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }

    let result = load_config(&cli.config, cli.seed, cli.refined).and_then(|config| dispatch(cli.command, &config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
