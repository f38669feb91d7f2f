use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use stepframe::pipeline::{exit_status, Pipeline, PipelineConfig, PipelineError, Stage};
use stepframe::Execution;

/// Curate step-by-step image-text sequences from narrated how-to videos.
#[derive(Parser, Debug)]
#[command(name = "stepframe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `paths.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Window expansion in seconds.
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-video work.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Scripted response file to use instead of the text-generation service.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,

    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Transcripts to canonical sentence JSON.
    Parse,
    /// Instructional / non-instructional verdicts.
    Filter,
    /// Timestamped step lists.
    Extract,
    /// Step-to-frame alignments.
    Align,
    /// Sequence manifest.
    Assemble,
    /// Corpus statistics and length histogram.
    Stats,
    /// Train / test manifests.
    Split,
    /// Preview of training windows.
    Sample,
    /// Metric report and table.
    Eval,
    /// Every stage in order.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Parse => Stage::Parse,
            Command::Filter => Stage::Filter,
            Command::Extract => Stage::Extract,
            Command::Align => Stage::Align,
            Command::Assemble => Stage::Assemble,
            Command::Stats => Stage::Stats,
            Command::Split => Stage::Split,
            Command::Sample => Stage::Sample,
            Command::Eval => Stage::Eval,
            Command::All => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.output = out.clone();
    }
    if let Some(eps) = cli.epsilon {
        cfg.epsilon_s = eps;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(mock) = &cli.mock {
        cfg.mock_responses = Some(mock.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<i32> {
    let cfg = match load_config(cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(e.exit_code());
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let out = cfg.paths.output.clone();
    let mut pipeline = Pipeline::new(cfg, exec).context("invalid configuration")?;

    let result = match cli.command.stage() {
        Some(stage) => pipeline.run_stage(stage).map(|r| vec![r]),
        None => pipeline.run_all(),
    };
    let reports = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(e.exit_code());
        }
    };
    for r in &reports {
        eprintln!("{r}");
    }
    match cli.command {
        Command::Stats => print!("{}", std::fs::read_to_string(out.join("stats/histogram.tsv"))?),
        Command::Eval => print!("{}", std::fs::read_to_string(out.join("eval/table.txt"))?),
        _ => {}
    }
    let status = exit_status(&reports);
    if status != 0 {
        eprintln!("some videos failed; see errors.jsonl under {}", out.display());
    }
    Ok(status)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
