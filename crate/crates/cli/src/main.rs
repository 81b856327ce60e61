//! `bevkit`: scene generation, pipeline runs, training, ablation,
//! evaluation, BEV dumps and the property-suite runner.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bevkit_core::check::Sabotage;
use bevkit_core::Error;
use clap::{Args, Parser, Subcommand};

pub const THREADS_ENV: &str = "BEVKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "bevkit", version, about = "Desk-scale LiDAR-camera BEV detection")]
pub struct Cli {
    /// Sectioned TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; `BEVKIT_THREADS` takes precedence.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a scene with its point cloud, camera images and rig.
    Gen,
    /// Run the pipeline on a generated scene and write detections and BEV images.
    Run(RunArgs),
    /// Train on generated scenes and evaluate on held-out ones.
    Train,
    /// Train and evaluate the six module configurations.
    Ablate,
    /// Score detection files against scene ground truth.
    Eval(EvalArgs),
    /// Run the property suites.
    Check(CheckArgs),
    /// Write ray, point, camera, LiDAR and fused BEV maps as 16-bit PGM.
    DumpBev(SceneArgs),
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    /// Directory written by `gen`.
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Trained parameters (`.bkm`); freshly initialized from the seed if absent.
    #[arg(long, value_name = "FILE")]
    pub params: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Replace the predicted heatmap by one with 1.0 at every ground-truth cell.
    #[arg(long)]
    pub oracle_heatmap: bool,
    /// Drop detections whose heatmap peak is not above this value.
    #[arg(long, value_name = "P", default_value_t = 0.0)]
    pub min_heat: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scene directories or `scene.toml` files, paired in order with `--detections`.
    #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
    pub scene: Vec<PathBuf>,
    /// Detection CSV files.
    #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
    pub detections: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Inject a known fault to confirm the suites catch it.
    #[arg(long, value_name = "FAULT")]
    pub sabotage: Option<Sabotage>,
    /// Only run suites whose name contains this text.
    #[arg(long, value_name = "NAME")]
    pub suite: Option<String>,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn property(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Module { source, .. } => root(source),
        other => other,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_shape_error() {
            3
        } else {
            match root(&e) {
                Error::Io { .. } | Error::Parse { .. } => 2,
                _ => 1,
            }
        };
        Failure { code, message: e.to_string() }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Failure { code: 2, message: format!("{THREADS_ENV}=`{v}` is not a positive integer") }),
        Err(_) => Ok(flag.filter(|&n| n > 0)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = thread_count(cli.threads).and_then(|threads| {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::property(format!("thread pool: {e}")))?;
        }
        commands::dispatch(&cli)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
