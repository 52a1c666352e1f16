//! `stegact`: data generation, embedding, training, evaluation, ablations,
//! wavelet inspection and reporting for stego-domain action recognition.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use stegact::Error;

#[derive(Parser, Debug)]
#[command(name = "stegact", version, about = "Action recognition on wavelet-domain stego videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic motion dataset and its manifest.
    Gendata(GendataArgs),
    /// Embed secrets into covers and write the stego pairs.
    Embed(EmbedArgs),
    /// Train a classifier on stego clips.
    Train(TrainArgs),
    /// Evaluate a checkpoint on stego clips.
    Eval(EvalArgs),
    /// Run an ablation suite and print its table.
    Ablate(AblateArgs),
    /// Dump the wavelet bands of one clip with an energy table.
    InspectDwt(InspectArgs),
    /// Render run records as text tables and attention heatmaps.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// TOML experiment config; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GendataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory (overwritten).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Training clips.
    #[arg(long, default_value_t = 200)]
    pub clips: usize,
    /// Validation clips.
    #[arg(long, default_value_t = 100)]
    pub val_clips: usize,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 40)]
    pub train_covers: usize,
    #[arg(long, default_value_t = 20)]
    pub eval_covers: usize,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory or manifest [env: STEGACT_DATA_ROOT; default: in-memory synthetic]
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory (overwritten).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Embedding strength.
    #[arg(long, default_value_t = 0.05)]
    pub strength: f64,
    /// Embed at most this many secrets (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
}

#[derive(Args, Debug)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Spatial promotion loss weight.
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    /// Temporal promotion loss weight.
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    /// Cross-band subtraction strength.
    #[arg(long, default_value_t = 0.2)]
    pub theta: f64,
    /// Backbone base width.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// Position encoding: none, absolute, rope or dytemp.
    #[arg(long, default_value = "dytemp")]
    pub pe: String,
    /// Band groups, `|` between groups and `,` within.
    #[arg(long, default_value = "LL|LH|HL|HH")]
    pub grouping: String,
    /// Embedding strength.
    #[arg(long, default_value_t = 0.05)]
    pub strength: f64,
    /// Disable secret augmentation.
    #[arg(long, default_value_t = false)]
    pub no_augment: bool,
    /// Keep each secret on the same cover every epoch.
    #[arg(long, default_value_t = false)]
    pub fixed_pairing: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory (overwritten) instead of a timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory or checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// random, fixed_cover or fixed_cover:N
    #[arg(long, default_value = "random")]
    pub pairing: String,
    /// Repeat fixed-cover evaluation over this many covers (0 = off).
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
    /// Also run the frame attacker on raw and stego frames.
    #[arg(long, default_value_t = false)]
    pub attack: bool,
    /// Embedding strength.
    #[arg(long, default_value_t = 0.05)]
    pub strength: f64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// modules, pe, grouping or hyper
    #[arg(long)]
    pub suite: String,
    /// Directory for the table and rows (overwritten).
    #[arg(long, default_value = "ablations")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Clip file or frame directory; a synthetic clip when absent.
    #[arg(long)]
    pub clip: Option<PathBuf>,
    /// Class of the synthetic clip.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    /// Output directory for band dumps (overwritten).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Validation clips to draw attention heatmaps for.
    #[arg(long, default_value_t = 2)]
    pub clips: usize,
    /// Output directory [default: <run>/report]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// True when `id` was typed on the command line rather than defaulted.
pub fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

/// Exit code and short tag for an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::Dimension(_) => (1, "config"),
        Error::Data { .. } | Error::Io(_) => (2, "data"),
        Error::Numerical(_) => (3, "numerical"),
    }
}

fn final_line(v: serde_json::Value) {
    eprintln!("{v}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.kind().as_str().unwrap_or("invalid arguments");
            final_line(serde_json::json!({"status": "error", "kind": "config", "code": 1, "message": msg}));
            return ExitCode::from(1);
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from this parser");
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match commands::run(cli.command, sub) {
        Ok(fingerprint) => {
            final_line(serde_json::json!({"status": "ok", "code": 0, "command": name, "fingerprint": fingerprint}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error: {e}");
            final_line(serde_json::json!({"status": "error", "kind": kind, "code": code, "command": name, "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
