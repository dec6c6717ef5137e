//! `uloop` command-line front end: argument parsing, configuration layering,
//! backend selection and the `run`, `batch`, `calibrate`, `simulate` and
//! `scenario` commands.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "uloop",
    version,
    about = "Entropy-guided refinement for language-model answers"
)]
#[command(allow_negative_numbers = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Use a scripted backend: a built-in scenario name or a scenario JSON file.
    #[arg(long, global = true, value_name = "SCENARIO")]
    pub mock: Option<String>,
    /// Never run the refinement pass.
    #[arg(long, global = true)]
    pub no_refine: bool,
    /// Leave alternatives out of the uncertainty report sent for refinement.
    #[arg(long, global = true)]
    pub no_alternatives: bool,
    /// Leave surrounding context out of the uncertainty report.
    #[arg(long, global = true)]
    pub no_context: bool,
    #[arg(long, global = true, allow_negative_numbers = true, value_name = "X")]
    pub threshold_perplexity: Option<f64>,
    /// Nats.
    #[arg(
        long,
        global = true,
        allow_negative_numbers = true,
        value_name = "NATS"
    )]
    pub threshold_entropy: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    pub threshold_count: Option<usize>,
    #[arg(long, global = true, value_name = "K")]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub parallelism: Option<usize>,
    /// Print the uncertainty report, trigger decision and logs to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    /// Trace file that run records are appended to.
    #[arg(
        long,
        global = true,
        value_name = "FILE",
        default_value = "uloop_trace.jsonl"
    )]
    pub trace_out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one query, refining once if the draft looks uncertain.
    Run { query: String },
    /// Answer every non-empty line of a file.
    Batch { file: PathBuf },
    /// Calibration bins, ECE, entropy histogram and trigger mix.
    Calibrate(CalibrateArgs),
    /// Write a synthetic logprob stream.
    Simulate(SimulateArgs),
    /// Inspect the built-in scripted scenarios.
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// CSV with `confidence,correct` columns.
    #[arg(long, value_name = "CSV")]
    pub samples: Option<PathBuf>,
    /// Trace file; supplies entropies and the trigger-cause mix.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Stream file written by `simulate`; supplies entropies.
    #[arg(long, value_name = "FILE")]
    pub stream: Option<PathBuf>,
    /// Histogram bin width in nats.
    #[arg(long, default_value_t = 0.1)]
    pub bin_width: f64,
    /// Number of equal-width confidence bins.
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    #[arg(long, value_name = "DIR", default_value = "calibration")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// TOML profile; the built-in bimodal profile is used otherwise.
    #[arg(long, value_name = "FILE")]
    pub profile: Option<PathBuf>,
    /// Fixed number of tokens (overrides the profile's length).
    #[arg(long)]
    pub length: Option<usize>,
    /// Where to write the stream; stdout if absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ScenarioAction {
    List,
    Export {
        name: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(
    args: impl IntoIterator<Item = String>,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    match commands::execute(&cli, env, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            e.exit_code()
        }
    }
}
