use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod run_config;

/// Chebyshev hop extraction + MLP-Mixer node classifier.
///
/// Results go to stdout as JSON (or JSON lines); diagnostics go to stderr.
/// Exit status: 0 success, 1 runtime failure, 2 usage or config error.
#[derive(Parser, Debug)]
#[command(name = "chebmixer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides, shared by the commands that build a model.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set k=5`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with early stopping; writes metrics.jsonl, best.ckpt and result.json.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recompute accuracy of a saved checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the numerical self-check suites.
    Verify {
        /// spectral, gradient, orthogonality, laplacian or equivariance. Repeatable; default all.
        #[arg(long = "suite")]
        suites: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break the named suite's computation on purpose.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Dump the hop sequence of a dataset's raw features as TSV.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        /// Write TSV here and print a JSON summary instead of the TSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a stochastic-block-model dataset directory.
    GenSynth {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        blocks: usize,
        #[arg(long)]
        p_in: f64,
        #[arg(long)]
        p_out: f64,
        #[arg(long, default_value_t = 16)]
        feat_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        feat_sep: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time a fixed number of training epochs.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Convert the raw Planetoid citation files (e.g. cora.content, cora.cites).
    ConvertPlanetoid {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        cites: PathBuf,
        #[arg(long, default_value = "cora")]
        name: String,
        /// Divide each feature row by its sum.
        #[arg(long)]
        row_normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<chebmixer::Error> for CliError {
    fn from(e: chebmixer::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { data, out, cfg } => commands::train(data, out, &cfg),
        Command::Eval { data, model, split, cfg } => commands::eval(&data, &model, &split, &cfg),
        Command::Verify {
            suites,
            seed,
            inject_fault,
        } => commands::verify(&suites, seed, inject_fault.as_deref()),
        Command::Extract { data, k, out, cfg } => commands::extract(&data, k, out.as_deref(), &cfg),
        Command::GenSynth {
            nodes,
            blocks,
            p_in,
            p_out,
            feat_dim,
            feat_sep,
            seed,
            out,
        } => commands::gen_synth(
            &chebmixer::data::SbmParams {
                nodes,
                blocks,
                p_in,
                p_out,
                feat_dim,
                feat_sep,
                seed,
            },
            &out,
        ),
        Command::Bench { data, epochs, cfg } => commands::bench(&data, epochs, &cfg),
        Command::ConvertPlanetoid {
            content,
            cites,
            name,
            row_normalize,
            out,
        } => commands::convert_planetoid(&content, &cites, &name, row_normalize, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
