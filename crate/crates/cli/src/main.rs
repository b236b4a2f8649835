use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use duosparse_core::io::{Distribution, Dtype};
use duosparse_core::{Error, Method};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "duosparse", version, about = "Dual-sparse pruning calibration and simulation")]
struct Cli {
    /// Print only the JSON report on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "DUOSPARSE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded calibration matrix.
    GenData {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "normal", value_parser = parse_dist)]
        dist: Distribution,
        #[arg(long, default_value = "f64", value_parser = parse_dtype)]
        dtype: Dtype,
        #[arg(long)]
        out: PathBuf,
    },

    /// Write a seeded stack of dense layers.
    GenStack {
        /// Layer widths from input to output, e.g. 128,128,64.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Activation after every layer but the last.
        #[arg(long, default_value = "relu", value_parser = parse_activation)]
        hidden_activation: duosparse_core::Activation,
        /// Prune each weight independently with this probability and emit masks.
        #[arg(long)]
        random_sparsity: Option<f64>,
        #[arg(long, default_value = "f64", value_parser = parse_dtype)]
        dtype: Dtype,
        #[arg(long)]
        out: PathBuf,
    },

    /// Prune every layer of a stack against calibration data.
    Calibrate {
        #[arg(long)]
        stack: PathBuf,
        /// Calibration inputs (k × m); generated from --seed when omitted.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Sample count for generated calibration inputs.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value = "duogpt", value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        pw: f64,
        #[arg(long)]
        px: f64,
        #[arg(long, default_value_t = 128)]
        block_size: usize,
        #[arg(long, default_value_t = 0.1)]
        damp: f64,
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        act_order: bool,
        /// Select the mask over the whole n × B block instead of per row.
        #[arg(long)]
        global_selection: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; layer and mask files are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },

    /// Compare the blocked solver against the exact oracle on a small layer.
    OracleDiff {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        calib_sparse: PathBuf,
        #[arg(long)]
        calib_dense: PathBuf,
        #[arg(long)]
        pw: f64,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 0.1)]
        damp: f64,
    },

    /// Count weight loads of a dual-sparse forward pass.
    Simulate {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        px: f64,
        #[arg(long)]
        worst_case: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dist(s: &str) -> Result<Distribution, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        _ => Err(format!("unknown dtype {s:?} (expected f32 or f64)")),
    }
}

fn parse_activation(s: &str) -> Result<duosparse_core::Activation, String> {
    match s {
        "none" => Ok(duosparse_core::Activation::None),
        "relu" => Ok(duosparse_core::Activation::Relu),
        _ => Err(format!("unknown activation {s:?} (expected none or relu)")),
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        EXIT_IO
    } else if e.is_numerical() || matches!(e, Error::MalformedCsr(_)) {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }

    match commands::run(cli.command, cli.json) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
