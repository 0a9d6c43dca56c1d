use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::PipelineConfig;

/// Measure heap fragmentation of allocation traces.
#[derive(Parser, Debug)]
#[command(name = "binfrag", version, about)]
struct Cli {
    #[command(flatten)]
    options: GlobalOptions,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOptions {
    /// Page size in bytes (power of two). For `frag`, overrides the instance's page size.
    #[arg(long, global = true)]
    page_size: Option<u64>,

    /// Placement policy used by `simulate`.
    #[arg(long, global = true, value_enum, default_value_t = BackendKind::FirstFit)]
    backend: BackendKind,

    /// Size classes for segregated fit, comma separated and ascending.
    #[arg(long, global = true, value_delimiter = ',')]
    classes: Option<Vec<u64>>,

    /// Metadata bytes prepended to every block.
    #[arg(long, global = true, default_value_t = 0)]
    header_bytes: u64,

    /// Pages per simulated arena.
    #[arg(long, global = true, default_value_t = config::DEFAULT_ARENA_PAGES)]
    arena_pages: u64,

    /// Fragmentation worker threads [default: available parallelism].
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Skip frees of unknown addresses instead of failing.
    #[arg(long, global = true)]
    lenient: bool,

    /// Move each mapping's lowest job to address zero instead of shifting by whole pages.
    #[arg(long, global = true)]
    exact_normalize: bool,

    /// Do not count free space below the lowest live byte of a page.
    #[arg(long, global = true)]
    no_floor_gaps: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    FirstFit,
    BestFit,
    NextFit,
    SegregatedFit,
    Live,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a program under the interposition shim and record its requests.
    Trace {
        /// Trace CSV to write.
        #[arg(short, long)]
        out: PathBuf,
        /// Shared object to preload [env: BINFRAG_SHIM].
        #[arg(long)]
        shim: Option<PathBuf>,
        #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
        program: Vec<String>,
    },
    /// Replay a trace against a placement policy.
    Simulate {
        trace: PathBuf,
        /// Placement CSV to write; the mapping table goes to `<out>.maps`.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Split a placement into per-mapping bin-packing subsets.
    Pack {
        placement: PathBuf,
        /// Instance directory to write.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compute fragmentation of a packed instance.
    Frag {
        instance: PathBuf,
        /// Report CSV to write; printed to stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Cross-check the result by rasterizing the instance.
        #[arg(long)]
        oracle: bool,
    },
    /// Correlate fragmentation reports with peak RSS samples.
    Study {
        /// CSV with `workload,input,allocator,report,jobs`; report paths are relative to it.
        #[arg(long)]
        index: PathBuf,
        /// CSV with `workload,allocator,sample_index,peak_rss_kib`.
        #[arg(long)]
        rss: PathBuf,
        /// Directory for study.csv, scatter.csv and the heatmaps.
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = PipelineConfig::from_options(&cli.options).and_then(|config| match cli.command {
        Command::Trace { out, shim, program } => commands::trace(&program, &out, shim),
        Command::Simulate { trace, out } => commands::simulate(&trace, &out, &config),
        Command::Pack { placement, out } => commands::pack(&placement, &out, &config),
        Command::Frag { instance, out, oracle } => commands::frag(&instance, out.as_deref(), oracle, &config),
        Command::Study { index, rss, out } => commands::study(&index, &rss, &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
