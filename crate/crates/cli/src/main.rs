//! disciple: discover interpretable feature programs over geospatial
//! observation data.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 backend/search error, 5 internal error. Failures print a
//! machine-readable JSON object on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "disciple", version, about = "evolutionary discovery of interpretable geospatial predictors")]
struct Cli {
    /// Cap worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark world (manifest + DGRD rasters).
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of observations.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// World preset: density-synthetic, poverty-synthetic, agb-synthetic.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evolutionary search and write the result artifacts.
    Discover {
        /// Dataset directory (holds manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a program file on a data split under all four metrics.
    Eval {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Dead-code-eliminate and weight-prune a program, refitting on train.
    Simplify {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the simplified program here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Node-importance table and DOT export for a fitted program.
    Explain {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output path for the DOT file.
        #[arg(long)]
        dot: PathBuf,
    },
    /// Reference baselines on a dataset.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        /// Config used for budget matching and backend selection.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Ood,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Mean,
    Cb,
    RandomSearch,
    ZeroShot,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            return commands::fail("config", 2, &format!("thread pool: {e}"));
        }
    }
    let outcome = match cli.command {
        Command::GenData { seed, n, preset, out } => commands::gen_data(seed, n, &preset, &out),
        Command::Discover { data, config, out } => commands::discover(&data, config.as_deref(), &out),
        Command::Eval { program, data, split } => commands::eval(&program, &data, split.into()),
        Command::Simplify { program, data, out } => {
            commands::simplify(&program, &data, out.as_deref())
        }
        Command::Explain { program, data, dot } => commands::explain(&program, &data, &dot),
        Command::Baseline { kind, data, config } => {
            commands::baseline(kind.into(), &data, config.as_deref())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::fail(e.kind, e.code, &e.message),
    }
}

impl From<SplitArg> for disciple_core::data::SplitPart {
    fn from(value: SplitArg) -> Self {
        match value {
            SplitArg::Train => disciple_core::data::SplitPart::Train,
            SplitArg::Test => disciple_core::data::SplitPart::Test,
            SplitArg::Ood => disciple_core::data::SplitPart::Ood,
        }
    }
}

impl From<BaselineKind> for commands::Baseline {
    fn from(value: BaselineKind) -> Self {
        match value {
            BaselineKind::Mean => commands::Baseline::Mean,
            BaselineKind::Cb => commands::Baseline::ConceptBottleneck,
            BaselineKind::RandomSearch => commands::Baseline::RandomSearch,
            BaselineKind::ZeroShot => commands::Baseline::ZeroShot,
        }
    }
}
