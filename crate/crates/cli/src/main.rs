//! `geoloc`: command-line driver for descriptor pooling, indexing, search,
//! mining and recall evaluation.
//!
//! Exit codes: 0 success, 1 usage or invalid config, 2 data error,
//! 3 internal error. With `--json-errors`, stderr carries one JSON object
//! per failure.

mod commands;
mod engine;
mod error;
mod pipeline;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult, EXIT_USAGE};
use crate::report::{write_file, RunReport};

#[derive(Debug, Parser)]
#[command(name = "geoloc", version, about = "Visual geo-localization retrieval and evaluation engine")]
struct Cli {
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print errors to stderr as JSON objects.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Also write the run report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (descriptors or images plus manifests).
    Synth(commands::SynthArgs),
    /// Pool image feature maps into global descriptors.
    Aggregate(commands::AggregateArgs),
    /// Fit or apply a PCA projection.
    Pca(commands::PcaArgs),
    /// Build a nearest-neighbour index over database descriptors.
    BuildIndex(commands::BuildIndexArgs),
    /// Search query descriptors, fusing multi-crop queries.
    Search(commands::SearchArgs),
    /// Apply a query crop policy to query images.
    Preprocess(commands::PreprocessArgs),
    /// Mine training triplets.
    Mine(commands::MineArgs),
    /// Recall@N, threshold sweep and recall curves against GPS ground truth.
    Eval(commands::EvalArgs),
    /// Compare index kinds and query-time settings.
    Bench(commands::BenchArgs),
    /// Run a cached end-to-end pipeline from a JSON config.
    Pipeline(pipeline::PipelineArgs),
}

fn dispatch(cmd: &Command) -> CliResult<RunReport> {
    match cmd {
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Aggregate(a) => commands::cmd_aggregate(a),
        Command::Pca(a) => commands::cmd_pca(a),
        Command::BuildIndex(a) => commands::cmd_build_index(a),
        Command::Search(a) => commands::cmd_search(a),
        Command::Preprocess(a) => commands::cmd_preprocess(a),
        Command::Mine(a) => commands::cmd_mine(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Bench(a) => commands::cmd_bench(a),
        Command::Pipeline(a) => pipeline::cmd_pipeline(a),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::internal(e.to_string()))?;
    }
    let report = dispatch(&cli.command)?;
    let text = report.to_json();
    if let Some(p) = &cli.report {
        write_file(p, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn fail(e: &CliError, json: bool) -> ! {
    if json {
        eprintln!("{}", e.to_json());
    } else {
        eprintln!("error: {e}");
    }
    std::process::exit(e.exit_code());
}

fn main() {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            if json_errors {
                // clap's rendering: message lines, a blank line, then usage
                let text = e.to_string();
                let message: Vec<&str> = text
                    .lines()
                    .take_while(|l| !l.starts_with("Usage:"))
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .collect();
                fail(&CliError::usage(message.join(" ").trim_start_matches("error: ").to_string()), true);
            }
            let _ = e.print();
            std::process::exit(EXIT_USAGE);
        }
    };
    std::panic::set_hook(Box::new(|_| {}));
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => {}
        Ok(Err(e)) => fail(&e, cli.json_errors),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(&CliError::internal(msg), cli.json_errors)
        }
    }
}
