//! `nativeres`: pipeline CLI over the nativeres library. Subcommands map
//! one-to-one onto the library modules: analyze (taxonomy + balance), budget
//! (patch plans), pack (sequence packing), encode (seeded reference forward),
//! score (EM/ANLS), report/diff (cell grids), augment (rebalancing).
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 I/O error. Every
//! subcommand is deterministic for fixed inputs, configuration, and seed;
//! output files are written atomically (temp + rename).

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad input, config, or arguments: exit 1.
    Validation(String),
    /// Filesystem or encoding failure: exit 2.
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nativeres",
    version,
    about = "Native-resolution pipeline tools: dataset taxonomy, patch budgeting, \
             sequence packing, a seeded reference encoder, and EM/ANLS evaluation"
)]
struct Cli {
    /// TOML configuration file; built-in defaults apply when absent.
    /// NATIVERES_<SECTION>_<KEY> environment variables override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a manifest into the 7x5 area/ratio grid and audit balance
    Analyze {
        /// Line-delimited manifest (one JSON record per line)
        manifest: PathBuf,
        /// Relative deviation from total/35 tolerated per cell
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        /// Directory for distribution.csv and balance.json
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
        /// Image directory for records without width/height (default:
        /// the manifest's directory)
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
    },

    /// Print a patch plan per record (source, planned, grid, pre, post)
    Budget {
        manifest: PathBuf,
        /// Plan every record to this fixed square side instead of its
        /// native resolution (must be a multiple of patch_size)
        #[arg(long, value_name = "PX")]
        fixed_res: Option<u32>,
        /// Directory for plans.jsonl
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
    },

    /// Pack per-record token sequences into fixed-capacity bins
    Pack {
        manifest: PathBuf,
        /// Bin capacity in tokens (default from config)
        #[arg(long)]
        capacity: Option<usize>,
        /// first_fit | first_fit_decreasing | best_fit (default from config)
        #[arg(long)]
        policy: Option<String>,
        /// Which plan count to pack: post-merge tokens or pre-merge patches
        #[arg(long, value_parser = ["post", "pre"], default_value = "post")]
        length: String,
        /// Directory for bins.jsonl and pack_stats.json
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
    },

    /// Run the seeded reference encoder over a manifest sample and report
    /// the packed-vs-unpacked deviation
    Encode {
        manifest: PathBuf,
        /// Weight and payload seed (default from config)
        #[arg(long)]
        seed: Option<u64>,
        /// Packing capacity in pre-merge patches; grows automatically to fit
        /// the largest image unless set explicitly
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long)]
        policy: Option<String>,
        /// Encode only the first N records (0 = all)
        #[arg(long, default_value_t = 8)]
        sample: usize,
        /// Directory for encode.json
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
    },

    /// Score a predictions file against manifest gold answers
    Score {
        manifest: PathBuf,
        /// Line-delimited {id, prediction} records
        predictions: PathBuf,
        /// Directory for scored.jsonl
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
    },

    /// Aggregate scored answers into the per-cell accuracy grid
    Report {
        /// scored.jsonl from the score subcommand
        scored: PathBuf,
        /// Manifest supplying image dimensions per record id
        manifest: PathBuf,
        /// Directory for report.json, report.csv, report.svg
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
    },

    /// Cell-wise accuracy difference between two reports (A minus B)
    Diff {
        /// report.json for method A
        report_a: PathBuf,
        /// report.json for method B
        report_b: PathBuf,
        /// Directory for diff.json, diff.csv, diff.svg
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
    },

    /// Plan pad/resize transforms toward a target distribution, optionally
    /// applying them to image files
    Augment {
        manifest: PathBuf,
        /// Target distribution CSV (the analyze/to_csv layout)
        #[arg(long, value_name = "FILE")]
        target: PathBuf,
        /// Pad fill as a grey level, 0-255
        #[arg(long, default_value_t = 255)]
        fill: u8,
        /// Transform the image files, not just the plans
        #[arg(long)]
        apply: bool,
        #[arg(long, value_name = "DIR")]
        image_root: Option<PathBuf>,
        /// Directory for transformed images (default: <out-dir>/images)
        #[arg(long, value_name = "DIR")]
        images_out: Option<PathBuf>,
        /// Directory for augment_plans.jsonl (and augmented_manifest.jsonl
        /// with --apply)
        #[arg(short, long, default_value = "out", value_name = "DIR")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Analyze {
            manifest,
            tolerance,
            out_dir,
            image_root,
        } => commands::analyze(&manifest, tolerance, &out_dir, image_root.as_deref()),
        Command::Budget {
            manifest,
            fixed_res,
            out_dir,
            image_root,
        } => commands::budget(&manifest, fixed_res, &cfg, &out_dir, image_root.as_deref()),
        Command::Pack {
            manifest,
            capacity,
            policy,
            length,
            out_dir,
            image_root,
        } => commands::pack(
            &manifest,
            capacity,
            policy.as_deref(),
            &length,
            &cfg,
            &out_dir,
            image_root.as_deref(),
        ),
        Command::Encode {
            manifest,
            seed,
            capacity,
            policy,
            sample,
            out_dir,
            image_root,
        } => commands::encode(
            &manifest,
            seed,
            capacity,
            policy.as_deref(),
            sample,
            &cfg,
            &out_dir,
            image_root.as_deref(),
        ),
        Command::Score {
            manifest,
            predictions,
            out_dir,
        } => commands::score(&manifest, &predictions, &cfg, &out_dir),
        Command::Report {
            scored,
            manifest,
            out_dir,
            image_root,
        } => commands::report(&scored, &manifest, &cfg, &out_dir, image_root.as_deref()),
        Command::Diff {
            report_a,
            report_b,
            out_dir,
        } => commands::diff(&report_a, &report_b, &cfg, &out_dir),
        Command::Augment {
            manifest,
            target,
            fill,
            apply,
            image_root,
            images_out,
            out_dir,
        } => commands::augment(
            &manifest,
            &target,
            fill,
            apply,
            &out_dir,
            image_root.as_deref(),
            images_out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version belong on stdout with success; genuine usage
            // errors carry clap's message to stderr and exit 1 per the
            // validation convention (clap's own default would be 2).
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
