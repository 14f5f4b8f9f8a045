//! `embalance`: command-line front end for embedding semantic balance,
//! k-means prototypes and distillation-loss evaluation.

mod commands;
mod config;
mod error;
mod io;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use embalance::balance::{DEFAULT_BETA, DEFAULT_TOPK};
use embalance::cluster::{DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use embalance::distill::{LossParams, DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_TAU};
use embalance::{validate, write_embeddings};
use serde::Serialize;

use crate::commands::{Grouping, LossInputs};
use crate::config::{PipelineConfig, DEFAULT_NEG_RATE, DEFAULT_SEED};
use crate::error::{exit, CliError, CliResult};
use crate::io::{emit_json, load_embeddings, parse_float_text};

#[derive(Debug, Parser)]
#[command(name = "embalance", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert whitespace/comma separated float text into an EMB1 file.
    Ingest(IngestArgs),
    /// Group near-duplicate embeddings and keep one representative per group.
    Dedup(DedupArgs),
    /// Spherical k-means; writes a KMC1 model file.
    Cluster(ClusterArgs),
    /// Evaluate the distillation losses on one batch.
    Loss(LossArgs),
    /// Set-size or cluster-size histogram of an embedding file.
    Stats(StatsArgs),
    /// Full pipeline from a config file and/or flags.
    Run(RunArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// L2-normalize every row before writing.
    #[arg(long)]
    normalize: bool,
    /// Free-form provenance string stored in the sidecar.
    #[arg(long)]
    source: Option<String>,
    /// Report path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DedupArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    topk: usize,
    /// Defaults to the number of worker threads.
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    out_keep: PathBuf,
    /// Canonical set label per item, one per line.
    #[arg(long)]
    out_sets: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// Student image, student text, teacher image, teacher text.
    #[arg(long, num_args = 4, value_names = ["ES", "CS", "ET", "CT"], required = true)]
    batch: Vec<PathBuf>,
    /// Cluster label per row; defaults to nearest prototype of the teacher image rows.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    prototypes: PathBuf,
    /// Accept prototypes that were not produced by k-means.
    #[arg(long)]
    allow_unverified_prototypes: bool,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Fraction of negative classes kept in the softmax.
    #[arg(long, default_value_t = DEFAULT_NEG_RATE)]
    neg_rate: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Compare analytic gradients with central finite differences.
    #[arg(long)]
    grad_check: bool,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Set labels as written by `dedup --out-sets`.
    #[arg(long, conflicts_with = "model")]
    sets: Option<PathBuf>,
    /// KMC1 model whose labels describe the input rows.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also write the histogram as `size,count` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat `key = value` config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    neg_rate: Option<f64>,
    #[arg(long, num_args = 4, value_names = ["ES", "CS", "ET", "CT"])]
    batch: Option<Vec<PathBuf>>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn effective_config(&self) -> CliResult<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        apply!(beta, topk, k, iters, tol, seed, tau, alpha, gamma, neg_rate);
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = self.chunks {
            cfg.chunks = Some(v);
        }
        if let Some(v) = &self.labels {
            cfg.labels = Some(v.clone());
        }
        if let Some(b) = &self.batch {
            cfg.batch = Some(b.clone().try_into().expect("clap enforces four values"));
        }
        if self.normalize {
            cfg.normalize = true;
        }
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct IngestReport {
    n: usize,
    dim: usize,
    normalized: bool,
    validation: embalance::embedding::ValidationReport,
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Ingest(a) => {
            let mut set = parse_float_text(&a.input)?;
            if a.normalize {
                set = embalance::normalize(&set)?;
            }
            if let Some(s) = a.source {
                set = set.with_source(s);
            }
            write_embeddings(&set, &a.out)?;
            emit_json(
                &IngestReport {
                    n: set.len(),
                    dim: set.dim(),
                    normalized: a.normalize,
                    validation: validate(&set),
                },
                a.report.as_deref(),
            )
        }
        Command::Dedup(a) => {
            let set = load_embeddings(&a.input, a.normalize)?;
            let chunks = a.chunks.unwrap_or_else(commands::default_chunks);
            let outcome = commands::dedup(&set, a.beta, a.topk, chunks)?;
            commands::write_dedup_outputs(&outcome, &a.out_keep, a.out_sets.as_deref())?;
            emit_json(&commands::DedupReport::from(&outcome.result), a.out.as_deref())
        }
        Command::Cluster(a) => {
            let set = load_embeddings(&a.input, a.normalize)?;
            let report = commands::cluster(&set, a.k, a.iters, a.tol, a.seed, &a.out_model)?;
            emit_json(&report, a.out.as_deref())
        }
        Command::Loss(a) => {
            let inputs = LossInputs {
                batch: a.batch.try_into().expect("clap enforces four values"),
                labels: a.labels,
                prototypes: a.prototypes,
                allow_unverified_prototypes: a.allow_unverified_prototypes,
                normalize: a.normalize,
                params: LossParams {
                    tau: a.tau,
                    alpha: a.alpha,
                    gamma: a.gamma,
                },
                neg_rate: a.neg_rate,
                seed: a.seed,
                grad_check: a.grad_check,
            };
            let report = commands::loss(&inputs)?;
            emit_json(&report, a.out.as_deref())
        }
        Command::Stats(a) => {
            let grouping = match (&a.sets, &a.model) {
                (Some(p), _) => Grouping::Sets(p),
                (None, Some(p)) => Grouping::Model(p),
                (None, None) => Grouping::Singletons,
            };
            let report = commands::stats(&a.input, grouping)?;
            if let Some(p) = &a.csv {
                commands::write_histogram_csv(p, &report.histogram)?;
            }
            emit_json(&report, a.out.as_deref())
        }
        Command::Run(a) => {
            let cfg = a.effective_config()?;
            if a.print_config {
                cfg.validate()?;
                return emit_json(&cfg, a.out.as_deref());
            }
            let report = pipeline::run_pipeline(&cfg)?;
            emit_json(&report, a.out.as_deref())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("EMBALANCE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("EMBALANCE_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
