//! `saap`: generate synthetic suites, train partitions and query models, and
//! run the MSE, probe, assigner and diagnostic experiments as CSV.
//!
//! Every flag has a config-file equivalent: `--n-keys 4096` is `n_keys=4096`
//! in a file passed with `--config`. Flags override the file.

mod commands;
mod layout;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saap_core::SaapError;

use params::Params;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] SaapError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Data(_) => "missing_data",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Plain-text key=value parameter file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data directory holding the suite and trained artifacts.
    #[arg(long, env = "SAAP_DATA_DIR", default_value = "saap-data", global = true)]
    data_dir: PathBuf,
    /// Output file (a directory for `diagnostics`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra parameter as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

/// Declares a subcommand whose flags are optional strings named after their
/// config-file keys.
macro_rules! param_args {
    ($name:ident { $( $(#[doc = $doc:literal])* $field:ident ),* $(,)? }) => {
        #[derive(Debug, Args)]
        struct $name {
            $( $(#[doc = $doc])* #[arg(long)] $field: Option<String>, )*
        }

        impl $name {
            fn pairs(&self) -> Vec<(&'static str, Option<&str>)> {
                vec![$( (stringify!($field), self.$field.as_deref()) ),*]
            }
        }
    };
}

param_args!(GenDataArgs {
    /// Number of heads.
    heads,
    train_prompts,
    eval_prompts,
    /// Keys per prompt.
    n_keys,
    /// Queries per prompt.
    n_queries,
    seed,
    d,
    n_clusters,
    drift_rate,
    ood_shift,
    planted_longrange_fraction,
    local_fraction,
    rope_base,
    /// Overwrite an existing suite.
    force,
});

param_args!(TrainKmeansArgs {
    /// Number of buckets C.
    c,
    iters,
    max_points_per_centroid,
    /// Leading keys kept out of the partition.
    sink,
    seed,
    /// Also train a partition of roped keys.
    roped,
});

param_args!(TrainQmodelArgs {
    hidden,
    lr,
    epochs,
    batch_size,
    /// Minimum distance to a query's top key for the query to be kept.
    long_range_threshold,
    sink,
    recent,
    seed,
});

param_args!(BuildIndexArgs {
    sink,
    /// Index roped keys under the roped partition.
    roped,
});

param_args!(EvalMseArgs {
    /// kmeans, kmeans_roped, saap, streaming, magicpig, kdeformer, reformer or random.
    method,
    ells,
    fractions,
    bins,
    /// Comma-separated LxR pairs (tables x bits).
    lsh,
    lsh_threshold,
    windows,
    hash_bits,
    reformer_buckets,
    reformer_rounds,
    sink,
    recent,
    group_size,
    block_size,
    max_queries,
    repetitions,
    seed,
});

param_args!(CompareBaselinesArgs {
    /// Comma-separated methods; all runnable ones when absent.
    methods,
    ells,
    fractions,
    bins,
    lsh,
    lsh_threshold,
    windows,
    hash_bits,
    reformer_buckets,
    reformer_rounds,
    sink,
    recent,
    group_size,
    block_size,
    max_queries,
    repetitions,
    seed,
});

param_args!(SweepProbesArgs {
    /// Comma-separated bucket counts.
    cs,
    ells,
    iters,
    max_points_per_centroid,
    sink,
    recent,
    group_size,
    max_queries,
    seed,
});

param_args!(CompareAssignersArgs {
    ells,
    sink,
    recent,
    max_queries,
});

param_args!(DiagnosticsArgs {
    /// Top-k used for the attention span.
    span_k,
    sample_size,
    repetitions,
    /// Comma-separated query shifts.
    shifts,
    n_ood_queries,
    sink,
    recent,
    max_queries,
    seed,
});

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic suite into the data directory.
    GenData(GenDataArgs),
    /// Train spherical k-means partitions per head.
    TrainKmeans(TrainKmeansArgs),
    /// Train the query-to-bucket model per head.
    TrainQmodel(TrainQmodelArgs),
    /// Build and save the inverted lists of every evaluation prompt.
    BuildIndex(BuildIndexArgs),
    /// MSE against selectivity for one method.
    EvalMse(EvalMseArgs),
    /// Sweep bucket counts and probe counts.
    SweepProbes(SweepProbesArgs),
    /// Coverage of the three query assigners.
    CompareAssigners(CompareAssignersArgs),
    /// Attention span, bucket balance and key/query overlap tables.
    Diagnostics(DiagnosticsArgs),
    /// MSE against selectivity for several methods in one table.
    CompareBaselines(CompareBaselinesArgs),
}

#[derive(Debug, Parser)]
#[command(name = "saap", version, about = "Partitioned sparse attention experiments")]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn collect(common: &Common, pairs: Vec<(&'static str, Option<&str>)>) -> Result<Params, CliError> {
    let mut p = match &common.config {
        Some(path) => Params::from_file(path)?,
        None => Params::default(),
    };
    for (k, v) in pairs {
        if let Some(v) = v {
            p.insert(k, v)?;
        }
    }
    for s in &common.set {
        p.insert_pair(s)?;
    }
    Ok(p)
}

fn run(root: Root) -> Result<(), CliError> {
    let c = &root.common;
    let ctx = commands::Ctx { data_dir: c.data_dir.clone(), out: c.out.clone() };
    match &root.command {
        Command::GenData(a) => commands::gen_data(&ctx, &collect(c, a.pairs())?),
        Command::TrainKmeans(a) => commands::train_kmeans(&ctx, &collect(c, a.pairs())?),
        Command::TrainQmodel(a) => commands::train_qmodel(&ctx, &collect(c, a.pairs())?),
        Command::BuildIndex(a) => commands::build_index(&ctx, &collect(c, a.pairs())?),
        Command::EvalMse(a) => commands::eval_mse(&ctx, &collect(c, a.pairs())?),
        Command::SweepProbes(a) => commands::sweep_probes(&ctx, &collect(c, a.pairs())?),
        Command::CompareAssigners(a) => commands::compare_assigners(&ctx, &collect(c, a.pairs())?),
        Command::Diagnostics(a) => commands::diagnostics(&ctx, &collect(c, a.pairs())?),
        Command::CompareBaselines(a) => commands::compare_baselines(&ctx, &collect(c, a.pairs())?),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            eprintln!("{}", error_line("usage", e.kind().as_str().unwrap_or("invalid usage")));
            return ExitCode::from(2);
        }
    };
    match run(root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}
