//! `mbrec` command-line interface.
//!
//! Commands: `ingest`, `train`, `eval`, `bench`, `inspect`. Every
//! command validates the config before doing any work, and all outputs
//! land under `<output root>/<config hash>/`, so identical configs are
//! idempotent. Exit codes: 2 for config errors, 3 for a missing
//! checkpoint, 1 for any other failure.

use clap::{Parser, Subcommand};
use mbrec_core::checkpoint::{
    load_cache, load_checkpoint, save_cache, save_checkpoint, SequenceCache,
};
use mbrec_core::config::RunConfig;
use mbrec_core::data::{build_sequences, parse_event_log, split_leave_one_out, DatasetStats};
use mbrec_core::error::Error;
use mbrec_core::eval::{evaluate, format_summary, write_metrics};
use mbrec_core::inspect::export_inspection;
use mbrec_core::model::{Model, ModelDims};
use mbrec_core::train::{train, write_train_report};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mbrec", version, about = "Multi-behavior sequential recommender")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, default_value = "mbrec.toml")]
    config: PathBuf,
    /// `section.key=value` overrides; flags win over file values.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the event log, build splits, and write the sequence cache.
    Ingest,
    /// Train a model; writes checkpoint and per-epoch report.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint path (default: the run directory's model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the attention and propagation timing suites.
    Bench {
        #[arg(long, default_value_t = 200)]
        j: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Export attention and hypergraph matrices for one user.
    Inspect {
        #[arg(long)]
        user: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING_CHECKPOINT: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match RunConfig::load(&cli.config, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Ingest => cmd_ingest(&config).map(|_| ()),
        Command::Train => cmd_train(&config),
        Command::Eval { checkpoint } => cmd_eval(&config, checkpoint),
        Command::Bench { j, d, reps } => cmd_bench(&config, j, d, reps),
        Command::Inspect { user, checkpoint } => cmd_inspect(&config, user, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::MissingCheckpoint(path)) => {
            eprintln!("checkpoint not found: {}", path.display());
            ExitCode::from(EXIT_MISSING_CHECKPOINT)
        }
        Err(CliError::Core(Error::Config(msg))) => {
            eprintln!("invalid config: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Core(e)) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

enum CliError {
    Core(Error),
    MissingCheckpoint(PathBuf),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn cache_path(config: &RunConfig) -> PathBuf {
    config.run_dir().join("sequences.bin")
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config.run_dir().join("model.ckpt")
}

/// Load the cache when it exists for this config hash, else ingest.
fn ensure_ingested(config: &RunConfig) -> CliResult<SequenceCache> {
    let path = cache_path(config);
    if path.exists() {
        let cache = load_cache(&path)?;
        if cache.config_hash == config.hash() {
            return Ok(cache);
        }
    }
    cmd_ingest(config)
}

fn cmd_ingest(config: &RunConfig) -> CliResult<SequenceCache> {
    let schema = config.behavior_schema()?;
    let log = parse_event_log(&config.dataset.path, &schema)?;
    if log.malformed > 0 {
        eprintln!("warning: skipped {} malformed rows", log.malformed);
    }
    let stats = DatasetStats::build(&log.events, schema.behavior_count());
    let built = build_sequences(&log.events, &stats, config.model.j, schema.target())?;
    if built.excluded_users > 0 {
        eprintln!(
            "note: excluded {} users with fewer than two target interactions",
            built.excluded_users
        );
    }
    let splits = split_leave_one_out(&built.sequences, schema.target());
    let cache = SequenceCache {
        config_hash: config.hash(),
        j: config.model.j,
        stats,
        excluded_users: built.excluded_users,
        splits,
    };
    let path = cache_path(config);
    save_cache(&cache, &path)?;
    println!(
        "ingested {} events -> {} train / {} valid / {} test users ({})",
        log.events.len(),
        cache.splits.train.len(),
        cache.splits.valid.len(),
        cache.splits.test.len(),
        path.display()
    );
    Ok(cache)
}

fn cmd_train(config: &RunConfig) -> CliResult<()> {
    let cache = ensure_ingested(config)?;
    let dims = ModelDims::from_config(
        config,
        cache.stats.item_count(),
        cache.stats.behavior_count,
    );
    let mut model = Model::init(dims, config.train.seed);
    let report = train(&mut model, &cache.splits, &cache.stats, &config.train, &config.eval)?;

    let run_dir = config.run_dir();
    let ckpt = checkpoint_path(config);
    let step = report.epochs.len() as u64;
    save_checkpoint(&model, config.hash(), step, &ckpt)?;
    write_train_report(&report, &run_dir.join("train_report.csv"))?;
    for row in &report.epochs {
        let val = row
            .val
            .as_ref()
            .map(|v| format!(" val HR@5 {:.4}", v.hr_at(5)))
            .unwrap_or_default();
        println!(
            "epoch {:>3}: loss {:.4}{val} ({:.1}s)",
            row.epoch, row.loss, row.seconds
        );
    }
    if let Some(best) = report.converged_epoch {
        println!("best validation epoch: {best}");
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| checkpoint_path(config));
    if !ckpt_path.exists() {
        return Err(CliError::MissingCheckpoint(ckpt_path));
    }
    let cache = ensure_ingested(config)?;
    let dims = ModelDims::from_config(
        config,
        cache.stats.item_count(),
        cache.stats.behavior_count,
    );
    let mut model = Model::init(dims, config.train.seed);
    let loaded = load_checkpoint(&ckpt_path)?;
    model.load_params(&loaded)?;
    let metrics = evaluate(
        &model,
        &cache.splits.test,
        &cache.stats,
        &config.eval.ns,
        config.eval.n_neg,
        config.train.seed,
    )?;
    write_metrics(&metrics, &config.run_dir().join("metrics.csv"))?;
    println!("{}", format_summary(&metrics));
    Ok(())
}

fn cmd_bench(config: &RunConfig, j: usize, d: usize, reps: usize) -> CliResult<()> {
    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let cs: Vec<usize> = [1, 5, 10, 20].into_iter().filter(|c| j % c == 0).collect();
    let attention = mbrec_core::bench::benchmark_attention(j, d, &cs, reps, config.train.seed)?;
    let att_path = run_dir.join("bench_attention.csv");
    mbrec_core::bench::write_attention_table(&attention, &att_path)?;
    println!(
        "attention (J={j}, d={d}, {reps} reps; C=1 identity check max diff {:.2e}):",
        attention.c1_identity_max_diff
    );
    for row in &attention.rows {
        println!(
            "  C={:<3} low-rank {:>9.1}us  dense {:>9.1}us",
            row.c, row.median_lowrank_us, row.median_dense_us
        );
    }

    let js: Vec<usize> = [j / 2, j].into_iter().filter(|x| *x >= 2).collect();
    let hyper = mbrec_core::bench::benchmark_hyperconv(
        &js,
        config.model.k,
        config.model.w0,
        d,
        reps,
        config.train.seed,
    )?;
    let hyper_path = run_dir.join("bench_hyperconv.csv");
    mbrec_core::bench::write_hyperconv_table(&hyper, &hyper_path)?;
    println!("propagation (k={}, w0={}):", config.model.k, config.model.w0);
    for row in &hyper {
        println!(
            "  J={:<4} full {:>9.1}us  simplified {:>9.1}us  max divergence {:.3e}",
            row.j, row.median_full_us, row.median_simplified_us, row.max_abs_divergence
        );
    }
    println!("tables: {} {}", att_path.display(), hyper_path.display());
    Ok(())
}

fn cmd_inspect(config: &RunConfig, user: u64, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let ckpt_path = checkpoint.unwrap_or_else(|| checkpoint_path(config));
    if !ckpt_path.exists() {
        return Err(CliError::MissingCheckpoint(ckpt_path));
    }
    let cache = ensure_ingested(config)?;
    let seq = cache
        .splits
        .test
        .get(&user)
        .ok_or(CliError::Core(Error::UnknownUser(user)))?;
    let dims = ModelDims::from_config(
        config,
        cache.stats.item_count(),
        cache.stats.behavior_count,
    );
    let mut model = Model::init(dims, config.train.seed);
    let loaded = load_checkpoint(&ckpt_path)?;
    model.load_params(&loaded)?;
    let out_dir = config.run_dir().join(format!("inspect_user{user}"));
    let output = export_inspection(&model, user, seq, &out_dir)?;
    println!("wrote {} files to {}", output.files.len(), out_dir.display());
    Ok(())
}
