//! `rankdfm` command-line driver.
//!
//! Every subcommand reads its declared inputs, writes one primary artifact
//! plus `<out>.manifest.json`, and refuses to overwrite existing outputs
//! unless `--force` is given.
//!
//! ```bash
//! rankdfm gen --out run/corpus.jsonl
//! rankdfm fit-features --corpus run/corpus.jsonl --out run/schema.json
//! rankdfm transform --corpus run/corpus.jsonl --schema run/schema.json --out run/featurized.jsonl
//! rankdfm make-pairs --schema run/schema.json --featurized run/featurized.jsonl --out run/pairs.jsonl
//! rankdfm train --schema run/schema.json --featurized run/featurized.jsonl --pairs run/pairs.jsonl --out run/model.json
//! ```
//!
//! Exit codes: 0 success, 2 missing, unreadable or mismatched artifact,
//! 3 invalid configuration, arguments or preconditions, 4 numeric abort,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rankdfm::eval::BenchReport;
use rankdfm::pipeline::{self, PipelineConfig, StageOutput};
use rankdfm::Error;

const EXIT_ARTIFACT: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "rankdfm", version, about = "Pairwise DeepFM pre-ranker pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when absent.
    #[arg(long, global = true, env = "RANKDFM_CONFIG")]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic matching-layer corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the feature schema on the training queries of a corpus.
    FitFeatures {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discretize a corpus with a fitted schema.
    Transform {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build ordered training pairs from the training split.
    MakePairs {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gated DeepFM.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear baseline.
    TrainBaseline {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove closed gates and bake the open ones into the weights.
    Prune {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pruned model with its structure frozen.
    Finetune {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@N and pairwise accuracy on the eval split, per slice.
    Eval {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-threaded scoring latency.
    Bench {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side quality and cost of several models.
    Compare {
        #[command(flatten)]
        data: Data,
        /// `label=path`, or a bare path labelled by its file stem.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Data {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    featurized: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_INVALID);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Artifact { .. } | Error::Format { .. } | Error::ModelMismatch(_) | Error::Corpus(_) | Error::Io(_) => {
            EXIT_ARTIFACT
        }
        Error::Config { .. }
        | Error::Precondition(_)
        | Error::SchemaFit { .. }
        | Error::Pipeline(_)
        | Error::Eval(_)
        | Error::PruneRefused(_) => EXIT_INVALID,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load_with(cli.config.as_deref(), &cli.overrides);
    match &cli.config {
        Some(p) => cfg.with_context(|| format!("loading config {}", p.display())),
        None => Ok(cfg?),
    }
}

fn parse_model_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (label, path)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let force = cli.force;
    let out = match &cli.command {
        Command::Gen { out } => pipeline::stage_gen(&cfg, out, force)?,
        Command::FitFeatures { corpus, out } => pipeline::stage_fit_features(&cfg, corpus, out, force)?,
        Command::Transform { corpus, schema, out } => pipeline::stage_transform(&cfg, corpus, schema, out, force)?,
        Command::MakePairs { data, out } => pipeline::stage_make_pairs(&cfg, &data.schema, &data.featurized, out, force)?,
        Command::Train { data, pairs, out } => {
            pipeline::stage_train(&cfg, &data.schema, &data.featurized, pairs, out, force)?
        }
        Command::TrainBaseline { data, out } => {
            pipeline::stage_train_baseline(&cfg, &data.schema, &data.featurized, out, force)?
        }
        Command::Prune { data, model, out } => {
            pipeline::stage_prune(&cfg, &data.schema, model, &data.featurized, out, force)?
        }
        Command::Finetune {
            data,
            model,
            pairs,
            out,
        } => pipeline::stage_finetune(&cfg, &data.schema, model, &data.featurized, pairs, out, force)?,
        Command::Eval { data, model, out } => {
            let o = pipeline::stage_eval(&cfg, &data.schema, model, &data.featurized, out, force)?;
            if !cli.json {
                let tsv = std::fs::read_to_string(pipeline::sidecar_path(out, ".tsv"))?;
                print!("{tsv}");
            }
            o
        }
        Command::Bench { data, model, out } => {
            let o = pipeline::stage_bench(&cfg, &data.schema, model, &data.featurized, out, force)?;
            if !cli.json {
                print_bench(out)?;
            }
            o
        }
        Command::Compare { data, models, out } => {
            let models: Vec<_> = models.iter().map(|m| parse_model_arg(m)).collect();
            let (o, rows) = pipeline::stage_compare(&cfg, &data.schema, &models, &data.featurized, out, force)?;
            if cli.json {
                println!("{}", serde_json::to_string(&rows)?);
                return Ok(());
            }
            print!("{}", pipeline::compare_table(&rows));
            o
        }
    };
    report(cli.json, &out)
}

fn print_bench(out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(out)?;
    let b: BenchReport = serde_json::from_str(&text)?;
    println!(
        "items {}  repetitions {}  median latency {:.3} us/item  stddev {:.3}  multiplies {}",
        b.items, b.repetitions, b.mean_latency_us, b.latency_stddev_us, b.multiply_count
    );
    Ok(())
}

fn report(json: bool, out: &StageOutput) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string(out)?);
    } else {
        eprintln!(
            "{}: wrote {} (sha256 {})",
            out.command,
            out.output.path,
            &out.output.sha256[..16]
        );
        if !out.summary.is_null() {
            eprintln!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
    }
    Ok(())
}
