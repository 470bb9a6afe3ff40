use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcrec::corpus::{convert_amazon_meta, convert_amazon_reviews, save_interactions, save_jsonl};
use lcrec::embed::{hash_embed, save_embeddings, EmbeddingMatrix};
use lcrec::instruct::item_language;
use lcrec::pipeline::{run_stage, PipelineConfig, Stage};
use lcrec::{Error, Result};
use log::error;

#[derive(Parser)]
#[command(name = "lcrec", version, about = "Semantic item indexing and generative recommendation pipeline")]
struct Cli {
    /// Pipeline config (JSON). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides every module seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`paths.output_dir`).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set rec_train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Rerun stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-cluster synthetic corpus.
    Synth,
    /// Train the residual-quantized autoencoder on item embeddings.
    IndexTrain,
    /// Assign conflict-free semantic indices to every item.
    IndexAssign,
    /// Emit instruction-tuning JSONL files.
    InstructGen,
    /// Train the index-token recommender.
    RecTrain,
    /// Rank items by constrained beam search and report HR/NDCG.
    RecEval {
        /// Beam width (`eval.beam`).
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Run synth through rec-eval in order.
    All,
    /// Print the effective config as JSON.
    ShowConfig,
    /// Convert Amazon review and metadata dumps to pipeline inputs.
    ConvertAmazon {
        #[arg(long)]
        reviews: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write hashed text embeddings of this width.
        #[arg(long)]
        embed_dim: Option<usize>,
    },
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        cfg = cfg.set(o)?;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    // applied after the overrides so `--set seed=N` reaches every module too
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Command::RecEval { beam: Some(b) } = cli.command {
        cfg.eval.beam = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn convert_amazon(reviews: &Path, meta: Option<&Path>, out_dir: &Path, embed_dim: Option<usize>, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let interactions = convert_amazon_reviews(open(reviews)?)?;
    save_interactions(&interactions, out_dir.join("interactions.tsv"))?;
    println!("convert-amazon: {} interactions", interactions.len());
    let Some(meta) = meta else {
        return Ok(());
    };
    let texts = convert_amazon_meta(open(meta)?)?;
    save_jsonl(&texts, out_dir.join("items.jsonl"))?;
    println!("convert-amazon: {} item texts", texts.len());
    if let Some(d) = embed_dim {
        let items = texts.iter().map(|t| t.item_id.clone()).collect();
        let data = texts.iter().flat_map(|t| hash_embed(&item_language(t), d, seed)).collect();
        let matrix = EmbeddingMatrix::from_flat(items, d, data)?;
        save_embeddings(&matrix, out_dir.join("embeddings.tsv"))?;
        println!("convert-amazon: {} hashed embeddings of width {d}", matrix.len());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let stages: Vec<Stage> = match &cli.command {
        Command::Synth => vec![Stage::Synth],
        Command::IndexTrain => vec![Stage::IndexTrain],
        Command::IndexAssign => vec![Stage::IndexAssign],
        Command::InstructGen => vec![Stage::InstructGen],
        Command::RecTrain => vec![Stage::RecTrain],
        Command::RecEval { .. } => vec![Stage::RecEval],
        Command::All => Stage::ALL.to_vec(),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            return Ok(());
        }
        Command::ConvertAmazon {
            reviews,
            meta,
            out_dir,
            embed_dim,
        } => return convert_amazon(reviews, meta.as_deref(), out_dir, *embed_dim, cfg.seed),
    };
    for stage in stages {
        let outcome = run_stage(&cfg, stage, cli.force)?;
        for line in &outcome.summary {
            println!("{line}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
