//! `liftvuln`: drive the lifted-IR vulnerability-classifier pipeline.
//!
//! Stages run against a TOML config (see `configs/`); command-line flags
//! override the matching config fields. `liftvuln all` runs every stage in
//! order; individual stage commands require their upstream artifacts.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use liftvuln_core::pipeline::{run, PipelineConfig, Stage};
use liftvuln_core::synth::{generate, GeneratorSpec};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "liftvuln", version, about = "Lifted LLVM IR to buffer-overflow classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// TOML pipeline config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Re-run the stage even when its inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Split seed (overrides `corpus.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// CWE tag excluded from the embedding corpus (overrides
    /// `corpus.exclude_cwe`).
    #[arg(long, global = true)]
    exclude_cwe: Option<String>,
    /// Classifier length filter (overrides `corpus.max_tokens`).
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    /// Classifier split as `train,validation` (overrides
    /// `corpus.classifier_split`).
    #[arg(long, global = true)]
    split: Option<String>,
    /// Stratify the classifier split by label.
    #[arg(long, global = true)]
    stratify: bool,
    /// Tokenizer vocabulary size (overrides `tokenizer.vocab_size`).
    #[arg(long, global = true)]
    vocab_size: Option<usize>,
    /// Embedding tap: 0-based transformer block index (overrides
    /// `embedder.embed_layer`; default is the final layer-normed states).
    #[arg(long, global = true)]
    embed_layer: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lifted-IR corpus with planted overflow motifs.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of labeled motif functions.
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Fraction of vulnerable motifs.
        #[arg(long, default_value_t = 0.4)]
        vuln_frac: f64,
        /// Generator seed.
        #[arg(long, default_value_t = 77)]
        synth_seed: u64,
        /// Label-irrelevant noise level.
        #[arg(long, default_value_t = 0)]
        difficulty: u32,
        /// Write `.ll` files directly into this directory instead of the
        /// pipeline's `synth/` stage directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Isolate function definitions from `.ll` modules.
    Extract(CommonArgs),
    /// Rewrite functions into canonical form and remove duplicates.
    Normalize(CommonArgs),
    /// Build the embedding-corpus manifest with a seeded split.
    Corpus(CommonArgs),
    /// Train the byte-level BPE tokenizer and the classifier manifest.
    Tokenizer(CommonArgs),
    /// Train the causal-transformer embedder.
    Embedder(CommonArgs),
    /// Train the word2vec baseline embedders.
    BaselineW2v(CommonArgs),
    /// Train the LSTM classifier grid (all optimizer / freeze variants).
    ClassifierGrid(CommonArgs),
    /// Collect best-epoch metrics and NA verdicts from grid runs.
    Evaluate(CommonArgs),
    /// Render the comparison report (markdown + CSV).
    Report(CommonArgs),
    /// Run every stage in order.
    All(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| anyhow!(e))?,
        None => {
            let mut cfg = PipelineConfig::default();
            cfg.out_dir = PathBuf::from("runs/default");
            cfg
        }
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.corpus.seed = seed;
    }
    if let Some(tag) = &common.exclude_cwe {
        cfg.corpus.exclude_cwe = tag.clone();
    }
    if let Some(max) = common.max_tokens {
        cfg.corpus.max_tokens = max;
    }
    if let Some(split) = &common.split {
        let parts: Vec<&str> = split.split(',').collect();
        if parts.len() != 2 {
            bail!("--split expects `train,validation`, e.g. 0.8,0.2");
        }
        let train: f64 = parts[0].trim().parse().context("--split train fraction")?;
        let val: f64 = parts[1].trim().parse().context("--split validation fraction")?;
        cfg.corpus.classifier_split = [train, val];
    }
    if common.stratify {
        cfg.corpus.stratify = true;
    }
    if let Some(v) = common.vocab_size {
        cfg.tokenizer.vocab_size = v;
    }
    if let Some(layer) = common.embed_layer {
        cfg.embedder.embed_layer = Some(layer);
    }
    Ok(cfg)
}

fn run_stage(stage: Stage, common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let outcomes = run(stage, &cfg, common.force)?;
    for o in &outcomes {
        if o.cache_hit {
            println!("{}: up to date", o.stage);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { common, n, vuln_frac, synth_seed, difficulty, dir } => {
            if let Some(dir) = dir {
                let spec = GeneratorSpec {
                    n_functions: n,
                    vulnerable_fraction: vuln_frac,
                    seed: synth_seed,
                    buffer_size_range: (8, 64),
                    difficulty,
                    raw_style: true,
                };
                let modules = generate(&spec).map_err(|e| anyhow!(e))?;
                std::fs::create_dir_all(&dir)?;
                let mut truth = String::from("file,label\n");
                for (i, gm) in modules.iter().enumerate() {
                    std::fs::write(dir.join(format!("case_{i:04}.ll")), &gm.module.content)?;
                    truth.push_str(&format!("case_{i:04}.ll,{}\n", gm.label.as_str()));
                }
                std::fs::write(dir.join("ground_truth.csv"), truth)?;
                println!("wrote {} modules to {}", modules.len(), dir.display());
                return Ok(());
            }
            let mut cfg = load_config(&common)?;
            cfg.synth.n_functions = n;
            cfg.synth.vulnerable_fraction = vuln_frac;
            cfg.synth.seed = synth_seed;
            cfg.synth.difficulty = difficulty;
            run(Stage::Synth, &cfg, common.force)?;
            Ok(())
        }
        Command::Extract(c) => run_stage(Stage::Extract, &c),
        Command::Normalize(c) => run_stage(Stage::Normalize, &c),
        Command::Corpus(c) => run_stage(Stage::Corpus, &c),
        Command::Tokenizer(c) => run_stage(Stage::Tokenizer, &c),
        Command::Embedder(c) => run_stage(Stage::Embedder, &c),
        Command::BaselineW2v(c) => run_stage(Stage::BaselineW2v, &c),
        Command::ClassifierGrid(c) => run_stage(Stage::ClassifierGrid, &c),
        Command::Evaluate(c) => run_stage(Stage::Evaluate, &c),
        Command::Report(c) => run_stage(Stage::Report, &c),
        Command::All(c) => run_stage(Stage::All, &c),
    }
}
