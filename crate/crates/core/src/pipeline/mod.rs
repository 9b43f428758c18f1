//! Stage orchestration: each stage reads upstream artifacts, writes its
//! outputs plus a provenance record, and is skipped on rerun when its
//! config slice and inputs are unchanged (cache hit by hash).
//!
//! Artifact layout under `out_dir`:
//!
//! ```text
//! synth/            case_NNNN.ll, ground_truth.csv
//! extract/          extracted.jsonl
//! normalize/        fn.jsonl, counts.json
//! corpus/           embedder_manifest.json
//! tokenizer/        vocab.json, merges.txt, lengths.json, classifier_manifest.json
//! embedder/         config.json, meta.json, tensors.bin, train_log.csv
//! word2vec/         cbow.bin, skipgram.bin
//! grid/run_NN_*/    run.json, metrics.csv
//! evaluate/         evaluation.json
//! report/           report.md, report.csv
//! events.jsonl      structured log, append-only
//! ```

mod config;

pub use config::{
    default_grid, ClassifierGridConfig, CorpusConfig, EmbedderChoice, EmbedderConfig, InputConfig,
    NormalizeConfig, PipelineConfig, ReportConfig, SynthConfig, TokenizerConfig, W2vConfig,
};

use crate::bpe::{train_bpe, BpeError, TokenizerModel};
use crate::corpus::{
    build_classifier_dataset, build_embedder_corpus, cwe_tag, label_from_name,
    read_function_records, write_function_records, CorpusError, CorpusManifest, FunctionRecord,
    Label, LabeledFunction, Split, SplitFractions,
};
use crate::eval::{comparison_report, read_external_rows, EvalError, ReportRow};
use crate::exec;
use crate::gpt::{train_clm, write_training_log, EmbedderCheckpoint, GptError};
use crate::hash::{derive_seed, sha256_file, sha256_hex};
use crate::ir::{extract_functions, normalize, IrError, LlvmModuleText, NormalizedFunction};
use crate::lstm::{train_classifier, write_metrics_csv, EmbeddingSource, LstmError, TrainRun, TrainSample};
use crate::synth::generate;
use crate::word2vec::{load_table, save_table, train_word2vec, W2vError, W2vMode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Extract,
    Normalize,
    Corpus,
    Tokenizer,
    Embedder,
    BaselineW2v,
    ClassifierGrid,
    Evaluate,
    Report,
    All,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Extract => "extract",
            Stage::Normalize => "normalize",
            Stage::Corpus => "corpus",
            Stage::Tokenizer => "tokenizer",
            Stage::Embedder => "embedder",
            Stage::BaselineW2v => "baseline-w2v",
            Stage::ClassifierGrid => "classifier-grid",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Some(match s {
            "synth" => Stage::Synth,
            "extract" => Stage::Extract,
            "normalize" => Stage::Normalize,
            "corpus" => Stage::Corpus,
            "tokenizer" => Stage::Tokenizer,
            "embedder" => Stage::Embedder,
            "baseline-w2v" => Stage::BaselineW2v,
            "classifier-grid" => Stage::ClassifierGrid,
            "evaluate" => Stage::Evaluate,
            "report" => Stage::Report,
            "all" => Stage::All,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),
    #[error("stage {stage}: missing artifact {path}")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("synth: {0}")]
    Synth(String),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    W2v(#[from] W2vError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    /// True when the provenance record matched and the stage was skipped.
    pub cache_hit: bool,
}

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn new(cfg: &PipelineConfig) -> Self {
        Self { out: cfg.out_dir.clone() }
    }
    fn synth_dir(&self) -> PathBuf {
        self.out.join("synth")
    }
    fn extract_file(&self) -> PathBuf {
        self.out.join("extract/extracted.jsonl")
    }
    fn fn_file(&self) -> PathBuf {
        self.out.join("normalize/fn.jsonl")
    }
    fn counts_file(&self) -> PathBuf {
        self.out.join("normalize/counts.json")
    }
    fn embedder_manifest(&self) -> PathBuf {
        self.out.join("corpus/embedder_manifest.json")
    }
    fn vocab_file(&self) -> PathBuf {
        self.out.join("tokenizer/vocab.json")
    }
    fn merges_file(&self) -> PathBuf {
        self.out.join("tokenizer/merges.txt")
    }
    fn lengths_file(&self) -> PathBuf {
        self.out.join("tokenizer/lengths.json")
    }
    fn classifier_manifest(&self) -> PathBuf {
        self.out.join("tokenizer/classifier_manifest.json")
    }
    fn embedder_dir(&self) -> PathBuf {
        self.out.join("embedder")
    }
    fn w2v_file(&self, mode: W2vMode) -> PathBuf {
        self.out.join(format!("word2vec/{}.bin", mode.as_str()))
    }
    fn grid_dir(&self) -> PathBuf {
        self.out.join("grid")
    }
    fn evaluation_file(&self) -> PathBuf {
        self.out.join("evaluate/evaluation.json")
    }
    fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Provenance {
    stage: String,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    completed_unix: u64,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn log_event(out: &Path, stage: &str, event: &str, detail: &str) {
    let line = serde_json::json!({
        "ts": now_unix(),
        "stage": stage,
        "event": event,
        "detail": detail,
    });
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("events.jsonl"))
    {
        let _ = writeln!(f, "{line}");
    }
    println!("[{stage}] {event}: {detail}");
}

fn hash_files(paths: &[PathBuf], base: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut map = BTreeMap::new();
    for p in paths {
        let rel = p.strip_prefix(base).unwrap_or(p).to_string_lossy().to_string();
        map.insert(rel, sha256_file(p)?);
    }
    Ok(map)
}

/// A stage is a cache hit when its provenance record matches the current
/// config hash and every recorded input and output file still hashes the
/// same.
fn cache_hit(prov_path: &Path, config_hash: &str, inputs: &BTreeMap<String, String>, base: &Path) -> bool {
    let Ok(text) = std::fs::read_to_string(prov_path) else {
        return false;
    };
    let Ok(prov) = serde_json::from_str::<Provenance>(&text) else {
        return false;
    };
    if prov.config_hash != config_hash || &prov.inputs != inputs {
        return false;
    }
    prov.outputs.iter().all(|(rel, hash)| {
        sha256_file(&base.join(rel)).map(|h| &h == hash).unwrap_or(false)
    })
}

fn write_provenance(
    prov_path: &Path,
    stage: &str,
    config_hash: &str,
    inputs: BTreeMap<String, String>,
    output_paths: &[PathBuf],
    base: &Path,
) -> Result<(), PipelineError> {
    let prov = Provenance {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        inputs,
        outputs: hash_files(output_paths, base)?,
        completed_unix: now_unix(),
    };
    std::fs::write(prov_path, serde_json::to_string_pretty(&prov)?)?;
    Ok(())
}

fn require(stage: &'static str, path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { stage, path })
    }
}

fn ll_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().map_or(false, |e| e == "ll"))
        .collect();
    files.sort();
    files
}

/// Runs one stage (or `all`) against the config. Completed stages with
/// unchanged inputs are skipped unless `force` is set.
pub fn run(stage: Stage, cfg: &PipelineConfig, force: bool) -> Result<Vec<StageOutcome>, PipelineError> {
    cfg.validate().map_err(PipelineError::ConfigInvalid)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let paths = Paths::new(cfg);
    let config_hash = cfg.config_hash();

    let stages: Vec<Stage> = match stage {
        Stage::All => {
            let mut order = Vec::new();
            if cfg.synth.enabled && cfg.input.ll_dir.is_empty() {
                order.push(Stage::Synth);
            }
            order.extend([Stage::Extract, Stage::Normalize, Stage::Corpus, Stage::Tokenizer, Stage::Embedder]);
            if cfg.word2vec.enabled {
                order.push(Stage::BaselineW2v);
            }
            order.extend([Stage::ClassifierGrid, Stage::Evaluate, Stage::Report]);
            order
        }
        s => vec![s],
    };

    let mut outcomes = Vec::new();
    for s in stages {
        let cache_hit = match s {
            Stage::Synth => stage_synth(cfg, &paths, &config_hash, force)?,
            Stage::Extract => stage_extract(cfg, &paths, &config_hash, force)?,
            Stage::Normalize => stage_normalize(cfg, &paths, &config_hash, force)?,
            Stage::Corpus => stage_corpus(cfg, &paths, &config_hash, force)?,
            Stage::Tokenizer => stage_tokenizer(cfg, &paths, &config_hash, force)?,
            Stage::Embedder => stage_embedder(cfg, &paths, &config_hash, force)?,
            Stage::BaselineW2v => stage_w2v(cfg, &paths, &config_hash, force)?,
            Stage::ClassifierGrid => stage_grid(cfg, &paths, &config_hash, force)?,
            Stage::Evaluate => stage_evaluate(cfg, &paths, &config_hash, force)?,
            Stage::Report => stage_report(cfg, &paths, &config_hash, force)?,
            Stage::All => unreachable!(),
        };
        outcomes.push(StageOutcome { stage: s.as_str(), cache_hit });
    }
    Ok(outcomes)
}

fn stage_synth(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let dir = paths.synth_dir();
    std::fs::create_dir_all(&dir)?;
    let prov = dir.join("provenance.json");
    let inputs = BTreeMap::new();
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "synth", "cache_hit", "outputs unchanged");
        return Ok(true);
    }
    let modules = generate(&cfg.synth.to_spec()).map_err(PipelineError::Synth)?;
    let mut outputs = Vec::new();
    let mut truth = String::from("file,label\n");
    for (i, gm) in modules.iter().enumerate() {
        let file = dir.join(format!("case_{i:04}.ll"));
        std::fs::write(&file, &gm.module.content)?;
        truth.push_str(&format!("case_{i:04}.ll,{}\n", gm.label.as_str()));
        outputs.push(file);
    }
    let truth_file = dir.join("ground_truth.csv");
    std::fs::write(&truth_file, truth)?;
    outputs.push(truth_file);
    write_provenance(&prov, "synth", hash, inputs, &outputs, &paths.out)?;
    log_event(&paths.out, "synth", "done", &format!("{} modules", modules.len()));
    Ok(false)
}

fn input_dir(cfg: &PipelineConfig, paths: &Paths) -> PathBuf {
    if cfg.input.ll_dir.is_empty() {
        paths.synth_dir()
    } else {
        PathBuf::from(&cfg.input.ll_dir)
    }
}

fn stage_extract(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let src = require("extract", input_dir(cfg, paths))?;
    let files = ll_files(&src);
    if files.is_empty() {
        return Err(PipelineError::MissingArtifact { stage: "extract", path: src.join("*.ll") });
    }
    let out_file = paths.extract_file();
    std::fs::create_dir_all(out_file.parent().unwrap())?;
    let prov = out_file.parent().unwrap().join("provenance.json");
    let inputs = hash_files(&files, &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "extract", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let per_file: Vec<Result<Vec<FunctionRecord>, IrError>> = exec::map_ordered(&files, |path| {
        let content = std::fs::read_to_string(path).map_err(|_| IrError::EmptyModuleText {
            source_path: path.display().to_string(),
        })?;
        let module = LlvmModuleText::new(path.display().to_string(), content)?;
        let fns = extract_functions(&module)?;
        Ok(fns
            .into_iter()
            .map(|f| FunctionRecord {
                hash: sha256_hex(f.raw_body.as_bytes()),
                name: f.original_name,
                text: f.raw_body,
                source: f.source_path,
                ordinal: f.source_index,
            })
            .collect())
    });
    let mut records = Vec::new();
    for r in per_file {
        records.extend(r?);
    }
    write_function_records(&out_file, &records)?;
    write_provenance(&prov, "extract", hash, inputs, &[out_file], &paths.out)?;
    log_event(&paths.out, "extract", "done", &format!("{} functions from {} modules", records.len(), files.len()));
    Ok(false)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct NormalizeCounts {
    embedding_pre_dedup: usize,
    embedding_post_dedup: usize,
    classifier_pre_dedup: usize,
    classifier_pre_clean: usize,
    classifier_pre_vulnerable: usize,
    classifier_post_dedup: usize,
    classifier_post_clean: usize,
    classifier_post_vulnerable: usize,
}

/// Normalizes every extracted function (all function names map to the same
/// `func_1` placeholder so identifier-renamed clones collapse), then dedupes
/// the embedding pool and the classifier (excluded-CWE) pool separately,
/// mirroring per-dataset duplicate removal.
fn stage_normalize(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let src = require("normalize", paths.extract_file())?;
    let out_file = paths.fn_file();
    std::fs::create_dir_all(out_file.parent().unwrap())?;
    let prov = out_file.parent().unwrap().join("provenance.json");
    let inputs = hash_files(&[src.clone()], &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "normalize", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let extracted = read_function_records(&src)?;
    let opts = cfg.normalize.options();
    let normalized: Vec<NormalizedFunction> = exec::try_map_ordered(&extracted, |rec| {
        let lifted = crate::ir::LiftedFunction {
            original_name: rec.name.clone(),
            raw_body: rec.text.clone(),
            source_path: rec.source.clone(),
            source_index: rec.ordinal,
        };
        normalize(&lifted, 1, &opts)
    })?;

    let mut counts = NormalizeCounts::default();
    let (mut embedding_pool, mut classifier_pool) = (Vec::new(), Vec::new());
    for f in normalized {
        let tag = cwe_tag(&f.origin.original_name, &f.origin.source_path);
        let is_excluded = tag
            .as_deref()
            .map(|t| t.to_ascii_uppercase().replace('-', "") == cfg.corpus.exclude_cwe.to_ascii_uppercase().replace('-', ""))
            .unwrap_or(false);
        if is_excluded {
            match label_from_name(&f.origin.original_name) {
                Label::Clean => counts.classifier_pre_clean += 1,
                Label::Vulnerable => counts.classifier_pre_vulnerable += 1,
                Label::Unlabeled => {}
            }
            classifier_pool.push(f);
        } else {
            embedding_pool.push(f);
        }
    }
    counts.embedding_pre_dedup = embedding_pool.len();
    counts.classifier_pre_dedup = classifier_pool.len();
    embedding_pool = crate::ir::dedupe(embedding_pool);
    classifier_pool = crate::ir::dedupe(classifier_pool);
    counts.embedding_post_dedup = embedding_pool.len();
    counts.classifier_post_dedup = classifier_pool.len();
    for f in &classifier_pool {
        match label_from_name(&f.origin.original_name) {
            Label::Clean => counts.classifier_post_clean += 1,
            Label::Vulnerable => counts.classifier_post_vulnerable += 1,
            Label::Unlabeled => {}
        }
    }

    let records: Vec<FunctionRecord> = embedding_pool
        .iter()
        .chain(classifier_pool.iter())
        .map(|f| FunctionRecord::from_normalized(f, f.origin.source_index))
        .collect();
    write_function_records(&out_file, &records)?;
    std::fs::write(&paths.counts_file(), serde_json::to_string_pretty(&counts)?)?;
    write_provenance(
        &prov,
        "normalize",
        hash,
        inputs,
        &[out_file, paths.counts_file()],
        &paths.out,
    )?;
    log_event(
        &paths.out,
        "normalize",
        "done",
        &format!(
            "embedding {} -> {}, classifier {} -> {}",
            counts.embedding_pre_dedup,
            counts.embedding_post_dedup,
            counts.classifier_pre_dedup,
            counts.classifier_post_dedup
        ),
    );
    Ok(false)
}

/// Rebuilds the normalized-function pools from `fn.jsonl`.
fn load_pools(cfg: &PipelineConfig, paths: &Paths, stage: &'static str) -> Result<(Vec<NormalizedFunction>, Vec<NormalizedFunction>), PipelineError> {
    let src = require(stage, paths.fn_file())?;
    let records = read_function_records(&src)?;
    let mut embedding = Vec::new();
    let mut classifier = Vec::new();
    let excluded = cfg.corpus.exclude_cwe.to_ascii_uppercase().replace('-', "");
    for rec in records {
        let f = NormalizedFunction {
            canonical_text: rec.text,
            rename_map: vec![],
            content_hash: rec.hash,
            origin: crate::ir::FunctionOrigin {
                original_name: rec.name,
                source_path: rec.source,
                source_index: rec.ordinal,
            },
        };
        let tag = cwe_tag(&f.origin.original_name, &f.origin.source_path);
        let is_excluded = tag
            .as_deref()
            .map(|t| t.to_ascii_uppercase().replace('-', "") == excluded)
            .unwrap_or(false);
        if is_excluded {
            classifier.push(f);
        } else {
            embedding.push(f);
        }
    }
    Ok((embedding, classifier))
}

fn stage_corpus(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let out_file = paths.embedder_manifest();
    std::fs::create_dir_all(out_file.parent().unwrap())?;
    let prov = out_file.parent().unwrap().join("provenance.json");
    let inputs = hash_files(&[require("corpus", paths.fn_file())?], &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "corpus", "cache_hit", "outputs unchanged");
        return Ok(true);
    }
    let (embedding_pool, _) = load_pools(cfg, paths, "corpus")?;
    let fractions = SplitFractions::new(cfg.corpus.embedder_split[0], cfg.corpus.embedder_split[1])
        .map_err(PipelineError::Corpus)?;
    let manifest = build_embedder_corpus(&embedding_pool, &cfg.corpus.exclude_cwe, fractions, cfg.corpus.seed)?;
    manifest.save(&out_file)?;
    write_provenance(&prov, "corpus", hash, inputs, &[out_file], &paths.out)?;
    log_event(
        &paths.out,
        "corpus",
        "done",
        &format!(
            "{} members ({} train / {} validation)",
            manifest.members.len(),
            manifest.hashes_in_split(Split::Train).len(),
            manifest.hashes_in_split(Split::Validation).len()
        ),
    );
    Ok(false)
}

/// Trains the tokenizer on the embedding corpus, measures every function's
/// token length, and builds the classifier manifest (the length filter needs
/// the tokenizer, so this is the second pass of the two-pass dataset build).
fn stage_tokenizer(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let manifest_path = require("tokenizer", paths.embedder_manifest())?;
    let fn_path = require("tokenizer", paths.fn_file())?;
    std::fs::create_dir_all(paths.vocab_file().parent().unwrap())?;
    let prov = paths.vocab_file().parent().unwrap().join("provenance.json");
    let inputs = hash_files(&[manifest_path.clone(), fn_path], &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "tokenizer", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let (embedding_pool, classifier_pool) = load_pools(cfg, paths, "tokenizer")?;
    let manifest = CorpusManifest::load(&manifest_path)?;
    let member_hashes: std::collections::HashSet<&str> =
        manifest.members.iter().map(|m| m.content_hash.as_str()).collect();
    let corpus_texts: Vec<&str> = embedding_pool
        .iter()
        .filter(|f| member_hashes.contains(f.content_hash.as_str()))
        .map(|f| f.canonical_text.as_str())
        .collect();
    let model = train_bpe(
        corpus_texts.iter().map(|t| t.as_bytes()),
        cfg.tokenizer.vocab_size,
        cfg.tokenizer.min_frequency,
        cfg.embedder.max_positions,
    )?;
    model.save(&paths.vocab_file(), &paths.merges_file())?;

    let all: Vec<&NormalizedFunction> = embedding_pool.iter().chain(classifier_pool.iter()).collect();
    let lengths: Vec<(String, usize)> = exec::map_ordered(&all, |f| {
        (f.content_hash.clone(), model.token_length(&f.canonical_text))
    });
    let length_map: BTreeMap<String, usize> = lengths.into_iter().collect();
    std::fs::write(&paths.lengths_file(), serde_json::to_string_pretty(&length_map)?)?;

    let labeled: Vec<LabeledFunction> = classifier_pool
        .iter()
        .map(|f| LabeledFunction {
            label: label_from_name(&f.origin.original_name),
            cwe: cwe_tag(&f.origin.original_name, &f.origin.source_path),
            token_length: length_map.get(&f.content_hash).copied(),
            function: f.clone(),
        })
        .collect();
    let fractions = SplitFractions::new(cfg.corpus.classifier_split[0], cfg.corpus.classifier_split[1])
        .map_err(PipelineError::Corpus)?;
    let classifier_manifest = build_classifier_dataset(
        &labeled,
        cfg.corpus.max_tokens,
        fractions,
        cfg.corpus.seed,
        cfg.corpus.stratify,
    )?;
    classifier_manifest.save(&paths.classifier_manifest())?;

    write_provenance(
        &prov,
        "tokenizer",
        hash,
        inputs,
        &[paths.vocab_file(), paths.merges_file(), paths.lengths_file(), paths.classifier_manifest()],
        &paths.out,
    )?;
    log_event(
        &paths.out,
        "tokenizer",
        "done",
        &format!(
            "vocab {} ({} merges); classifier dataset {} members",
            model.vocab_len(),
            model.num_merges(),
            classifier_manifest.members.len()
        ),
    );
    Ok(false)
}

fn load_tokenizer(cfg: &PipelineConfig, paths: &Paths, stage: &'static str) -> Result<TokenizerModel, PipelineError> {
    let vocab = require(stage, paths.vocab_file())?;
    let merges = require(stage, paths.merges_file())?;
    Ok(TokenizerModel::load(&vocab, &merges, cfg.embedder.max_positions)?)
}

fn texts_by_hash(pool: &[NormalizedFunction]) -> BTreeMap<&str, &str> {
    pool.iter()
        .map(|f| (f.content_hash.as_str(), f.canonical_text.as_str()))
        .collect()
}

fn stage_embedder(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let manifest_path = require("embedder", paths.embedder_manifest())?;
    let dir = paths.embedder_dir();
    std::fs::create_dir_all(&dir)?;
    let prov = dir.join("provenance.json");
    let inputs = hash_files(
        &[manifest_path.clone(), paths.fn_file(), paths.vocab_file(), paths.merges_file()],
        &paths.out,
    )?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "embedder", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let tokenizer = load_tokenizer(cfg, paths, "embedder")?;
    let (embedding_pool, _) = load_pools(cfg, paths, "embedder")?;
    let texts = texts_by_hash(&embedding_pool);
    let manifest = CorpusManifest::load(&manifest_path)?;
    let encode_split = |split: Split| -> Vec<Vec<u32>> {
        let hashes = manifest.hashes_in_split(split);
        exec::map_ordered(&hashes, |h| {
            let text = texts.get(h).copied().unwrap_or_default();
            tokenizer.encode_for_lm(text.as_bytes(), Some(cfg.embedder.max_positions))
        })
    };
    let train_seqs = encode_split(Split::Train);
    let val_seqs = encode_split(Split::Validation);
    let manifest_ref = sha256_file(&manifest_path)?;

    log_event(
        &paths.out,
        "embedder",
        "training",
        &format!("{} train / {} validation sequences", train_seqs.len(), val_seqs.len()),
    );
    let (checkpoint, log) = train_clm(
        cfg.embedder.transformer_config(tokenizer.vocab_len()),
        &train_seqs,
        &val_seqs,
        &manifest_ref,
        &cfg.embedder.train_opts(),
    )?;
    checkpoint.save(&dir)?;
    write_training_log(&dir.join("train_log.csv"), &log)?;
    write_provenance(
        &prov,
        "embedder",
        hash,
        inputs,
        &[dir.join("config.json"), dir.join("meta.json"), dir.join("tensors.bin"), dir.join("train_log.csv")],
        &paths.out,
    )?;
    log_event(
        &paths.out,
        "embedder",
        "done",
        &format!("best val loss {:.6} at step {}", checkpoint.val_loss, checkpoint.trained_steps),
    );
    Ok(false)
}

fn stage_w2v(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let manifest_path = require("baseline-w2v", paths.embedder_manifest())?;
    let dir = paths.w2v_file(W2vMode::Cbow).parent().unwrap().to_path_buf();
    std::fs::create_dir_all(&dir)?;
    let prov = dir.join("provenance.json");
    let inputs = hash_files(
        &[manifest_path.clone(), paths.fn_file(), paths.vocab_file(), paths.merges_file()],
        &paths.out,
    )?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "baseline-w2v", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let tokenizer = load_tokenizer(cfg, paths, "baseline-w2v")?;
    let (embedding_pool, _) = load_pools(cfg, paths, "baseline-w2v")?;
    let texts = texts_by_hash(&embedding_pool);
    let manifest = CorpusManifest::load(&manifest_path)?;
    let hashes = manifest.hashes_in_split(Split::Train);
    let seqs: Vec<Vec<u32>> = exec::map_ordered(&hashes, |h| {
        tokenizer.encode(texts.get(h).copied().unwrap_or_default().as_bytes())
    });
    let mut outputs = Vec::new();
    for mode in [W2vMode::Cbow, W2vMode::Skipgram] {
        let table = train_word2vec(&cfg.word2vec.to_config(mode), &seqs, tokenizer.vocab_len(), cfg.word2vec.seed)?;
        let path = paths.w2v_file(mode);
        save_table(&path, &table)?;
        outputs.push(path);
    }
    write_provenance(&prov, "baseline-w2v", hash, inputs, &outputs, &paths.out)?;
    log_event(&paths.out, "baseline-w2v", "done", &format!("{} sequences", seqs.len()));
    Ok(false)
}

/// One grid run as persisted to `run.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunArtifact {
    pub label: String,
    pub embedder: String,
    pub run: TrainRun,
}

fn stage_grid(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let manifest_path = require("classifier-grid", paths.classifier_manifest())?;
    let mut input_files = vec![manifest_path.clone(), paths.fn_file(), paths.vocab_file(), paths.merges_file()];
    let needs_gpt = cfg.classifier.embedders.contains(&EmbedderChoice::Gpt);
    if needs_gpt {
        input_files.push(require("classifier-grid", paths.embedder_dir().join("tensors.bin"))?);
        input_files.push(require("classifier-grid", paths.embedder_dir().join("config.json"))?);
        input_files.push(require("classifier-grid", paths.embedder_dir().join("meta.json"))?);
    }
    for choice in &cfg.classifier.embedders {
        match choice {
            EmbedderChoice::Cbow => {
                input_files.push(require("classifier-grid", paths.w2v_file(W2vMode::Cbow))?)
            }
            EmbedderChoice::Skipgram => {
                input_files.push(require("classifier-grid", paths.w2v_file(W2vMode::Skipgram))?)
            }
            EmbedderChoice::Gpt => {}
        }
    }
    let dir = paths.grid_dir();
    std::fs::create_dir_all(&dir)?;
    let prov = dir.join("provenance.json");
    let inputs = hash_files(&input_files, &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "classifier-grid", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let tokenizer = load_tokenizer(cfg, paths, "classifier-grid")?;
    let (_, classifier_pool) = load_pools(cfg, paths, "classifier-grid")?;
    let texts = texts_by_hash(&classifier_pool);
    let manifest = CorpusManifest::load(&manifest_path)?;
    let manifest_ref = sha256_file(&manifest_path)?;

    // Sample builder per embedder kind: the transformer consumes BOS/EOS
    // framed ids, static tables consume plain content ids.
    let build_samples = |framed: bool, split: Split| -> Vec<TrainSample> {
        manifest
            .members_in_split(split)
            .iter()
            .map(|m| {
                let text = texts.get(m.content_hash.as_str()).copied().unwrap_or_default();
                let ids = if framed {
                    tokenizer.encode_for_lm(text.as_bytes(), Some(cfg.embedder.max_positions))
                } else {
                    tokenizer.encode(text.as_bytes())
                };
                TrainSample { ids, label: m.label == Label::Vulnerable }
            })
            .collect()
    };

    let mut outputs = Vec::new();
    let mut run_index = 0usize;
    for choice in &cfg.classifier.embedders {
        let framed = *choice == EmbedderChoice::Gpt;
        let train = build_samples(framed, Split::Train);
        let val = build_samples(framed, Split::Validation);
        for &freeze in &cfg.classifier.freeze {
            for optimizer in &cfg.classifier.grid {
                let run_dir = dir.join(format!(
                    "run_{run_index:02}_{}_{}_{}",
                    choice.as_str(),
                    if freeze { "frozen" } else { "unfrozen" },
                    optimizer.slug()
                ));
                std::fs::create_dir_all(&run_dir)?;
                let mut source = match choice {
                    EmbedderChoice::Gpt => EmbeddingSource::Transformer {
                        checkpoint: EmbedderCheckpoint::load(&paths.embedder_dir())?,
                        layer: cfg.embedder.embed_layer,
                    },
                    EmbedderChoice::Cbow => {
                        EmbeddingSource::from_table(load_table(&paths.w2v_file(W2vMode::Cbow))?)
                    }
                    EmbedderChoice::Skipgram => {
                        EmbeddingSource::from_table(load_table(&paths.w2v_file(W2vMode::Skipgram))?)
                    }
                };
                let run_cfg = cfg.classifier.classifier_config(*optimizer, freeze);
                let seed = derive_seed(&[hash.as_bytes(), &run_index.to_le_bytes()]);
                let label = format!(
                    "{} {} ({})",
                    match choice {
                        EmbedderChoice::Gpt => "GPT-2",
                        EmbedderChoice::Cbow => "word2vec CBOW",
                        EmbedderChoice::Skipgram => "word2vec Skip-Gram",
                    },
                    optimizer.describe(),
                    if freeze { "frozen" } else { "unfrozen" }
                );
                log_event(&paths.out, "classifier-grid", "run_start", &label);
                let (run, _) = train_classifier(&run_cfg, &mut source, &train, &val, &manifest_ref, seed)?;
                let artifact = RunArtifact {
                    label: label.clone(),
                    embedder: choice.as_str().to_string(),
                    run,
                };
                let run_file = run_dir.join("run.json");
                std::fs::write(&run_file, serde_json::to_string_pretty(&artifact)?)?;
                write_metrics_csv(&run_dir.join("metrics.csv"), &artifact.run.per_epoch)?;
                outputs.push(run_file);
                outputs.push(run_dir.join("metrics.csv"));
                let detail = match artifact.run.best_metrics() {
                    Some(m) => format!(
                        "best epoch {} accuracy {:.3} f1 {:.3}",
                        m.epoch, m.accuracy, m.f1
                    ),
                    None => "NA (never beat majority)".to_string(),
                };
                log_event(&paths.out, "classifier-grid", "run_done", &format!("{label}: {detail}"));
                run_index += 1;
            }
        }
    }
    write_provenance(&prov, "classifier-grid", hash, inputs, &outputs, &paths.out)?;
    log_event(&paths.out, "classifier-grid", "done", &format!("{run_index} runs"));
    Ok(false)
}

fn stage_evaluate(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let grid = require("evaluate", paths.grid_dir())?;
    let mut run_files: Vec<PathBuf> = WalkDir::new(&grid)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() == "run.json")
        .map(|e| e.into_path())
        .collect();
    run_files.sort();
    if run_files.is_empty() {
        return Err(PipelineError::MissingArtifact { stage: "evaluate", path: grid.join("run_*/run.json") });
    }
    let out_file = paths.evaluation_file();
    std::fs::create_dir_all(out_file.parent().unwrap())?;
    let prov = out_file.parent().unwrap().join("provenance.json");
    let inputs = hash_files(&run_files, &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "evaluate", "cache_hit", "outputs unchanged");
        return Ok(true);
    }
    let _ = cfg;
    let mut rows = Vec::new();
    for file in &run_files {
        let artifact: RunArtifact = serde_json::from_str(&std::fs::read_to_string(file)?)?;
        let row = match artifact.run.best_metrics() {
            Some(best) => ReportRow::from_best(artifact.label.clone(), best),
            None => ReportRow::na(artifact.label.clone()),
        };
        rows.push(row);
    }
    std::fs::write(&out_file, serde_json::to_string_pretty(&rows)?)?;
    write_provenance(&prov, "evaluate", hash, inputs, &[out_file], &paths.out)?;
    log_event(&paths.out, "evaluate", "done", &format!("{} runs evaluated", rows.len()));
    Ok(false)
}

fn stage_report(cfg: &PipelineConfig, paths: &Paths, hash: &str, force: bool) -> Result<bool, PipelineError> {
    let eval_file = require("report", paths.evaluation_file())?;
    let counts_file = require("report", paths.counts_file())?;
    let classifier_manifest = require("report", paths.classifier_manifest())?;
    let dir = paths.report_dir();
    std::fs::create_dir_all(&dir)?;
    let prov = dir.join("provenance.json");
    let mut input_files = vec![eval_file.clone(), counts_file.clone(), classifier_manifest.clone()];
    if !cfg.report.external_rows.is_empty() {
        input_files.push(require("report", PathBuf::from(&cfg.report.external_rows))?);
    }
    let inputs = hash_files(&input_files, &paths.out)?;
    if !force && cache_hit(&prov, hash, &inputs, &paths.out) {
        log_event(&paths.out, "report", "cache_hit", "outputs unchanged");
        return Ok(true);
    }

    let rows: Vec<ReportRow> = serde_json::from_str(&std::fs::read_to_string(&eval_file)?)?;
    let external = if cfg.report.external_rows.is_empty() {
        Vec::new()
    } else {
        read_external_rows(Path::new(&cfg.report.external_rows))?
    };
    let report = comparison_report(rows, external);

    let counts: NormalizeCounts = serde_json::from_str(&std::fs::read_to_string(&counts_file)?)?;
    let manifest = CorpusManifest::load(&classifier_manifest)?;
    let post_filter = manifest.members.len();
    let post_clean = manifest.members.iter().filter(|m| m.label == Label::Clean).count();
    let post_vuln = manifest.members.iter().filter(|m| m.label == Label::Vulnerable).count();

    let mut md = String::from("# Results\n\n## Dataset counts\n\n");
    md.push_str("| Dataset Purpose | Embedding | Classifier |\n|---|---|---|\n");
    md.push_str(&format!(
        "| Extracted Functions: Pre Duplicate Removal | {} | {} (Clean: {} / Vuln: {}) |\n",
        counts.embedding_pre_dedup,
        counts.classifier_pre_dedup,
        counts.classifier_pre_clean,
        counts.classifier_pre_vulnerable
    ));
    md.push_str(&format!(
        "| Post Duplicate Removal | {} | {} (Clean: {} / Vuln: {}) |\n",
        counts.embedding_post_dedup,
        counts.classifier_post_dedup,
        counts.classifier_post_clean,
        counts.classifier_post_vulnerable
    ));
    md.push_str(&format!(
        "| Post Removal of Functions More than {} Tokens | NA | {} (Clean: {} / Vuln: {}) |\n",
        cfg.corpus.max_tokens, post_filter, post_clean, post_vuln
    ));
    md.push_str("\n## Best performing runs\n\n");
    md.push_str(&report.to_markdown());

    std::fs::write(dir.join("report.md"), &md)?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    write_provenance(
        &prov,
        "report",
        hash,
        inputs,
        &[dir.join("report.md"), dir.join("report.csv")],
        &paths.out,
    )?;
    log_event(&paths.out, "report", "done", &format!("{} rows", report.rows.len()));
    Ok(false)
}
