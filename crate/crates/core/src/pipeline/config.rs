//! Declarative pipeline configuration (TOML) and its canonical hash.

use crate::hash::sha256_hex;
use crate::optim::OptimizerSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub input: InputConfig,
    pub synth: SynthConfig,
    pub normalize: NormalizeConfig,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub embedder: EmbedderConfig,
    pub word2vec: W2vConfig,
    pub classifier: ClassifierGridConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Directory of lifted `.ll` files. Empty means the synth stage output
    /// feeds the pipeline.
    pub ll_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub enabled: bool,
    pub n_functions: usize,
    pub vulnerable_fraction: f64,
    pub seed: u64,
    pub difficulty: u32,
    pub raw_style: bool,
    pub buffer_min: usize,
    pub buffer_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_functions: 500,
            vulnerable_fraction: 0.4,
            seed: 77,
            difficulty: 0,
            raw_style: true,
            buffer_min: 8,
            buffer_max: 64,
        }
    }
}

impl SynthConfig {
    pub fn to_spec(&self) -> crate::synth::GeneratorSpec {
        crate::synth::GeneratorSpec {
            n_functions: self.n_functions,
            vulnerable_fraction: self.vulnerable_fraction,
            seed: self.seed,
            buffer_size_range: (self.buffer_min, self.buffer_max),
            difficulty: self.difficulty,
            raw_style: self.raw_style,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    /// Extra global names preserved verbatim, on top of the built-in libc
    /// list.
    pub extra_stdlib: Vec<String>,
}

impl NormalizeConfig {
    pub fn options(&self) -> crate::ir::NormalizeOptions {
        let mut opts = crate::ir::NormalizeOptions::default();
        for name in &self.extra_stdlib {
            opts.stdlib_allowlist.insert(name.clone());
        }
        opts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub exclude_cwe: String,
    pub max_tokens: usize,
    pub embedder_split: [f64; 2],
    pub classifier_split: [f64; 2],
    pub seed: u64,
    pub stratify: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            exclude_cwe: "CWE-121".into(),
            max_tokens: 2048,
            embedder_split: [0.9, 0.1],
            classifier_split: [0.8, 0.2],
            seed: 42,
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 8192, min_frequency: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub min_lr_fraction: f64,
    pub seed: u64,
    /// Hidden tap for embeddings: omitted = final layer-normed states,
    /// otherwise a 0-based block index.
    pub embed_layer: Option<usize>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            d_model: 100,
            n_heads: 10,
            d_ff: 400,
            max_positions: 2048,
            dropout: 0.1,
            epochs: 20,
            eval_every: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            seed: 1234,
            embed_layer: None,
        }
    }
}

impl EmbedderConfig {
    pub fn transformer_config(&self, vocab_size: usize) -> crate::gpt::TransformerConfig {
        crate::gpt::TransformerConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            vocab_size,
            dropout: self.dropout,
        }
    }

    pub fn train_opts(&self) -> crate::gpt::ClmTrainOpts {
        crate::gpt::ClmTrainOpts {
            epochs: self.epochs,
            eval_every: self.eval_every,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            min_lr_fraction: self.min_lr_fraction,
            seed: self.seed,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct W2vConfig {
    pub enabled: bool,
    pub dim: usize,
    pub window: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for W2vConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dim: 100,
            window: 5,
            negative_samples: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 99,
        }
    }
}

impl W2vConfig {
    pub fn to_config(&self, mode: crate::word2vec::W2vMode) -> crate::word2vec::Word2vecConfig {
        crate::word2vec::Word2vecConfig {
            mode,
            dim: self.dim,
            window: self.window,
            negative_samples: self.negative_samples,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            min_learning_rate: 1e-4,
        }
    }
}

/// Which embedding model feeds a grid run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderChoice {
    Gpt,
    Cbow,
    Skipgram,
}

impl EmbedderChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedderChoice::Gpt => "gpt",
            EmbedderChoice::Cbow => "cbow",
            EmbedderChoice::Skipgram => "skipgram",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierGridConfig {
    pub lstm_layers: usize,
    pub hidden_units: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decision_threshold: f64,
    pub seed: u64,
    /// Freeze variants to run for every optimizer in the grid.
    pub freeze: Vec<bool>,
    pub embedders: Vec<EmbedderChoice>,
    pub grid: Vec<OptimizerSpec>,
}

impl Default for ClassifierGridConfig {
    fn default() -> Self {
        Self {
            lstm_layers: 2,
            hidden_units: 128,
            leaky_slope: 0.01,
            dropout: 0.20,
            epochs: 50,
            batch_size: 32,
            decision_threshold: 0.5,
            seed: 7,
            freeze: vec![true, false],
            embedders: vec![EmbedderChoice::Gpt],
            grid: default_grid(),
        }
    }
}

/// The optimizer sweep: Adam at three rates, SGD at lr 0.01 with momentum
/// 0.01, and SGD at lr 0.0001 with three momentum values.
pub fn default_grid() -> Vec<OptimizerSpec> {
    vec![
        OptimizerSpec::adam(0.01),
        OptimizerSpec::adam(0.001),
        OptimizerSpec::adam(0.0001),
        OptimizerSpec::sgd_momentum(0.01, 0.01),
        OptimizerSpec::sgd_momentum(0.0001, 0.01),
        OptimizerSpec::sgd_momentum(0.0001, 0.001),
        OptimizerSpec::sgd_momentum(0.0001, 0.0001),
    ]
}

impl ClassifierGridConfig {
    pub fn classifier_config(
        &self,
        optimizer: OptimizerSpec,
        freeze_embedder: bool,
    ) -> crate::lstm::ClassifierConfig {
        crate::lstm::ClassifierConfig {
            lstm_layers: self.lstm_layers,
            hidden_units: self.hidden_units,
            leaky_slope: self.leaky_slope,
            dropout: self.dropout,
            epochs: self.epochs,
            freeze_embedder,
            optimizer,
            decision_threshold: self.decision_threshold,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Optional CSV of externally reported rows (rendered verbatim with
    /// their source tag, never recomputed).
    pub external_rows: String,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml_str(&text).map_err(|e| format!("config parse error: {e}"))
    }

    /// Digest of the canonicalized config: serialization with sorted keys,
    /// so the hash changes exactly when a semantic field changes.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        sha256_hex(value.to_string().as_bytes())
    }

    /// Field-level validation; collects every problem, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.out_dir.as_os_str().is_empty() {
            problems.push("out_dir: must be set".into());
        }
        if self.input.ll_dir.is_empty() && !self.synth.enabled {
            problems.push("input.ll_dir: empty and synth stage disabled; no input".into());
        }
        if self.synth.enabled {
            if let Err(e) = self.synth.to_spec().validate() {
                problems.push(format!("synth: {e}"));
            }
        }
        for (name, split) in [
            ("corpus.embedder_split", self.corpus.embedder_split),
            ("corpus.classifier_split", self.corpus.classifier_split),
        ] {
            if !(split[0] > 0.0 && split[1] >= 0.0 && (split[0] + split[1] - 1.0).abs() < 1e-9) {
                problems.push(format!("{name}: fractions {split:?} must sum to 1"));
            }
        }
        if self.tokenizer.vocab_size < crate::bpe::BASE_VOCAB_SIZE {
            problems.push(format!(
                "tokenizer.vocab_size: {} below the base alphabet {}",
                self.tokenizer.vocab_size,
                crate::bpe::BASE_VOCAB_SIZE
            ));
        }
        if self.embedder.d_model % self.embedder.n_heads != 0 {
            problems.push(format!(
                "embedder: d_model {} not divisible by n_heads {}",
                self.embedder.d_model, self.embedder.n_heads
            ));
        }
        if let Some(layer) = self.embedder.embed_layer {
            if layer >= self.embedder.n_layers {
                problems.push(format!(
                    "embedder.embed_layer: {layer} out of range for {} layers",
                    self.embedder.n_layers
                ));
            }
        }
        if self.classifier.grid.is_empty() {
            problems.push("classifier.grid: empty".into());
        }
        if self.classifier.freeze.is_empty() {
            problems.push("classifier.freeze: empty".into());
        }
        if self.classifier.embedders.is_empty() {
            problems.push("classifier.embedders: empty".into());
        }
        if !self.word2vec.enabled
            && self
                .classifier
                .embedders
                .iter()
                .any(|e| matches!(e, EmbedderChoice::Cbow | EmbedderChoice::Skipgram))
        {
            problems.push("classifier.embedders: word2vec models requested but word2vec.enabled = false".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}
