//! word2vec baseline embedders: CBOW and Skip-Gram with negative sampling.
//!
//! Single-threaded by construction so a fixed seed reproduces the table
//! bit for bit. The table rows are static per-token embeddings consumed by
//! the classifier exactly like transformer hidden states.

use crate::container::{self, ContainerError};
use crate::tensor::{sigmoid, Mat, ParamBlock};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum W2vMode {
    Cbow,
    Skipgram,
}

impl W2vMode {
    pub fn as_str(self) -> &'static str {
        match self {
            W2vMode::Cbow => "cbow",
            W2vMode::Skipgram => "skipgram",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Word2vecConfig {
    pub mode: W2vMode,
    pub dim: usize,
    pub window: usize,
    pub negative_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
}

impl Word2vecConfig {
    pub fn defaults(mode: W2vMode) -> Self {
        Self {
            mode,
            dim: 100,
            window: 5,
            negative_samples: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<(), W2vError> {
        if self.dim == 0 || self.window == 0 {
            return Err(W2vError::ConfigInvalid("dim and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum W2vError {
    #[error("invalid word2vec config: {0}")]
    ConfigInvalid(String),
    #[error("empty corpus: no token pairs to train on")]
    EmptyCorpus,
    #[error("container: {0}")]
    Container(#[from] ContainerError),
}

/// Cumulative distribution over the unigram^0.75 noise distribution;
/// sampled by binary search for deterministic draws.
struct NoiseSampler {
    cumulative: Vec<f64>,
}

impl NoiseSampler {
    fn new(counts: &[u64]) -> Self {
        let mut cumulative = Vec::with_capacity(counts.len());
        let mut acc = 0.0;
        for &c in counts {
            acc += (c as f64).powf(0.75);
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let total = *self.cumulative.last().unwrap();
        let x = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= x) as u32
    }
}

/// Trains an embedding table of shape `(vocab_size, dim)` on token id
/// sequences. Deterministic for a fixed seed.
pub fn train_word2vec(
    cfg: &Word2vecConfig,
    sequences: &[Vec<u32>],
    vocab_size: usize,
    seed: u64,
) -> Result<Mat, W2vError> {
    cfg.validate()?;
    let total_tokens: usize = sequences.iter().map(|s| s.len()).sum();
    if total_tokens == 0 {
        return Err(W2vError::EmptyCorpus);
    }

    let mut counts = vec![0u64; vocab_size];
    for seq in sequences {
        for &t in seq {
            counts[t as usize] += 1;
        }
    }
    let noise = NoiseSampler::new(&counts);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cfg.dim;
    let mut input = Mat::zeros(vocab_size, dim);
    let bound = 0.5 / dim as f64;
    for v in input.data.iter_mut() {
        *v = rng.random::<f64>() * 2.0 * bound - bound;
    }
    let mut output = Mat::zeros(vocab_size, dim);

    let total_centers = (total_tokens * cfg.epochs).max(1);
    let mut processed = 0usize;
    let mut h = vec![0.0; dim];
    let mut grad_h = vec![0.0; dim];

    for _ in 0..cfg.epochs {
        for seq in sequences {
            for center in 0..seq.len() {
                let lr = {
                    let frac = processed as f64 / total_centers as f64;
                    (cfg.learning_rate * (1.0 - frac)).max(cfg.min_learning_rate)
                };
                processed += 1;
                let span = rng.random_range(1..=cfg.window);
                let lo = center.saturating_sub(span);
                let hi = (center + span).min(seq.len() - 1);
                let context: Vec<usize> =
                    (lo..=hi).filter(|&i| i != center).collect();
                if context.is_empty() {
                    continue;
                }
                let target = seq[center];
                match cfg.mode {
                    W2vMode::Cbow => {
                        h.iter_mut().for_each(|v| *v = 0.0);
                        for &ci in &context {
                            let row = input.row(seq[ci] as usize);
                            for i in 0..dim {
                                h[i] += row[i];
                            }
                        }
                        let inv = 1.0 / context.len() as f64;
                        h.iter_mut().for_each(|v| *v *= inv);
                        grad_h.iter_mut().for_each(|v| *v = 0.0);
                        train_pair(&h, &mut grad_h, &mut output, target, cfg, &noise, &mut rng, lr);
                        for &ci in &context {
                            let row = input.row_mut(seq[ci] as usize);
                            for i in 0..dim {
                                row[i] += grad_h[i];
                            }
                        }
                    }
                    W2vMode::Skipgram => {
                        for &ci in &context {
                            let ctx_word = seq[ci];
                            h.copy_from_slice(input.row(target as usize));
                            grad_h.iter_mut().for_each(|v| *v = 0.0);
                            train_pair(
                                &h, &mut grad_h, &mut output, ctx_word, cfg, &noise, &mut rng, lr,
                            );
                            let row = input.row_mut(target as usize);
                            for i in 0..dim {
                                row[i] += grad_h[i];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(input)
}

/// One positive and `negative_samples` noise updates against the hidden
/// vector `h`; the input-side gradient accumulates into `grad_h`.
#[allow(clippy::too_many_arguments)]
fn train_pair(
    h: &[f64],
    grad_h: &mut [f64],
    output: &mut Mat,
    target: u32,
    cfg: &Word2vecConfig,
    noise: &NoiseSampler,
    rng: &mut ChaCha8Rng,
    lr: f64,
) {
    let dim = h.len();
    for k in 0..=cfg.negative_samples {
        let (word, label) = if k == 0 {
            (target, 1.0)
        } else {
            let mut neg = noise.sample(rng);
            let mut tries = 0;
            while neg == target && tries < 8 {
                neg = noise.sample(rng);
                tries += 1;
            }
            if neg == target {
                continue;
            }
            (neg, 0.0)
        };
        let row = output.row_mut(word as usize);
        let mut dot = 0.0;
        for i in 0..dim {
            dot += h[i] * row[i];
        }
        let g = (label - sigmoid(dot)) * lr;
        for i in 0..dim {
            grad_h[i] += g * row[i];
            row[i] += g * h[i];
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

pub fn save_table(path: &Path, table: &Mat) -> Result<(), W2vError> {
    let block = ParamBlock {
        name: "embeddings".into(),
        shape: vec![table.rows, table.cols],
        data: table.data.clone(),
    };
    container::save_tensors(path, &[block])?;
    Ok(())
}

pub fn load_table(path: &Path) -> Result<Mat, W2vError> {
    let blocks = container::load_tensors(path)?;
    let block = blocks
        .into_iter()
        .find(|b| b.name == "embeddings")
        .ok_or(ContainerError::Corrupt("missing embeddings entry".into()))?;
    let (rows, cols) = (block.shape[0], block.shape[1]);
    Ok(Mat { rows, cols, data: block.data })
}
