//! LSTM sequence classifiers over per-token embeddings.
//!
//! Two stacked LSTM layers, LeakyReLU on each layer's output sequence,
//! inverted dropout after each activation, and a single sigmoid unit reading
//! the last timestep. The embedding model sits below and is either frozen
//! (embeddings precomputed once) or unfrozen (gradients flow through the
//! transformer or the static table, updated by the same optimizer instance).
//!
//! Training walks samples one at a time inside a batch so gradient sums keep
//! a fixed order; batched inference gathers the active rows per timestep
//! into one matrix, which reproduces the per-sample arithmetic bit for bit
//! while letting validation run wide.

use crate::container;
use crate::eval::{metrics, na_verdict, ConfusionMatrix, MetricsRecord, Verdict};
use crate::exec;
use crate::gpt::{EmbedderCheckpoint, GptActs, GptError};
use crate::hash::derive_seed;
use crate::optim::{Optimizer, OptimizerSpec};
use crate::tensor::{
    dropout_mask, leaky_relu_backward, leaky_relu_forward, linear_backward_input,
    linear_backward_params, linear_forward, linear_forward_accum, sigmoid, uniform_fill, Mat,
    ParamBlock,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub lstm_layers: usize,
    pub hidden_units: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub freeze_embedder: bool,
    pub optimizer: OptimizerSpec,
    pub decision_threshold: f64,
    pub batch_size: usize,
}

impl ClassifierConfig {
    /// The full-scale setup: 2 x 128 units, 20% dropout, 50 epochs.
    pub fn full_scale(optimizer: OptimizerSpec, freeze_embedder: bool) -> Self {
        Self {
            lstm_layers: 2,
            hidden_units: 128,
            leaky_slope: 0.01,
            dropout: 0.20,
            epochs: 50,
            freeze_embedder,
            optimizer,
            decision_threshold: 0.5,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<(), LstmError> {
        if self.lstm_layers == 0 || self.hidden_units == 0 || self.epochs == 0 {
            return Err(LstmError::ConfigInvalid("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LstmError::ConfigInvalid(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LstmError {
    #[error("invalid classifier config: {0}")]
    ConfigInvalid(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("training split contains a single class only")]
    SingleClassDataset,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("token id {id} out of range for embedding table of {rows} rows")]
    TokenOutOfRange { id: u32, rows: usize },
    #[error(transparent)]
    Embedder(#[from] GptError),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The embedding model under the classifier.
pub enum EmbeddingSource {
    /// Causal-transformer checkpoint; `layer` picks the hidden tap
    /// (None = final layer-normed states).
    Transformer { checkpoint: EmbedderCheckpoint, layer: Option<usize> },
    /// A static `vocab x dim` lookup table (word2vec or random baseline).
    StaticTable { table: ParamBlock },
}

impl EmbeddingSource {
    pub fn from_table(table: Mat) -> Self {
        let block = ParamBlock {
            name: "embeddings".into(),
            shape: vec![table.rows, table.cols],
            data: table.data,
        };
        EmbeddingSource::StaticTable { table: block }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Transformer { checkpoint, .. } => checkpoint.model.cfg.d_model,
            EmbeddingSource::StaticTable { table } => table.shape[1],
        }
    }

    /// Bitwise-stable digest of the embedding weights.
    pub fn digest(&self) -> String {
        match self {
            EmbeddingSource::Transformer { checkpoint, .. } => checkpoint.digest(),
            EmbeddingSource::StaticTable { table } => container::digest(std::slice::from_ref(table)),
        }
    }

    pub fn embed_eval(&self, ids: &[u32]) -> Result<Mat, LstmError> {
        if ids.is_empty() {
            return Err(LstmError::EmptySequence);
        }
        match self {
            EmbeddingSource::Transformer { checkpoint, layer } => {
                Ok(checkpoint.model.embed(ids, *layer)?)
            }
            EmbeddingSource::StaticTable { table } => self.lookup(table, ids),
        }
    }

    fn lookup(&self, table: &ParamBlock, ids: &[u32]) -> Result<Mat, LstmError> {
        let (rows, dim) = (table.shape[0], table.shape[1]);
        let mut out = Mat::zeros(ids.len(), dim);
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= rows {
                return Err(LstmError::TokenOutOfRange { id, rows });
            }
            out.row_mut(t).copy_from_slice(&table.data[id as usize * dim..(id as usize + 1) * dim]);
        }
        Ok(out)
    }

    /// Training-mode embedding; for the transformer this keeps the
    /// activations needed to backpropagate into it.
    fn embed_train(
        &self,
        ids: &[u32],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, Option<GptActs>), LstmError> {
        match self {
            EmbeddingSource::Transformer { checkpoint, layer } => {
                let acts = checkpoint.model.forward(ids, dropout_rng)?;
                let emb = acts.hidden(*layer).clone();
                Ok((emb, Some(acts)))
            }
            EmbeddingSource::StaticTable { table } => Ok((self.lookup(table, ids)?, None)),
        }
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        match self {
            EmbeddingSource::Transformer { checkpoint, .. } => checkpoint.model.zero_grads(),
            EmbeddingSource::StaticTable { table } => vec![vec![0.0; table.len()]],
        }
    }

    fn backward(
        &self,
        ids: &[u32],
        acts: Option<&GptActs>,
        d_input: &Mat,
        grads: &mut [Vec<f64>],
    ) -> Result<(), LstmError> {
        match self {
            EmbeddingSource::Transformer { checkpoint, layer } => {
                let acts = acts.expect("transformer backward needs cached activations");
                checkpoint.model.backward_from_hidden(acts, *layer, d_input, grads)?;
                Ok(())
            }
            EmbeddingSource::StaticTable { table } => {
                let dim = table.shape[1];
                for (t, &id) in ids.iter().enumerate() {
                    let src = d_input.row(t);
                    let dst = &mut grads[0][id as usize * dim..(id as usize + 1) * dim];
                    for i in 0..dim {
                        dst[i] += src[i];
                    }
                }
                Ok(())
            }
        }
    }

    fn params_mut(&mut self) -> &mut [ParamBlock] {
        match self {
            EmbeddingSource::Transformer { checkpoint, .. } => &mut checkpoint.model.params,
            EmbeddingSource::StaticTable { table } => std::slice::from_mut(table),
        }
    }
}

// Gate row ranges within the stacked 4H pre-activation: input, forget,
// candidate, output.
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_G: usize = 2;
const GATE_O: usize = 3;

pub struct LstmClassifier {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub params: Vec<ParamBlock>,
}

struct LayerCache {
    x: Mat,          // T x D_in
    gates: Mat,      // T x 4H, post-activation (i, f, g, o)
    c: Mat,          // T x H
    tanh_c: Mat,     // T x H
    h: Mat,          // T x H raw outputs
    mask: Option<Vec<f64>>,
    out: Mat,        // T x H after LeakyReLU (+ dropout in training)
}

pub struct SampleCache {
    layers: Vec<LayerCache>,
    logit: f64,
}

impl SampleCache {
    pub fn logit(&self) -> f64 {
        self.logit
    }

    pub fn probability(&self) -> f64 {
        sigmoid(self.logit)
    }
}

impl LstmClassifier {
    fn wx_idx(layer: usize) -> usize {
        layer * 3
    }
    fn wh_idx(layer: usize) -> usize {
        layer * 3 + 1
    }
    fn b_idx(layer: usize) -> usize {
        layer * 3 + 2
    }
    fn head_w_idx(&self) -> usize {
        self.layers * 3
    }
    fn head_b_idx(&self) -> usize {
        self.layers * 3 + 1
    }

    pub fn new(
        input_dim: usize,
        layers: usize,
        hidden: usize,
        leaky_slope: f64,
        dropout: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for l in 0..layers {
            let d_in = if l == 0 { input_dim } else { hidden };
            let mut wx = ParamBlock::zeros(format!("lstm{l}.wx"), vec![4 * hidden, d_in]);
            let limit = (6.0 / (d_in + hidden) as f64).sqrt();
            uniform_fill(&mut wx.data, -limit, limit, &mut rng);
            let mut wh = ParamBlock::zeros(format!("lstm{l}.wh"), vec![4 * hidden, hidden]);
            let limit = (6.0 / (2 * hidden) as f64).sqrt();
            uniform_fill(&mut wh.data, -limit, limit, &mut rng);
            let mut b = ParamBlock::zeros(format!("lstm{l}.b"), vec![4 * hidden]);
            // Forget-gate bias starts at 1 so early training passes state.
            for v in &mut b.data[GATE_F * hidden..(GATE_F + 1) * hidden] {
                *v = 1.0;
            }
            params.push(wx);
            params.push(wh);
            params.push(b);
        }
        let mut head_w = ParamBlock::zeros("head.w", vec![hidden]);
        let limit = (6.0 / (hidden + 1) as f64).sqrt();
        uniform_fill(&mut head_w.data, -limit, limit, &mut rng);
        params.push(head_w);
        params.push(ParamBlock::zeros("head.b", vec![1]));
        Self { input_dim, hidden, layers, leaky_slope, dropout, params }
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn digest(&self) -> String {
        container::digest(&self.params)
    }

    /// One LSTM step for one state row. `z` already holds the stacked gate
    /// pre-activations.
    #[allow(clippy::too_many_arguments)]
    fn step_state(
        hidden: usize,
        z: &[f64],
        c_prev: &[f64],
        gates_out: &mut [f64],
        c_out: &mut [f64],
        tanh_out: &mut [f64],
        h_out: &mut [f64],
    ) {
        for u in 0..hidden {
            let i = sigmoid(z[GATE_I * hidden + u]);
            let f = sigmoid(z[GATE_F * hidden + u]);
            let g = z[GATE_G * hidden + u].tanh();
            let o = sigmoid(z[GATE_O * hidden + u]);
            let c = f * c_prev[u] + i * g;
            let tc = c.tanh();
            gates_out[GATE_I * hidden + u] = i;
            gates_out[GATE_F * hidden + u] = f;
            gates_out[GATE_G * hidden + u] = g;
            gates_out[GATE_O * hidden + u] = o;
            c_out[u] = c;
            tanh_out[u] = tc;
            h_out[u] = o * tc;
        }
    }

    /// Forward over one sample. A dropout RNG enables training mode.
    pub fn forward_sample(
        &self,
        input: &Mat,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SampleCache, LstmError> {
        if input.rows == 0 {
            return Err(LstmError::EmptySequence);
        }
        let t_len = input.rows;
        let h_dim = self.hidden;
        let mut x = input.clone();
        let mut layers = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let d_in = x.cols;
            let wx = &self.params[Self::wx_idx(l)].data;
            let wh = &self.params[Self::wh_idx(l)].data;
            let b = &self.params[Self::b_idx(l)].data;
            let mut gates = Mat::zeros(t_len, 4 * h_dim);
            let mut c = Mat::zeros(t_len, h_dim);
            let mut tanh_c = Mat::zeros(t_len, h_dim);
            let mut h = Mat::zeros(t_len, h_dim);
            let mut z = vec![0.0; 4 * h_dim];
            let zero_state = vec![0.0; h_dim];
            for t in 0..t_len {
                linear_forward(x.row(t), 1, d_in, wx, 4 * h_dim, Some(b), &mut z);
                let h_prev = if t == 0 { &zero_state } else { h.row(t - 1) };
                linear_forward_accum(h_prev, 1, h_dim, wh, 4 * h_dim, &mut z);
                let c_prev = if t == 0 { zero_state.clone() } else { c.row(t - 1).to_vec() };
                let (head, tail) = c.data.split_at_mut(t * h_dim);
                let _ = head;
                Self::step_state(
                    h_dim,
                    &z,
                    &c_prev,
                    gates.row_mut(t),
                    &mut tail[..h_dim],
                    tanh_c.row_mut(t),
                    h.row_mut(t),
                );
            }
            let mut out = Mat::zeros(t_len, h_dim);
            leaky_relu_forward(&h.data, self.leaky_slope, &mut out.data);
            let mask = match (&mut dropout_rng, self.dropout > 0.0) {
                (Some(rng), true) => {
                    let mask = dropout_mask(t_len * h_dim, self.dropout, rng);
                    for (v, &m) in out.data.iter_mut().zip(mask.iter()) {
                        *v *= m;
                    }
                    Some(mask)
                }
                _ => None,
            };
            let cache = LayerCache { x, gates, c, tanh_c, h, mask, out: out.clone() };
            layers.push(cache);
            x = out;
        }
        let last = layers.last().unwrap().out.row(t_len - 1);
        let w = &self.params[self.head_w_idx()].data;
        let b = self.params[self.head_b_idx()].data[0];
        let mut logit = b;
        for u in 0..h_dim {
            logit += w[u] * last[u];
        }
        Ok(SampleCache { layers, logit })
    }

    /// Backpropagation through time for one sample; returns the gradient on
    /// the embedding input.
    pub fn backward_sample(
        &self,
        cache: &SampleCache,
        d_logit: f64,
        grads: &mut [Vec<f64>],
    ) -> Mat {
        let h_dim = self.hidden;
        let t_len = cache.layers[0].x.rows;
        let top = self.layers - 1;

        // Head: logit = w . out_top[T-1] + b.
        let mut d_out = Mat::zeros(t_len, h_dim);
        {
            let w = &self.params[self.head_w_idx()].data;
            let last = cache.layers[top].out.row(t_len - 1);
            let d_last = d_out.row_mut(t_len - 1);
            let head_w_idx = self.head_w_idx();
            let head_b_idx = self.head_b_idx();
            for u in 0..h_dim {
                d_last[u] = d_logit * w[u];
                grads[head_w_idx][u] += d_logit * last[u];
            }
            grads[head_b_idx][0] += d_logit;
        }

        for l in (0..self.layers).rev() {
            let layer = &cache.layers[l];
            let d_in = layer.x.cols;
            // out = leaky(h) (* mask)
            let mut d_act = d_out;
            if let Some(mask) = &layer.mask {
                for (v, &m) in d_act.data.iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
            }
            let mut d_h = Mat::zeros(t_len, h_dim);
            leaky_relu_backward(&layer.h.data, self.leaky_slope, &d_act.data, &mut d_h.data);

            let wx = &self.params[Self::wx_idx(l)].data;
            let wh = &self.params[Self::wh_idx(l)].data;
            let mut d_x = Mat::zeros(t_len, d_in);
            let mut dh_next = vec![0.0; h_dim];
            let mut dc_next = vec![0.0; h_dim];
            let mut dz = vec![0.0; 4 * h_dim];
            let zero_state = vec![0.0; h_dim];
            for t in (0..t_len).rev() {
                let gates = layer.gates.row(t);
                let c_prev = if t == 0 { &zero_state } else { layer.c.row(t - 1) };
                let h_prev = if t == 0 { &zero_state } else { layer.h.row(t - 1) };
                for u in 0..h_dim {
                    let dh = d_h.row(t)[u] + dh_next[u];
                    let i = gates[GATE_I * h_dim + u];
                    let f = gates[GATE_F * h_dim + u];
                    let g = gates[GATE_G * h_dim + u];
                    let o = gates[GATE_O * h_dim + u];
                    let tc = layer.tanh_c.row(t)[u];
                    let d_o = dh * tc;
                    let dc = dc_next[u] + dh * o * (1.0 - tc * tc);
                    let d_i = dc * g;
                    let d_g = dc * i;
                    let d_f = dc * c_prev[u];
                    dc_next[u] = dc * f;
                    dz[GATE_I * h_dim + u] = d_i * i * (1.0 - i);
                    dz[GATE_F * h_dim + u] = d_f * f * (1.0 - f);
                    dz[GATE_G * h_dim + u] = d_g * (1.0 - g * g);
                    dz[GATE_O * h_dim + u] = d_o * o * (1.0 - o);
                }
                {
                    let (dwx, db) = two_grads(grads, Self::wx_idx(l), Self::b_idx(l));
                    linear_backward_params(layer.x.row(t), 1, d_in, &dz, 4 * h_dim, dwx, Some(db));
                }
                linear_backward_params(
                    h_prev,
                    1,
                    h_dim,
                    &dz,
                    4 * h_dim,
                    &mut grads[Self::wh_idx(l)],
                    None,
                );
                linear_backward_input(&dz, 1, 4 * h_dim, wx, d_in, d_x.row_mut(t));
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                linear_backward_input(&dz, 1, 4 * h_dim, wh, h_dim, &mut dh_next);
            }
            d_out = d_x;
        }
        d_out
    }

    /// Deterministic eval-mode probability for one sample.
    pub fn predict(&self, input: &Mat) -> Result<f64, LstmError> {
        Ok(self.forward_sample(input, None)?.probability())
    }

    /// Batched eval-mode prediction over ragged sequences. Each timestep
    /// gathers the rows of still-active samples into one matrix; finished
    /// samples keep their final state, so padding a batch never changes any
    /// sample's output.
    pub fn predict_batch(&self, inputs: &[&Mat]) -> Result<Vec<f64>, LstmError> {
        if inputs.iter().any(|m| m.rows == 0) {
            return Err(LstmError::EmptySequence);
        }
        let n = inputs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let h_dim = self.hidden;
        let lens: Vec<usize> = inputs.iter().map(|m| m.rows).collect();
        let t_max = *lens.iter().max().unwrap();

        let mut current: Vec<Mat> = inputs.iter().map(|m| (*m).clone()).collect();
        for l in 0..self.layers {
            let d_in = current[0].cols;
            let wx = &self.params[Self::wx_idx(l)].data;
            let wh = &self.params[Self::wh_idx(l)].data;
            let b = &self.params[Self::b_idx(l)].data;
            let mut h_state = Mat::zeros(n, h_dim);
            let mut c_state = Mat::zeros(n, h_dim);
            let mut outputs: Vec<Mat> = lens.iter().map(|&t| Mat::zeros(t, h_dim)).collect();
            for t in 0..t_max {
                let active: Vec<usize> = (0..n).filter(|&s| t < lens[s]).collect();
                let a = active.len();
                let mut x_gather = Mat::zeros(a, d_in);
                let mut h_gather = Mat::zeros(a, h_dim);
                for (k, &s) in active.iter().enumerate() {
                    x_gather.row_mut(k).copy_from_slice(current[s].row(t));
                    h_gather.row_mut(k).copy_from_slice(h_state.row(s));
                }
                let mut z = Mat::zeros(a, 4 * h_dim);
                linear_forward(&x_gather.data, a, d_in, wx, 4 * h_dim, Some(b), &mut z.data);
                linear_forward_accum(&h_gather.data, a, h_dim, wh, 4 * h_dim, &mut z.data);
                for (k, &s) in active.iter().enumerate() {
                    let c_prev = c_state.row(s).to_vec();
                    let mut gates = vec![0.0; 4 * h_dim];
                    let mut c_new = vec![0.0; h_dim];
                    let mut tc = vec![0.0; h_dim];
                    let mut h_new = vec![0.0; h_dim];
                    Self::step_state(h_dim, z.row(k), &c_prev, &mut gates, &mut c_new, &mut tc, &mut h_new);
                    c_state.row_mut(s).copy_from_slice(&c_new);
                    h_state.row_mut(s).copy_from_slice(&h_new);
                    outputs[s].row_mut(t).copy_from_slice(&h_new);
                }
            }
            for out in &mut outputs {
                let mut act = vec![0.0; out.data.len()];
                leaky_relu_forward(&out.data, self.leaky_slope, &mut act);
                out.data = act;
            }
            current = outputs;
        }
        let w = &self.params[self.head_w_idx()].data;
        let b = self.params[self.head_b_idx()].data[0];
        Ok(current
            .iter()
            .zip(&lens)
            .map(|(out, &len)| {
                let last = out.row(len - 1);
                let mut logit = b;
                for u in 0..h_dim {
                    logit += w[u] * last[u];
                }
                sigmoid(logit)
            })
            .collect())
    }
}

fn two_grads(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    assert!(a < b);
    let (left, right) = grads.split_at_mut(b);
    (&mut left[a], &mut right[0])
}

/// Numerically stable binary cross-entropy from a logit.
pub fn bce_from_logit(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln()
}

/// One labeled training sample as token ids under the shared tokenizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSample {
    pub ids: Vec<u32>,
    /// `true` = vulnerable.
    pub label: bool,
}

/// The persisted outcome of one grid run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: ClassifierConfig,
    pub embedder_ref: String,
    pub manifest_ref: String,
    pub per_epoch: Vec<MetricsRecord>,
    /// 1-based best epoch by validation accuracy (ties to lower loss);
    /// `None` when the run never beat the majority-class baseline.
    pub best_epoch: Option<usize>,
}

impl TrainRun {
    pub fn best_metrics(&self) -> Option<&MetricsRecord> {
        self.best_epoch
            .and_then(|e| self.per_epoch.iter().find(|m| m.epoch == e))
    }

    pub fn is_na(&self) -> bool {
        self.best_epoch.is_none()
    }
}

/// Trains one LSTM classifier configuration.
///
/// With `freeze_embedder` the embedding weights are bitwise untouched and
/// embeddings are precomputed once; otherwise gradients flow into the
/// embedder and a single optimizer instance updates the union of both
/// parameter sets. Validation metrics are recorded every epoch.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    embedder: &mut EmbeddingSource,
    train: &[TrainSample],
    val: &[TrainSample],
    manifest_ref: &str,
    seed: u64,
) -> Result<(TrainRun, LstmClassifier), LstmError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(LstmError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(LstmError::EmptySplit("validation"));
    }
    let positives = train.iter().filter(|s| s.label).count();
    if positives == 0 || positives == train.len() {
        return Err(LstmError::SingleClassDataset);
    }

    let embedder_ref = embedder.digest();
    let dim = embedder.dim();
    let mut model = LstmClassifier::new(
        dim,
        cfg.lstm_layers,
        cfg.hidden_units,
        cfg.leaky_slope,
        cfg.dropout,
        derive_seed(&[&seed.to_le_bytes(), b"lstm-init"]),
    );

    // Frozen embedder: fixed weights mean fixed embeddings, computed once.
    let (train_cache, val_cache) = if cfg.freeze_embedder {
        let train_embs = exec::try_map_ordered(train, |s| embedder.embed_eval(&s.ids))?;
        let val_embs = exec::try_map_ordered(val, |s| embedder.embed_eval(&s.ids))?;
        (Some(train_embs), Some(val_embs))
    } else {
        (None, None)
    };

    let n_model_blocks = model.params.len();
    let mut sizes: Vec<usize> = model.params.iter().map(|p| p.len()).collect();
    if !cfg.freeze_embedder {
        sizes.extend(embedder.params_mut().iter().map(|p| p.len()));
    }
    let mut optimizer = Optimizer::with_sizes(cfg.optimizer, &sizes);

    let mut dropout_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[&seed.to_le_bytes(), b"lstm-dropout"]));
    let mut emb_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&seed.to_le_bytes(), b"emb-dropout"]));

    let majority = {
        let vuln = val.iter().filter(|s| s.label).count();
        (vuln.max(val.len() - vuln)) as f64 / val.len() as f64
    };

    let mut per_epoch: Vec<MetricsRecord> = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        // Length-bucketed batches in a seeded random order.
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.sort_by_key(|&i| (train[i].ids.len(), i));
        let mut batches: Vec<Vec<usize>> =
            order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &seed.to_le_bytes(),
            b"epoch",
            &epoch.to_le_bytes(),
        ]));
        batches.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut cls_grads = model.zero_grads();
            let mut emb_grads = if cfg.freeze_embedder { Vec::new() } else { embedder.zero_grads() };
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &train[idx];
                let (owned, acts);
                let input: &Mat = match &train_cache {
                    Some(cache) => {
                        acts = None;
                        &cache[idx]
                    }
                    None => {
                        let (emb, a) = embedder.embed_train(&sample.ids, Some(&mut emb_rng))?;
                        owned = emb;
                        acts = a;
                        &owned
                    }
                };
                let cache = model.forward_sample(input, Some(&mut dropout_rng))?;
                batch_loss += bce_from_logit(cache.logit, sample.label);
                let y = if sample.label { 1.0 } else { 0.0 };
                let d_logit = sigmoid(cache.logit) - y;
                let d_input = model.backward_sample(&cache, d_logit, &mut cls_grads);
                if !cfg.freeze_embedder {
                    embedder.backward(&sample.ids, acts.as_ref(), &d_input, &mut emb_grads)?;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in cls_grads.iter_mut().chain(emb_grads.iter_mut()) {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            optimizer.begin_step();
            for (i, p) in model.params.iter_mut().enumerate() {
                optimizer
                    .update_block(i, &mut p.data, &cls_grads[i])
                    .expect("classifier block shapes are fixed");
            }
            if !cfg.freeze_embedder {
                for (i, p) in embedder.params_mut().iter_mut().enumerate() {
                    optimizer
                        .update_block(n_model_blocks + i, &mut p.data, &emb_grads[i])
                        .expect("embedder block shapes are fixed");
                }
            }
            epoch_loss += batch_loss;
        }
        if !epoch_loss.is_finite() {
            return Err(LstmError::DivergedLoss { epoch });
        }

        // Full validation metrics at the decision threshold.
        let val_inputs: Vec<Mat> = match &val_cache {
            Some(cache) => cache.clone(),
            None => exec::try_map_ordered(val, |s| embedder.embed_eval(&s.ids))?,
        };
        let refs: Vec<&Mat> = val_inputs.iter().collect();
        let probs = model.predict_batch(&refs)?;
        let mut val_loss = 0.0;
        for (p, s) in probs.iter().zip(val) {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            val_loss -= if s.label { p.ln() } else { (1.0 - p).ln() };
        }
        val_loss /= val.len() as f64;
        if !val_loss.is_finite() {
            return Err(LstmError::DivergedLoss { epoch });
        }
        let cm = ConfusionMatrix::from_predictions(
            probs
                .iter()
                .zip(val)
                .map(|(&p, s)| (p >= cfg.decision_threshold, s.label)),
        );
        per_epoch.push(metrics(&cm, epoch, val_loss)?);
    }

    let best = per_epoch
        .iter()
        .max_by(|a, b| {
            a.accuracy
                .partial_cmp(&b.accuracy)
                .unwrap()
                .then(b.loss.partial_cmp(&a.loss).unwrap())
        })
        .expect("at least one epoch");
    let best_epoch = match na_verdict(best.accuracy, majority) {
        Verdict::Improved => Some(best.epoch),
        Verdict::Na => None,
    };

    let run = TrainRun {
        config: *cfg,
        embedder_ref,
        manifest_ref: manifest_ref.to_string(),
        per_epoch,
        best_epoch,
    };
    Ok((run, model))
}

/// Per-epoch metrics as CSV, one row per epoch.
pub fn write_metrics_csv(path: &std::path::Path, records: &[MetricsRecord]) -> Result<(), LstmError> {
    let mut out = String::from("epoch,loss,accuracy,precision,recall,f1\n");
    for m in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch, m.loss, m.accuracy, m.precision, m.recall, m.f1
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpt::{Gpt, TransformerConfig};
    use rand::Rng;

    fn random_table(vocab: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(vocab, dim);
        crate::tensor::normal_fill(&mut m.data, 0.5, &mut rng);
        m
    }

    fn random_input(t: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(t, dim);
        crate::tensor::normal_fill(&mut m.data, 1.0, &mut rng);
        m
    }

    #[test]
    fn probability_is_bounded_on_random_inputs() {
        let model = LstmClassifier::new(6, 2, 5, 0.01, 0.0, 1);
        for seed in 0..20 {
            let p = model.predict(&random_input(9, 6, seed)).unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn zero_weight_head_gives_exactly_half() {
        let mut model = LstmClassifier::new(4, 1, 3, 0.01, 0.0, 2);
        let head_w = model.head_w_idx();
        model.params[head_w].data.iter_mut().for_each(|v| *v = 0.0);
        let head_b = model.head_b_idx();
        model.params[head_b].data[0] = 0.0;
        let p = model.predict(&random_input(5, 4, 3)).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let model = LstmClassifier::new(4, 1, 3, 0.01, 0.0, 4);
        let empty = Mat::zeros(0, 4);
        assert!(matches!(model.predict(&empty), Err(LstmError::EmptySequence)));
    }

    #[test]
    fn batched_prediction_equals_per_item() {
        let model = LstmClassifier::new(5, 2, 7, 0.01, 0.3, 5);
        let inputs: Vec<Mat> = (0..12)
            .map(|i| random_input(3 + (i as usize * 7) % 11, 5, 100 + i))
            .collect();
        let refs: Vec<&Mat> = inputs.iter().collect();
        let batched = model.predict_batch(&refs).unwrap();
        for (input, &b) in inputs.iter().zip(batched.iter()) {
            let single = model.predict(input).unwrap();
            assert_eq!(single, b, "batched and per-item prediction differ");
        }
    }

    #[test]
    fn batch_padding_never_changes_a_sample() {
        // The short sample's probability must not depend on how much longer
        // its batchmates run.
        let model = LstmClassifier::new(4, 2, 6, 0.01, 0.0, 6);
        let short = random_input(4, 4, 7);
        let long = random_input(40, 4, 8);
        let alone = model.predict(&short).unwrap();
        let batched = model.predict_batch(&[&short, &long]).unwrap();
        assert_eq!(alone, batched[0]);
    }

    #[test]
    fn eval_mode_is_dropout_free_and_deterministic() {
        let model = LstmClassifier::new(4, 2, 6, 0.01, 0.5, 9);
        let x = random_input(8, 4, 10);
        assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trained = model.forward_sample(&x, Some(&mut rng)).unwrap();
        let eval = model.forward_sample(&x, None).unwrap();
        assert_ne!(trained.logit, eval.logit);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 1 layer, 3 units, sequence length 4: every parameter, through
        // LeakyReLU and the sigmoid head.
        let input = random_input(4, 2, 11);
        let label = true;
        let loss_of = |model: &LstmClassifier| {
            let cache = model.forward_sample(&input, None).unwrap();
            bce_from_logit(cache.logit, label)
        };
        let model = LstmClassifier::new(2, 1, 3, 0.01, 0.0, 12);
        let cache = model.forward_sample(&input, None).unwrap();
        let mut grads = model.zero_grads();
        let d_logit = sigmoid(cache.logit) - 1.0;
        model.backward_sample(&cache, d_logit, &mut grads);

        let eps = 1e-6;
        for (bi, block) in model.params.iter().enumerate() {
            for k in 0..block.len() {
                let mut plus = LstmClassifier {
                    input_dim: 2,
                    hidden: 3,
                    layers: 1,
                    leaky_slope: 0.01,
                    dropout: 0.0,
                    params: model.params.clone(),
                };
                plus.params[bi].data[k] += eps;
                let mut minus = LstmClassifier {
                    input_dim: 2,
                    hidden: 3,
                    layers: 1,
                    leaky_slope: 0.01,
                    dropout: 0.0,
                    params: model.params.clone(),
                };
                minus.params[bi].data[k] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let analytic = grads[bi][k];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                assert!(
                    rel < 1e-3,
                    "{} [{k}]: numeric {numeric:.9} analytic {analytic:.9}",
                    block.name
                );
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = LstmClassifier::new(3, 2, 4, 0.01, 0.0, 13);
        let input = random_input(5, 3, 14);
        let cache = model.forward_sample(&input, None).unwrap();
        let mut grads = model.zero_grads();
        let d_logit = sigmoid(cache.logit) - 0.0;
        let d_input = model.backward_sample(&cache, d_logit, &mut grads);
        let eps = 1e-6;
        for t in 0..5 {
            for i in 0..3 {
                let mut plus = input.clone();
                plus.row_mut(t)[i] += eps;
                let mut minus = input.clone();
                minus.row_mut(t)[i] -= eps;
                let lp = bce_from_logit(model.forward_sample(&plus, None).unwrap().logit, false);
                let lm = bce_from_logit(model.forward_sample(&minus, None).unwrap().logit, false);
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = d_input.row(t)[i];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                assert!(rel < 1e-3, "input[{t}][{i}]");
            }
        }
    }

    /// Toy task: label = whether token 1 appears in the sequence.
    fn planted_samples(n: usize, vocab: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2 == 0;
                let len = rng.random_range(5..10);
                let mut ids: Vec<u32> = (0..len)
                    .map(|_| rng.random_range(2..vocab as u32))
                    .collect();
                if label {
                    let pos = rng.random_range(0..len);
                    ids[pos] = 1;
                }
                TrainSample { ids, label }
            })
            .collect()
    }

    fn toy_config(optimizer: OptimizerSpec, freeze: bool) -> ClassifierConfig {
        ClassifierConfig {
            lstm_layers: 2,
            hidden_units: 8,
            leaky_slope: 0.01,
            dropout: 0.0,
            epochs: 50,
            freeze_embedder: freeze,
            optimizer,
            decision_threshold: 0.5,
            batch_size: 4,
        }
    }

    #[test]
    fn memorizes_twenty_toy_samples() {
        let samples = planted_samples(20, 12, 15);
        let cfg = toy_config(OptimizerSpec::adam(0.01), true);
        let mut embedder = EmbeddingSource::from_table(random_table(12, 6, 16));
        let (run, model) =
            train_classifier(&cfg, &mut embedder, &samples, &samples, "toy", 17).unwrap();
        // Training accuracy here equals validation accuracy (same set).
        let best = run.best_metrics().expect("improved over majority");
        assert_eq!(best.accuracy, 1.0, "expected perfect accuracy, run: {:?}", run.per_epoch.last());
        for s in &samples {
            let emb = embedder.embed_eval(&s.ids).unwrap();
            let p = model.predict(&emb).unwrap();
            assert_eq!(p >= 0.5, s.label);
        }
    }

    #[test]
    fn frozen_embedder_digest_is_unchanged_and_unfrozen_changes() {
        let samples = planted_samples(16, 12, 18);
        let table = random_table(12, 6, 19);

        let mut frozen = EmbeddingSource::from_table(table.clone());
        let before = frozen.digest();
        let mut cfg = toy_config(OptimizerSpec::adam(0.01), true);
        cfg.epochs = 5;
        train_classifier(&cfg, &mut frozen, &samples, &samples, "toy", 20).unwrap();
        assert_eq!(frozen.digest(), before, "frozen embedder must be bitwise unchanged");

        let mut unfrozen = EmbeddingSource::from_table(table);
        let before = unfrozen.digest();
        let mut cfg = toy_config(OptimizerSpec::adam(0.01), false);
        cfg.epochs = 5;
        train_classifier(&cfg, &mut unfrozen, &samples, &samples, "toy", 20).unwrap();
        assert_ne!(unfrozen.digest(), before, "unfrozen embedder must change");
    }

    #[test]
    fn unfrozen_transformer_gets_gradient_updates() {
        let cfg_t = TransformerConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_positions: 16,
            vocab_size: 12,
            dropout: 0.0,
        };
        let model = Gpt::new(cfg_t, 21).unwrap();
        let ckpt = EmbedderCheckpoint {
            model,
            trained_steps: 0,
            val_loss: 0.0,
            corpus_manifest_ref: "toy".into(),
        };
        let mut embedder = EmbeddingSource::Transformer { checkpoint: ckpt, layer: None };
        let before = embedder.digest();
        let samples = planted_samples(8, 12, 22);
        let mut cfg = toy_config(OptimizerSpec::sgd_momentum(0.01, 0.01), false);
        cfg.epochs = 2;
        let (run, _) = train_classifier(&cfg, &mut embedder, &samples, &samples, "toy", 23).unwrap();
        assert_ne!(embedder.digest(), before);
        assert_eq!(run.per_epoch.len(), 2);
    }

    #[test]
    fn single_class_training_set_is_an_error() {
        let samples: Vec<TrainSample> = (0..6)
            .map(|i| TrainSample { ids: vec![2, 3, (4 + i) as u32], label: true })
            .collect();
        let cfg = toy_config(OptimizerSpec::adam(0.01), true);
        let mut embedder = EmbeddingSource::from_table(random_table(12, 6, 24));
        assert!(matches!(
            train_classifier(&cfg, &mut embedder, &samples, &samples, "toy", 25),
            Err(LstmError::SingleClassDataset)
        ));
    }

    #[test]
    fn best_epoch_follows_accuracy_then_loss() {
        let samples = planted_samples(20, 12, 26);
        let mut cfg = toy_config(OptimizerSpec::adam(0.01), true);
        cfg.epochs = 10;
        let mut embedder = EmbeddingSource::from_table(random_table(12, 6, 27));
        let (run, _) = train_classifier(&cfg, &mut embedder, &samples, &samples, "toy", 28).unwrap();
        assert_eq!(run.per_epoch.len(), 10);
        for (i, m) in run.per_epoch.iter().enumerate() {
            assert_eq!(m.epoch, i + 1);
        }
        if let Some(best) = run.best_metrics() {
            for m in &run.per_epoch {
                assert!(
                    m.accuracy < best.accuracy
                        || (m.accuracy == best.accuracy && m.loss >= best.loss)
                        || m.epoch == best.epoch
                );
            }
        }
    }
}
