//! A GPT-style causal language model with explicit forward and backward
//! passes, trained from scratch to provide per-token embeddings.
//!
//! Layout is pre-norm: `x += attn(ln1(x)); x += mlp(ln2(x))`, learned
//! absolute position embeddings, GELU feed-forward, and an output head tied
//! to the token embedding. Attention probabilities are recomputed during the
//! backward pass instead of cached, which keeps activation memory linear in
//! sequence length.
//!
//! Causality is structural: position `t` only ever reads keys and values at
//! positions `<= t`, so gradients with respect to later inputs are exactly
//! zero, not merely small.

use crate::container::{self, ContainerError};
use crate::exec;
use crate::hash::derive_seed;
use crate::tensor::{
    dropout_mask, gelu_backward, gelu_forward, layernorm_backward, layernorm_forward,
    linear_backward_input, linear_backward_params, linear_forward, normal_fill, Mat, ParamBlock,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    /// The full-scale configuration: 12 layers, 100-dim embeddings, 10 heads,
    /// 2048 positions.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            d_model: 100,
            n_heads: 10,
            d_ff: 400,
            max_positions: 2048,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), GptError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(GptError::ConfigInvalid("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(GptError::ConfigInvalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GptError::ConfigInvalid(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GptError {
    #[error("invalid transformer config: {0}")]
    ConfigInvalid(String),
    #[error("sequence of {len} tokens exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },
    #[error("tensor {name} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("container: {0}")]
    Container(#[from] ContainerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// Per-layer parameter offsets within the block list.
const P_LN1_G: usize = 0;
const P_LN1_B: usize = 1;
const P_QKV_W: usize = 2;
const P_QKV_B: usize = 3;
const P_PROJ_W: usize = 4;
const P_PROJ_B: usize = 5;
const P_LN2_G: usize = 6;
const P_LN2_B: usize = 7;
const P_FC_W: usize = 8;
const P_FC_B: usize = 9;
const P_FCPROJ_W: usize = 10;
const P_FCPROJ_B: usize = 11;
const PER_LAYER: usize = 12;

const WTE: usize = 0;
const WPE: usize = 1;

pub struct Gpt {
    pub cfg: TransformerConfig,
    pub params: Vec<ParamBlock>,
}

/// Cached activations of one forward pass over a single sequence.
pub struct GptActs {
    pub ids: Vec<u32>,
    t: usize,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerActs>,
    final_x: Mat,
    lnf_out: Mat,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    logits: Option<Mat>,
}

struct LayerActs {
    x_in: Mat,
    ln1_out: Mat,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Mat,
    atty: Mat,
    att_mask: Option<Vec<f64>>,
    x_mid: Mat,
    ln2_out: Mat,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc_pre: Mat,
    gelu_out: Mat,
    mlp_mask: Option<Vec<f64>>,
}

impl GptActs {
    /// Hidden states at the embedding tap: `None` selects the final
    /// layer-normed output, `Some(k)` the raw output of block `k`.
    pub fn hidden(&self, layer: Option<usize>) -> &Mat {
        match layer {
            None => &self.lnf_out,
            Some(k) => {
                if k + 1 < self.layers.len() {
                    &self.layers[k + 1].x_in
                } else {
                    &self.final_x
                }
            }
        }
    }

    pub fn logits(&self) -> Option<&Mat> {
        self.logits.as_ref()
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }
}

impl Gpt {
    /// Expected (name, shape) pairs in parameter order, derived from config.
    pub fn expected_shapes(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
        let (c, f, v, p) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_positions);
        let mut shapes = vec![
            ("wte".to_string(), vec![v, c]),
            ("wpe".to_string(), vec![p, c]),
        ];
        for l in 0..cfg.n_layers {
            shapes.push((format!("h{l}.ln1.gamma"), vec![c]));
            shapes.push((format!("h{l}.ln1.beta"), vec![c]));
            shapes.push((format!("h{l}.attn.qkv.w"), vec![3 * c, c]));
            shapes.push((format!("h{l}.attn.qkv.b"), vec![3 * c]));
            shapes.push((format!("h{l}.attn.proj.w"), vec![c, c]));
            shapes.push((format!("h{l}.attn.proj.b"), vec![c]));
            shapes.push((format!("h{l}.ln2.gamma"), vec![c]));
            shapes.push((format!("h{l}.ln2.beta"), vec![c]));
            shapes.push((format!("h{l}.mlp.fc.w"), vec![f, c]));
            shapes.push((format!("h{l}.mlp.fc.b"), vec![f]));
            shapes.push((format!("h{l}.mlp.proj.w"), vec![c, f]));
            shapes.push((format!("h{l}.mlp.proj.b"), vec![c]));
        }
        shapes.push(("lnf.gamma".to_string(), vec![c]));
        shapes.push(("lnf.beta".to_string(), vec![c]));
        shapes
    }

    /// Initializes with scaled normal weights (sigma 0.02; residual
    /// projections further scaled by 1/sqrt(2 * n_layers)), unit layer-norm
    /// gains, zero biases.
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self, GptError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let params = Self::expected_shapes(&cfg)
            .into_iter()
            .map(|(name, shape)| {
                let mut block = ParamBlock::zeros(name, shape);
                let n = &block.name;
                if n.ends_with(".gamma") {
                    block.data.iter_mut().for_each(|v| *v = 1.0);
                } else if n.ends_with(".w") || n == "wte" || n == "wpe" {
                    let std = if n.ends_with("proj.w") { 0.02 * resid_scale } else { 0.02 };
                    normal_fill(&mut block.data, std, &mut rng);
                }
                block
            })
            .collect();
        Ok(Self { cfg, params })
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn digest(&self) -> String {
        container::digest(&self.params)
    }

    fn layer_param(&self, layer: usize, offset: usize) -> &ParamBlock {
        &self.params[2 + layer * PER_LAYER + offset]
    }

    fn lnf_index(&self) -> usize {
        2 + self.cfg.n_layers * PER_LAYER
    }

    /// Forward pass over one sequence. Pass a dropout RNG for training mode;
    /// `None` runs deterministically with dropout off.
    pub fn forward(
        &self,
        ids: &[u32],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GptActs, GptError> {
        if ids.is_empty() {
            return Err(GptError::EmptySequence);
        }
        if ids.len() > self.cfg.max_positions {
            return Err(GptError::SequenceTooLong { len: ids.len(), max: self.cfg.max_positions });
        }
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(GptError::TokenOutOfRange { id, vocab: self.cfg.vocab_size });
            }
        }
        let t = ids.len();
        let c = self.cfg.d_model;
        let p = self.cfg.dropout;
        let wte = &self.params[WTE].data;
        let wpe = &self.params[WPE].data;

        let mut embedded = Mat::zeros(t, c);
        for (pos, &id) in ids.iter().enumerate() {
            let row = embedded.row_mut(pos);
            let tok = &wte[id as usize * c..(id as usize + 1) * c];
            let posv = &wpe[pos * c..(pos + 1) * c];
            for i in 0..c {
                row[i] = tok[i] + posv[i];
            }
        }
        let emb_mask = match (&mut dropout_rng, p > 0.0) {
            (Some(rng), true) => {
                let mask = dropout_mask(t * c, p, rng);
                apply_mask(&mut embedded.data, &mask);
                Some(mask)
            }
            _ => None,
        };

        let mut x = embedded.clone();
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let (acts, x_out) = self.block_forward(l, x, &mut dropout_rng)?;
            layers.push(acts);
            x = x_out;
        }

        let mut lnf_out = Mat::zeros(t, c);
        let mut lnf_mean = vec![0.0; t];
        let mut lnf_rstd = vec![0.0; t];
        let lnf = self.lnf_index();
        layernorm_forward(
            &x.data,
            t,
            c,
            &self.params[lnf].data,
            &self.params[lnf + 1].data,
            &mut lnf_out.data,
            &mut lnf_mean,
            &mut lnf_rstd,
        );

        Ok(GptActs {
            ids: ids.to_vec(),
            t,
            emb_mask,
            layers,
            final_x: x,
            lnf_out,
            lnf_mean,
            lnf_rstd,
            logits: None,
        })
    }

    fn block_forward(
        &self,
        l: usize,
        x_in: Mat,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(LayerActs, Mat), GptError> {
        let t = x_in.rows;
        let c = self.cfg.d_model;
        let f = self.cfg.d_ff;
        let p = self.cfg.dropout;

        let mut ln1_out = Mat::zeros(t, c);
        let mut ln1_mean = vec![0.0; t];
        let mut ln1_rstd = vec![0.0; t];
        layernorm_forward(
            &x_in.data,
            t,
            c,
            &self.layer_param(l, P_LN1_G).data,
            &self.layer_param(l, P_LN1_B).data,
            &mut ln1_out.data,
            &mut ln1_mean,
            &mut ln1_rstd,
        );

        let mut qkv = Mat::zeros(t, 3 * c);
        linear_forward(
            &ln1_out.data,
            t,
            c,
            &self.layer_param(l, P_QKV_W).data,
            3 * c,
            Some(&self.layer_param(l, P_QKV_B).data),
            &mut qkv.data,
        );

        let mut atty = Mat::zeros(t, c);
        self.attention_forward(&qkv, &mut atty);

        let mut att_out = Mat::zeros(t, c);
        linear_forward(
            &atty.data,
            t,
            c,
            &self.layer_param(l, P_PROJ_W).data,
            c,
            Some(&self.layer_param(l, P_PROJ_B).data),
            &mut att_out.data,
        );
        let att_mask = match (dropout_rng.as_deref_mut(), p > 0.0) {
            (Some(rng), true) => {
                let mask = dropout_mask(t * c, p, rng);
                apply_mask(&mut att_out.data, &mask);
                Some(mask)
            }
            _ => None,
        };

        let mut x_mid = x_in.clone();
        for i in 0..t * c {
            x_mid.data[i] += att_out.data[i];
        }

        let mut ln2_out = Mat::zeros(t, c);
        let mut ln2_mean = vec![0.0; t];
        let mut ln2_rstd = vec![0.0; t];
        layernorm_forward(
            &x_mid.data,
            t,
            c,
            &self.layer_param(l, P_LN2_G).data,
            &self.layer_param(l, P_LN2_B).data,
            &mut ln2_out.data,
            &mut ln2_mean,
            &mut ln2_rstd,
        );

        let mut fc_pre = Mat::zeros(t, f);
        linear_forward(
            &ln2_out.data,
            t,
            c,
            &self.layer_param(l, P_FC_W).data,
            f,
            Some(&self.layer_param(l, P_FC_B).data),
            &mut fc_pre.data,
        );
        let mut gelu_out = Mat::zeros(t, f);
        gelu_forward(&fc_pre.data, &mut gelu_out.data);

        let mut mlp_out = Mat::zeros(t, c);
        linear_forward(
            &gelu_out.data,
            t,
            f,
            &self.layer_param(l, P_FCPROJ_W).data,
            c,
            Some(&self.layer_param(l, P_FCPROJ_B).data),
            &mut mlp_out.data,
        );
        let mlp_mask = match (dropout_rng.as_deref_mut(), p > 0.0) {
            (Some(rng), true) => {
                let mask = dropout_mask(t * c, p, rng);
                apply_mask(&mut mlp_out.data, &mask);
                Some(mask)
            }
            _ => None,
        };

        let mut x_out = x_mid.clone();
        for i in 0..t * c {
            x_out.data[i] += mlp_out.data[i];
        }

        let acts = LayerActs {
            x_in,
            ln1_out,
            ln1_mean,
            ln1_rstd,
            qkv,
            atty,
            att_mask,
            x_mid,
            ln2_out,
            ln2_mean,
            ln2_rstd,
            fc_pre,
            gelu_out,
            mlp_mask,
        };
        Ok((acts, x_out))
    }

    /// Causal multi-head attention: position `t` attends to positions
    /// `0..=t` only. Rows of the output are independent, so the loop is
    /// parallel over `t`.
    fn attention_forward(&self, qkv: &Mat, atty: &mut Mat) {
        let c = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv_data = &qkv.data;
        exec::for_each_row(&mut atty.data, c, |t, out_row| {
            let mut scores = vec![0.0; t + 1];
            for head in 0..h {
                let q = &qkv_data[t * 3 * c + head * dh..t * 3 * c + head * dh + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &qkv_data[j * 3 * c + c + head * dh..j * 3 * c + c + head * dh + dh];
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += q[i] * k[i];
                    }
                    *s = dot * scale;
                }
                crate::tensor::softmax_in_place(&mut scores);
                let out = &mut out_row[head * dh..head * dh + dh];
                out.iter_mut().for_each(|v| *v = 0.0);
                for (j, &p) in scores.iter().enumerate() {
                    let v = &qkv_data[j * 3 * c + 2 * c + head * dh..j * 3 * c + 2 * c + head * dh + dh];
                    for i in 0..dh {
                        out[i] += p * v[i];
                    }
                }
            }
        });
    }

    /// Attention backward; recomputes each row's softmax from the cached
    /// qkv. Heads are independent and run in parallel, each producing its
    /// own gradient slab that is scattered back in head order.
    fn attention_backward(&self, qkv: &Mat, d_atty: &Mat, d_qkv: &mut Mat) {
        let t_dim = qkv.rows;
        let c = self.cfg.d_model;
        let dh = self.cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<usize> = (0..self.cfg.n_heads).collect();
        let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = exec::map_ordered(&heads, |&head| {
            let mut dq = vec![0.0; t_dim * dh];
            let mut dk = vec![0.0; t_dim * dh];
            let mut dv = vec![0.0; t_dim * dh];
            let mut probs = vec![0.0; t_dim];
            for t in 0..t_dim {
                let q = &qkv.data[t * 3 * c + head * dh..t * 3 * c + head * dh + dh];
                let scores = &mut probs[..t + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &qkv.data[j * 3 * c + c + head * dh..j * 3 * c + c + head * dh + dh];
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += q[i] * k[i];
                    }
                    *s = dot * scale;
                }
                crate::tensor::softmax_in_place(scores);

                let dy = &d_atty.data[t * c + head * dh..t * c + head * dh + dh];
                // dp_j = dy . v_j ; dv_j += p_j * dy
                let mut dp = vec![0.0; t + 1];
                for j in 0..=t {
                    let v = &qkv.data[j * 3 * c + 2 * c + head * dh..j * 3 * c + 2 * c + head * dh + dh];
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += dy[i] * v[i];
                        dv[j * dh + i] += scores[j] * dy[i];
                    }
                    dp[j] = dot;
                }
                let inner: f64 = (0..=t).map(|j| scores[j] * dp[j]).sum();
                for j in 0..=t {
                    let ds = scores[j] * (dp[j] - inner) * scale;
                    let k = &qkv.data[j * 3 * c + c + head * dh..j * 3 * c + c + head * dh + dh];
                    for i in 0..dh {
                        dq[t * dh + i] += ds * k[i];
                        dk[j * dh + i] += ds * q[i];
                    }
                }
            }
            (dq, dk, dv)
        });
        for (head, (dq, dk, dv)) in partials.iter().enumerate() {
            for t in 0..t_dim {
                for i in 0..dh {
                    d_qkv.data[t * 3 * c + head * dh + i] += dq[t * dh + i];
                    d_qkv.data[t * 3 * c + c + head * dh + i] += dk[t * dh + i];
                    d_qkv.data[t * 3 * c + 2 * c + head * dh + i] += dv[t * dh + i];
                }
            }
        }
    }

    /// Computes logits through the tied output head and the mean
    /// cross-entropy over positions with a target.
    pub fn loss(&self, acts: &mut GptActs, targets: &[Option<u32>]) -> Result<f64, GptError> {
        assert_eq!(targets.len(), acts.t);
        let c = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let mut logits = Mat::zeros(acts.t, v);
        linear_forward(
            &acts.lnf_out.data,
            acts.t,
            c,
            &self.params[WTE].data,
            v,
            None,
            &mut logits.data,
        );
        let rows: Vec<usize> = (0..acts.t).collect();
        let losses: Vec<f64> = exec::map_ordered(&rows, |&t| {
            let Some(target) = targets[t] else { return 0.0 };
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            max + sum_exp.ln() - row[target as usize]
        });
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(GptError::EmptySequence);
        }
        let total: f64 = losses.iter().sum();
        acts.logits = Some(logits);
        Ok(total / count as f64)
    }

    /// Backward from the language-model loss. `scale` multiplies every
    /// position's logit gradient (use `1/positions` for a mean loss).
    /// Returns the gradient at the embedded input.
    pub fn backward_from_logits(
        &self,
        acts: &GptActs,
        targets: &[Option<u32>],
        scale: f64,
        grads: &mut [Vec<f64>],
    ) -> Result<Mat, GptError> {
        let logits = acts.logits.as_ref().expect("loss() must run before backward");
        let c = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let mut dlogits = Mat::zeros(acts.t, v);
        exec::for_each_row(&mut dlogits.data, v, |t, drow| {
            let Some(target) = targets[t] else { return };
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum_exp = 0.0;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                drow[i] = e;
                sum_exp += e;
            }
            for (i, d) in drow.iter_mut().enumerate() {
                let p = *d / sum_exp;
                let onehot = if i == target as usize { 1.0 } else { 0.0 };
                *d = (p - onehot) * scale;
            }
        });

        // Tied head: dwte += dlogits^T lnf_out ; d_lnf_out = dlogits wte.
        let mut d_lnf_out = Mat::zeros(acts.t, c);
        linear_backward_input(&dlogits.data, acts.t, v, &self.params[WTE].data, c, &mut d_lnf_out.data);
        linear_backward_params(
            &acts.lnf_out.data,
            acts.t,
            c,
            &dlogits.data,
            v,
            &mut grads[WTE],
            None,
        );
        self.backward_body(acts, BackFrom::FinalNorm(d_lnf_out), grads)
    }

    /// Backward from a gradient on the embedding tap (`layer` as in
    /// [`GptActs::hidden`]). Used when a downstream model trains through the
    /// embedder. Returns the gradient at the embedded input.
    pub fn backward_from_hidden(
        &self,
        acts: &GptActs,
        layer: Option<usize>,
        d_hidden: &Mat,
        grads: &mut [Vec<f64>],
    ) -> Result<Mat, GptError> {
        let from = match layer {
            None => BackFrom::FinalNorm(d_hidden.clone()),
            Some(k) => BackFrom::Block(k, d_hidden.clone()),
        };
        self.backward_body(acts, from, grads)
    }

    fn backward_body(
        &self,
        acts: &GptActs,
        from: BackFrom,
        grads: &mut [Vec<f64>],
    ) -> Result<Mat, GptError> {
        let t = acts.t;
        let c = self.cfg.d_model;
        let (mut dx, start_layer) = match from {
            BackFrom::FinalNorm(d_lnf_out) => {
                let lnf = self.lnf_index();
                let mut d_final = Mat::zeros(t, c);
                let (dg, db) = {
                    let (left, right) = grads.split_at_mut(lnf + 1);
                    (&mut left[lnf], &mut right[0])
                };
                layernorm_backward(
                    &acts.final_x.data,
                    t,
                    c,
                    &self.params[self.lnf_index()].data,
                    &acts.lnf_mean,
                    &acts.lnf_rstd,
                    &d_lnf_out.data,
                    &mut d_final.data,
                    dg,
                    db,
                );
                (d_final, self.cfg.n_layers)
            }
            BackFrom::Block(k, d_x) => {
                assert!(k < self.cfg.n_layers, "embed layer out of range");
                (d_x, k + 1)
            }
        };

        for l in (0..start_layer).rev() {
            dx = self.block_backward(l, &acts.layers[l], &dx, grads);
        }

        // Embedding dropout backward, then scatter into wte / wpe rows.
        let mut d_embedded = dx;
        if let Some(mask) = &acts.emb_mask {
            apply_mask(&mut d_embedded.data, mask);
        }
        for (pos, &id) in acts.ids.iter().enumerate() {
            let src = d_embedded.row(pos);
            let wte_row = &mut grads[WTE][id as usize * c..(id as usize + 1) * c];
            for i in 0..c {
                wte_row[i] += src[i];
            }
            let wpe_row = &mut grads[WPE][pos * c..(pos + 1) * c];
            for i in 0..c {
                wpe_row[i] += src[i];
            }
        }
        Ok(d_embedded)
    }

    fn block_backward(
        &self,
        l: usize,
        layer: &LayerActs,
        dx_out: &Mat,
        grads: &mut [Vec<f64>],
    ) -> Mat {
        let t = dx_out.rows;
        let c = self.cfg.d_model;
        let f = self.cfg.d_ff;
        let base = 2 + l * PER_LAYER;

        // x_out = x_mid + dropout(mlp_out)
        let mut d_mlp_out = dx_out.clone();
        if let Some(mask) = &layer.mlp_mask {
            apply_mask(&mut d_mlp_out.data, mask);
        }
        let mut d_x_mid = dx_out.clone();

        // mlp proj
        let mut d_gelu = Mat::zeros(t, f);
        linear_backward_input(
            &d_mlp_out.data,
            t,
            c,
            &self.layer_param(l, P_FCPROJ_W).data,
            f,
            &mut d_gelu.data,
        );
        {
            let (dw, db) = two_grads(grads, base + P_FCPROJ_W, base + P_FCPROJ_B);
            linear_backward_params(&layer.gelu_out.data, t, f, &d_mlp_out.data, c, dw, Some(db));
        }

        // gelu
        let mut d_fc_pre = Mat::zeros(t, f);
        gelu_backward(&layer.fc_pre.data, &d_gelu.data, &mut d_fc_pre.data);

        // mlp fc
        let mut d_ln2 = Mat::zeros(t, c);
        linear_backward_input(
            &d_fc_pre.data,
            t,
            f,
            &self.layer_param(l, P_FC_W).data,
            c,
            &mut d_ln2.data,
        );
        {
            let (dw, db) = two_grads(grads, base + P_FC_W, base + P_FC_B);
            linear_backward_params(&layer.ln2_out.data, t, c, &d_fc_pre.data, f, dw, Some(db));
        }

        // ln2
        {
            let (dg, db) = two_grads(grads, base + P_LN2_G, base + P_LN2_B);
            layernorm_backward(
                &layer.x_mid.data,
                t,
                c,
                &self.layer_param(l, P_LN2_G).data,
                &layer.ln2_mean,
                &layer.ln2_rstd,
                &d_ln2.data,
                &mut d_x_mid.data,
                dg,
                db,
            );
        }

        // x_mid = x_in + dropout(att_out)
        let mut d_att_out = d_x_mid.clone();
        if let Some(mask) = &layer.att_mask {
            apply_mask(&mut d_att_out.data, mask);
        }
        let mut d_x_in = d_x_mid;

        // attn proj
        let mut d_atty = Mat::zeros(t, c);
        linear_backward_input(
            &d_att_out.data,
            t,
            c,
            &self.layer_param(l, P_PROJ_W).data,
            c,
            &mut d_atty.data,
        );
        {
            let (dw, db) = two_grads(grads, base + P_PROJ_W, base + P_PROJ_B);
            linear_backward_params(&layer.atty.data, t, c, &d_att_out.data, c, dw, Some(db));
        }

        // attention core
        let mut d_qkv = Mat::zeros(t, 3 * c);
        self.attention_backward(&layer.qkv, &d_atty, &mut d_qkv);

        // qkv linear
        let mut d_ln1 = Mat::zeros(t, c);
        linear_backward_input(
            &d_qkv.data,
            t,
            3 * c,
            &self.layer_param(l, P_QKV_W).data,
            c,
            &mut d_ln1.data,
        );
        {
            let (dw, db) = two_grads(grads, base + P_QKV_W, base + P_QKV_B);
            linear_backward_params(&layer.ln1_out.data, t, c, &d_qkv.data, 3 * c, dw, Some(db));
        }

        // ln1
        {
            let (dg, db) = two_grads(grads, base + P_LN1_G, base + P_LN1_B);
            layernorm_backward(
                &layer.x_in.data,
                t,
                c,
                &self.layer_param(l, P_LN1_G).data,
                &layer.ln1_mean,
                &layer.ln1_rstd,
                &d_ln1.data,
                &mut d_x_in.data,
                dg,
                db,
            );
        }
        d_x_in
    }

    /// Deterministic per-token embeddings (dropout off): shape
    /// `(len(ids), d_model)`.
    pub fn embed(&self, ids: &[u32], layer: Option<usize>) -> Result<Mat, GptError> {
        let acts = self.forward(ids, None)?;
        Ok(acts.hidden(layer).clone())
    }
}

enum BackFrom {
    FinalNorm(Mat),
    Block(usize, Mat),
}

fn two_grads(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    assert!(a < b);
    let (left, right) = grads.split_at_mut(b);
    (&mut left[a], &mut right[0])
}

fn apply_mask(data: &mut [f64], mask: &[f64]) {
    for (v, &m) in data.iter_mut().zip(mask.iter()) {
        *v *= m;
    }
}

/// Training options for the causal-LM phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClmTrainOpts {
    pub epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub min_lr_fraction: f64,
    pub seed: u64,
    /// Optional hard cap on optimizer steps (for bounded sanity runs).
    pub max_steps: Option<usize>,
}

impl Default for ClmTrainOpts {
    fn default() -> Self {
        Self {
            epochs: 20,
            eval_every: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            seed: 0,
            max_steps: None,
        }
    }
}

/// One line of the training log: instantaneous batch loss, a 100-step
/// moving average, and the validation loss at this evaluation step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClmLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_loss_avg: f64,
    pub val_loss: f64,
}

/// A trained embedder: best-validation weights plus training metadata.
pub struct EmbedderCheckpoint {
    pub model: Gpt,
    pub trained_steps: usize,
    pub val_loss: f64,
    pub corpus_manifest_ref: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    trained_steps: usize,
    val_loss: f64,
    corpus_manifest_ref: String,
}

impl EmbedderCheckpoint {
    pub fn digest(&self) -> String {
        self.model.digest()
    }

    pub fn save(&self, dir: &Path) -> Result<(), GptError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.model.cfg)?)?;
        let meta = CheckpointMeta {
            trained_steps: self.trained_steps,
            val_loss: self.val_loss,
            corpus_manifest_ref: self.corpus_manifest_ref.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        container::save_tensors(&dir.join("tensors.bin"), &self.model.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, GptError> {
        let cfg: TransformerConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        cfg.validate()?;
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let params = container::load_tensors(&dir.join("tensors.bin"))?;
        let expected = Gpt::expected_shapes(&cfg);
        if params.len() != expected.len() {
            return Err(GptError::ShapeMismatch {
                name: "(param count)".into(),
                expected: vec![expected.len()],
                actual: vec![params.len()],
            });
        }
        for (p, (name, shape)) in params.iter().zip(expected.iter()) {
            if &p.name != name || &p.shape != shape {
                return Err(GptError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: shape.clone(),
                    actual: p.shape.clone(),
                });
            }
        }
        Ok(Self {
            model: Gpt { cfg, params },
            trained_steps: meta.trained_steps,
            val_loss: meta.val_loss,
            corpus_manifest_ref: meta.corpus_manifest_ref,
        })
    }
}

/// Mean validation cross-entropy, computed per sequence in parallel and
/// reduced in input order.
pub fn validation_loss(model: &Gpt, val_seqs: &[Vec<u32>]) -> Result<f64, GptError> {
    let per_seq: Vec<Result<(f64, usize), GptError>> = exec::map_ordered(val_seqs, |seq| {
        if seq.len() < 2 {
            return Ok((0.0, 0));
        }
        let inputs = &seq[..seq.len() - 1];
        let targets: Vec<Option<u32>> = seq[1..].iter().map(|&t| Some(t)).collect();
        let mut acts = model.forward(inputs, None)?;
        let mean = model.loss(&mut acts, &targets)?;
        Ok((mean * targets.len() as f64, targets.len()))
    });
    let mut total = 0.0;
    let mut count = 0usize;
    for r in per_seq {
        let (sum, n) = r?;
        total += sum;
        count += n;
    }
    if count == 0 {
        return Err(GptError::EmptySplit("validation"));
    }
    Ok(total / count as f64)
}

fn cosine_lr(step: usize, total: usize, opts: &ClmTrainOpts) -> f64 {
    let max = opts.learning_rate;
    let min = max * opts.min_lr_fraction;
    if step < opts.warmup_steps {
        return max * (step + 1) as f64 / opts.warmup_steps as f64;
    }
    let progress = (step - opts.warmup_steps) as f64
        / (total.saturating_sub(opts.warmup_steps)).max(1) as f64;
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Trains the causal language model by next-token cross-entropy, evaluating
/// every `eval_every` steps, and returns the checkpoint with the lowest
/// validation loss seen at any evaluation point together with the full log.
pub fn train_clm(
    cfg: TransformerConfig,
    train_seqs: &[Vec<u32>],
    val_seqs: &[Vec<u32>],
    manifest_ref: &str,
    opts: &ClmTrainOpts,
) -> Result<(EmbedderCheckpoint, Vec<ClmLogRow>), GptError> {
    let usable: Vec<&Vec<u32>> = train_seqs.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(GptError::EmptySplit("train"));
    }
    if val_seqs.iter().all(|s| s.len() < 2) {
        return Err(GptError::EmptySplit("validation"));
    }

    let mut model = Gpt::new(cfg, opts.seed)?;
    let mut optimizer = crate::optim::Optimizer::new(
        crate::optim::OptimizerSpec::adam(opts.learning_rate),
        &model.params,
    );
    let steps_per_epoch = usable.len().div_ceil(opts.batch_size);
    let mut total_steps = opts.epochs * steps_per_epoch;
    if let Some(cap) = opts.max_steps {
        total_steps = total_steps.min(cap);
    }

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[&opts.seed.to_le_bytes(), b"dropout"]));
    let mut log = Vec::new();
    let mut recent = VecDeque::with_capacity(100);
    let mut best: Option<(f64, Vec<ParamBlock>, usize)> = None;
    let mut step = 0usize;

    'training: for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &opts.seed.to_le_bytes(),
            b"epoch",
            &epoch.to_le_bytes(),
        ]));
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(opts.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss_sum = 0.0;
            let mut batch_positions = 0usize;
            let mut pending: Vec<(GptActs, Vec<Option<u32>>)> = Vec::with_capacity(batch.len());
            for &idx in batch {
                let seq = usable[idx];
                let inputs = &seq[..seq.len() - 1];
                let targets: Vec<Option<u32>> = seq[1..].iter().map(|&t| Some(t)).collect();
                let mut acts = model.forward(inputs, Some(&mut dropout_rng))?;
                let mean = model.loss(&mut acts, &targets)?;
                batch_loss_sum += mean * targets.len() as f64;
                batch_positions += targets.len();
                pending.push((acts, targets));
            }
            let scale = 1.0 / batch_positions as f64;
            for (acts, targets) in &pending {
                model.backward_from_logits(acts, targets, scale, &mut grads)?;
            }
            let batch_loss = batch_loss_sum / batch_positions as f64;
            if !batch_loss.is_finite() {
                return Err(GptError::DivergedLoss { step });
            }
            let lr = cosine_lr(step, total_steps, opts);
            optimizer
                .step_with_lr(&mut model.params, &grads, lr)
                .expect("model and grads share shapes");
            step += 1;
            if recent.len() == 100 {
                recent.pop_front();
            }
            recent.push_back(batch_loss);

            let at_end = step >= total_steps;
            if step % opts.eval_every == 0 || at_end {
                let val = validation_loss(&model, val_seqs)?;
                if !val.is_finite() {
                    return Err(GptError::DivergedLoss { step });
                }
                let avg = recent.iter().sum::<f64>() / recent.len() as f64;
                log.push(ClmLogRow { step, train_loss: batch_loss, train_loss_avg: avg, val_loss: val });
                if best.as_ref().map_or(true, |(b, _, _)| val < *b) {
                    best = Some((val, model.params.clone(), step));
                }
            }
            if at_end {
                break 'training;
            }
        }
    }

    let (val_loss, params, trained_steps) = best.expect("at least one evaluation ran");
    let checkpoint = EmbedderCheckpoint {
        model: Gpt { cfg: model.cfg, params },
        trained_steps,
        val_loss,
        corpus_manifest_ref: manifest_ref.to_string(),
    };
    Ok((checkpoint, log))
}

/// Writes the training log as CSV with columns
/// `step,train_loss,train_loss_avg100,val_loss`.
pub fn write_training_log(path: &Path, log: &[ClmLogRow]) -> Result<(), GptError> {
    let mut out = String::from("step,train_loss,train_loss_avg100,val_loss\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.step, row.train_loss, row.train_loss_avg, row.val_loss
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_positions: 32,
            vocab_size: 29,
            dropout: 0.0,
        }
    }

    fn ids(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..vocab as u32)).collect()
    }

    #[test]
    fn config_requires_divisible_heads() {
        let mut cfg = tiny_cfg();
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(GptError::ConfigInvalid(_))));
        assert!(TransformerConfig::full_scale(8192).validate().is_ok());
    }

    #[test]
    fn shape_audit_matches_config() {
        let cfg = tiny_cfg();
        let model = Gpt::new(cfg, 1).unwrap();
        for (p, (name, shape)) in model.params.iter().zip(Gpt::expected_shapes(&cfg)) {
            assert_eq!(p.name, name);
            assert_eq!(p.shape, shape);
            assert_eq!(p.len(), shape.iter().product::<usize>());
        }
    }

    #[test]
    fn embed_shape_is_len_by_d_model() {
        let mut cfg = tiny_cfg();
        cfg.d_model = 100;
        cfg.n_heads = 10;
        cfg.d_ff = 400;
        cfg.n_layers = 1;
        let model = Gpt::new(cfg, 2).unwrap();
        let out = model.embed(&ids(17, cfg.vocab_size, 3), None).unwrap();
        assert_eq!((out.rows, out.cols), (17, 100));
    }

    #[test]
    fn embed_is_deterministic_in_eval_mode() {
        let model = Gpt::new(tiny_cfg(), 4).unwrap();
        let seq = ids(9, 29, 5);
        let a = model.embed(&seq, None).unwrap();
        let b = model.embed(&seq, None).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn appending_a_token_leaves_prefix_unchanged() {
        let model = Gpt::new(tiny_cfg(), 6).unwrap();
        let mut seq = ids(10, 29, 7);
        let short = model.embed(&seq, None).unwrap();
        seq.push(3);
        let long = model.embed(&seq, None).unwrap();
        for t in 0..10 {
            assert_eq!(short.row(t), long.row(t), "position {t} changed");
        }
    }

    #[test]
    fn initial_loss_near_ln_vocab() {
        for vocab in [29usize, 257, 1024] {
            let mut cfg = tiny_cfg();
            cfg.vocab_size = vocab;
            let model = Gpt::new(cfg, 8).unwrap();
            let seq = ids(16, vocab, 9);
            let inputs = &seq[..15];
            let targets: Vec<Option<u32>> = seq[1..].iter().map(|&t| Some(t)).collect();
            let mut acts = model.forward(inputs, None).unwrap();
            let loss = model.loss(&mut acts, &targets).unwrap();
            let expected = (vocab as f64).ln();
            assert!(
                (loss - expected).abs() / expected < 0.05,
                "vocab {vocab}: loss {loss} vs ln(V) {expected}"
            );
        }
    }

    #[test]
    fn sequence_too_long_and_empty_are_errors() {
        let model = Gpt::new(tiny_cfg(), 10).unwrap();
        assert!(matches!(
            model.forward(&ids(33, 29, 11), None),
            Err(GptError::SequenceTooLong { .. })
        ));
        assert!(matches!(model.forward(&[], None), Err(GptError::EmptySequence)));
        assert!(matches!(
            model.forward(&[29], None),
            Err(GptError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let model = Gpt::new(tiny_cfg(), 12).unwrap();
        let seq = ids(8, 29, 13);
        let before = model.embed(&seq, None).unwrap();
        let ckpt = EmbedderCheckpoint {
            model,
            trained_steps: 42,
            val_loss: 1.25,
            corpus_manifest_ref: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let loaded = EmbedderCheckpoint::load(dir.path()).unwrap();
        assert_eq!(loaded.trained_steps, 42);
        assert_eq!(loaded.digest(), ckpt.digest());
        let after = loaded.model.embed(&seq, None).unwrap();
        assert_eq!(before.data, after.data);
    }

    #[test]
    fn perturbing_token_j_changes_no_logits_before_j() {
        let model = Gpt::new(tiny_cfg(), 14).unwrap();
        let seq = ids(12, 29, 15);
        let targets: Vec<Option<u32>> = (0..12).map(|_| Some(0)).collect();
        let mut base = model.forward(&seq, None).unwrap();
        model.loss(&mut base, &targets).unwrap();
        let j = 5;
        let mut perturbed_ids = seq.clone();
        perturbed_ids[j] = (perturbed_ids[j] + 1) % 29;
        let mut pert = model.forward(&perturbed_ids, None).unwrap();
        model.loss(&mut pert, &targets).unwrap();
        let (bl, pl) = (base.logits().unwrap(), pert.logits().unwrap());
        for t in 0..j {
            assert_eq!(bl.row(t), pl.row(t), "logits at {t} < {j} changed");
        }
        assert_ne!(bl.row(j), pl.row(j), "logits at {j} should change");
    }

    #[test]
    fn loss_gradient_wrt_future_inputs_is_exactly_zero() {
        let model = Gpt::new(tiny_cfg(), 16).unwrap();
        let seq = ids(10, 29, 17);
        let pos = 4;
        let mut targets: Vec<Option<u32>> = vec![None; 10];
        targets[pos] = Some(1);
        let mut acts = model.forward(&seq, None).unwrap();
        model.loss(&mut acts, &targets).unwrap();
        let mut grads = model.zero_grads();
        let d_embedded = model
            .backward_from_logits(&acts, &targets, 1.0, &mut grads)
            .unwrap();
        for t in pos + 1..10 {
            assert!(
                d_embedded.row(t).iter().all(|&v| v == 0.0),
                "nonzero gradient at future position {t}"
            );
        }
        assert!(d_embedded.row(pos).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // 1 layer, d_model 4, 2 heads; every parameter checked.
        let cfg = TransformerConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
            max_positions: 8,
            vocab_size: 11,
            dropout: 0.0,
        };
        let model = Gpt::new(cfg, 18).unwrap();
        let seq = ids(5, 11, 19);
        let targets: Vec<Option<u32>> = ids(5, 11, 20).into_iter().map(Some).collect();

        let mut acts = model.forward(&seq, None).unwrap();
        model.loss(&mut acts, &targets).unwrap();
        let mut grads = model.zero_grads();
        model
            .backward_from_logits(&acts, &targets, 1.0 / 5.0, &mut grads)
            .unwrap();

        let eps = 1e-5;
        for (bi, block) in model.params.iter().enumerate() {
            for k in 0..block.len() {
                let mut plus = Gpt { cfg, params: model.params.clone() };
                plus.params[bi].data[k] += eps;
                let mut minus = Gpt { cfg, params: model.params.clone() };
                minus.params[bi].data[k] -= eps;
                let mut ap = plus.forward(&seq, None).unwrap();
                let lp = plus.loss(&mut ap, &targets).unwrap();
                let mut am = minus.forward(&seq, None).unwrap();
                let lm = minus.loss(&mut am, &targets).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads[bi][k];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                assert!(
                    rel < 1e-3,
                    "{} [{k}]: numeric {numeric:.9} analytic {analytic:.9} rel {rel:.2e}",
                    block.name
                );
            }
        }
    }

    #[test]
    fn memorizes_ten_fixed_sequences() {
        let cfg = tiny_cfg();
        let train: Vec<Vec<u32>> = (0..10).map(|i| ids(12, 29, 100 + i)).collect();
        let opts = ClmTrainOpts {
            epochs: 1000,
            eval_every: 50,
            batch_size: 10,
            learning_rate: 3e-3,
            warmup_steps: 10,
            min_lr_fraction: 0.2,
            seed: 21,
            max_steps: Some(400),
        };
        let (ckpt, log) = train_clm(cfg, &train, &train, "test", &opts).unwrap();
        let final_train = log.last().unwrap().train_loss;
        assert!(
            final_train < 0.05,
            "memorization failed: final train loss {final_train}"
        );
        assert!(ckpt.val_loss < 0.05);
    }

    #[test]
    fn empty_splits_are_errors() {
        let cfg = tiny_cfg();
        let opts = ClmTrainOpts::default();
        let some = vec![ids(8, 29, 1)];
        assert!(matches!(
            train_clm(cfg, &[], &some, "x", &opts),
            Err(GptError::EmptySplit("train"))
        ));
        assert!(matches!(
            train_clm(cfg, &some, &[], "x", &opts),
            Err(GptError::EmptySplit("validation"))
        ));
    }

    #[test]
    fn diverged_loss_is_detected() {
        let cfg = tiny_cfg();
        let mut model = Gpt::new(cfg, 22).unwrap();
        for v in model.params[WTE].data.iter_mut() {
            *v = f64::INFINITY;
        }
        let seq = ids(6, 29, 23);
        let targets: Vec<Option<u32>> = seq[1..].iter().map(|&t| Some(t)).collect();
        let mut acts = model.forward(&seq[..5], None).unwrap();
        let loss = model.loss(&mut acts, &targets[..5].to_vec()).unwrap();
        assert!(!loss.is_finite());
    }

    #[test]
    fn dropout_train_mode_differs_but_is_seeded() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let model = Gpt::new(cfg, 24).unwrap();
        let seq = ids(8, 29, 25);
        let eval = model.forward(&seq, None).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let train1 = model.forward(&seq, Some(&mut rng1)).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let train2 = model.forward(&seq, Some(&mut rng2)).unwrap();
        assert_ne!(eval.lnf_out.data, train1.lnf_out.data);
        assert_eq!(train1.lnf_out.data, train2.lnf_out.data);
    }
}
