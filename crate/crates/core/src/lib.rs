//! End-to-end pipeline for detecting stack buffer overflows in lifted LLVM IR.
//!
//! The library is organized around the stages of the pipeline:
//!
//! * [`ir`] — extract function definitions from `.ll` module text and rewrite
//!   them into a canonical, identifier-neutral form.
//! * [`corpus`] — build the unlabeled embedding corpus and the labeled
//!   classifier dataset, with reproducible seeded splits persisted as
//!   manifests.
//! * [`bpe`] — byte-level BPE tokenizer trained on canonical IR text.
//! * [`gpt`] — a causal transformer language model trained from scratch on
//!   the embedding corpus; its hidden states are the per-token embeddings
//!   consumed by the classifier.
//! * [`word2vec`] — CBOW / Skip-Gram baseline embedders.
//! * [`lstm`] — LSTM sequence classifiers over per-token embeddings, with
//!   frozen or unfrozen embedding model.
//! * [`eval`] — classification metrics, the NA (no-improvement) rule, and
//!   comparison reports.
//! * [`synth`] — a desk-scale synthetic IR corpus generator with planted
//!   overflow motifs and a rule-based labeling oracle.
//! * [`pipeline`] — stage orchestration, configuration, and provenance.
//!
//! All numeric code is `f64` on the CPU and deterministic for a fixed seed:
//! parallel code paths (enabled by the `parallel` feature) partition work so
//! that every floating-point reduction happens in a fixed order.

pub mod bpe;
pub mod container;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod gpt;
pub mod hash;
pub mod ir;
pub mod lstm;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod word2vec;
