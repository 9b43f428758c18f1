//! Byte-level BPE tokenizer trained from scratch on canonical IR text.
//!
//! The base alphabet is all 256 byte values plus four special tokens, so
//! encoding is lossless on arbitrary input. Merges are learned greedily by
//! highest pair frequency, ties broken by the lexicographically smaller pair,
//! which makes training fully deterministic. Tokens serialize through the
//! usual printable byte-to-unicode table so `vocab.json` and `merges.txt`
//! stay valid UTF-8 and byte-stable across runs.

use crate::exec;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
const SPECIAL_NAMES: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Number of reserved ids before the 256 byte tokens.
pub const NUM_SPECIALS: usize = 4;
/// Smallest legal vocabulary: specials plus the byte alphabet.
pub const BASE_VOCAB_SIZE: usize = NUM_SPECIALS + 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenEntry {
    Special(&'static str),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MergeRule {
    left: u32,
    right: u32,
    result: u32,
}

/// A trained byte-level BPE model: dense vocabulary, ordered merges, and
/// special-token ids. Immutable once trained; safe to share across threads.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    entries: Vec<TokenEntry>,
    merges: Vec<MergeRule>,
    pair_rank: HashMap<(u32, u32), (u32, u32)>,
    pub specials: SpecialIds,
    pub max_len: usize,
}

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("vocab size {0} is too small; need more than {BASE_VOCAB_SIZE}")]
    VocabTooSmall(usize),
    #[error("corpus too small: no byte pair reaches the minimum frequency")]
    CorpusTooSmall,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("malformed tokenizer file: {0}")]
    ParseModel(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TokenizerModel {
    fn base(max_len: usize) -> Self {
        let mut entries = Vec::with_capacity(BASE_VOCAB_SIZE);
        for name in SPECIAL_NAMES {
            entries.push(TokenEntry::Special(name));
        }
        for b in 0..=255u8 {
            entries.push(TokenEntry::Bytes(vec![b]));
        }
        Self {
            entries,
            merges: Vec::new(),
            pair_rank: HashMap::new(),
            specials: SpecialIds { pad: 0, bos: 1, eos: 2, unk: 3 },
            max_len,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.entries.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    fn byte_id(b: u8) -> u32 {
        NUM_SPECIALS as u32 + b as u32
    }

    fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        match self.entries.get(id as usize)? {
            TokenEntry::Special(_) => None,
            TokenEntry::Bytes(b) => Some(b),
        }
    }

    fn display(&self, id: u32) -> String {
        match &self.entries[id as usize] {
            TokenEntry::Special(name) => name.to_string(),
            TokenEntry::Bytes(bytes) => bytes.iter().map(|&b| byte_to_char(b)).collect(),
        }
    }

    /// Encodes arbitrary bytes; lossless, no specials added.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = text.iter().map(|&b| Self::byte_id(b)).collect();
        loop {
            let mut best: Option<(u32, (u32, u32), u32)> = None;
            for pair in ids.windows(2) {
                if let Some(&(rank, result)) = self.pair_rank.get(&(pair[0], pair[1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, (pair[0], pair[1]), result));
                    }
                }
            }
            let Some((_, pair, result)) = best else { break };
            apply_merge(&mut ids, pair.0, pair.1, result);
        }
        ids
    }

    /// Encodes text and frames it for language modeling: BOS ... EOS,
    /// truncated to `max_positions` when given.
    pub fn encode_for_lm(&self, text: &[u8], max_positions: Option<usize>) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() / 2 + 2);
        ids.push(self.specials.bos);
        ids.extend(self.encode(text));
        ids.push(self.specials.eos);
        if let Some(max) = max_positions {
            ids.truncate(max);
        }
        ids
    }

    /// Token count of a text under this model (content tokens only).
    pub fn token_length(&self, text: &str) -> usize {
        self.encode(text.as_bytes()).len()
    }

    /// Decodes ids back to bytes. Special tokens decode to nothing;
    /// out-of-range ids are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            if id as usize >= self.entries.len() {
                return Err(BpeError::UnknownId(id));
            }
            if let Some(bytes) = self.token_bytes(id) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    /// Serializes as `vocab.json` (token -> id, in id order) and
    /// `merges.txt` (one merge per line, rank order). Both files are
    /// byte-stable for equal models.
    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<(), BpeError> {
        let mut vocab = String::from("{\n");
        for (id, _) in self.entries.iter().enumerate() {
            let key = serde_json::to_string(&self.display(id as u32))?;
            vocab.push_str(&format!("  {key}: {id}"));
            if id + 1 != self.entries.len() {
                vocab.push(',');
            }
            vocab.push('\n');
        }
        vocab.push_str("}\n");
        std::fs::write(vocab_path, vocab)?;

        let mut merges = String::new();
        for rule in &self.merges {
            merges.push_str(&self.display(rule.left));
            merges.push(' ');
            merges.push_str(&self.display(rule.right));
            merges.push('\n');
        }
        std::fs::write(merges_path, merges)?;
        Ok(())
    }

    pub fn load(vocab_path: &Path, merges_path: &Path, max_len: usize) -> Result<Self, BpeError> {
        let vocab_text = std::fs::read_to_string(vocab_path)?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        let mut model = Self::base(max_len);
        let mut by_display: HashMap<String, u32> = HashMap::with_capacity(vocab.len());
        let mut entries: Vec<Option<TokenEntry>> = vec![None; vocab.len()];
        for (display, id) in &vocab {
            let idx = *id as usize;
            if idx >= vocab.len() {
                return Err(BpeError::ParseModel(format!("id {id} not dense")));
            }
            let entry = if let Some(pos) = SPECIAL_NAMES.iter().position(|n| n == display) {
                TokenEntry::Special(SPECIAL_NAMES[pos])
            } else {
                TokenEntry::Bytes(display_to_bytes(display)?)
            };
            if entries[idx].replace(entry).is_some() {
                return Err(BpeError::ParseModel(format!("duplicate id {id}")));
            }
            by_display.insert(display.clone(), *id);
        }
        model.entries = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| BpeError::ParseModel(format!("missing id {i}"))))
            .collect::<Result<_, _>>()?;
        model.specials = SpecialIds {
            pad: lookup_special(&by_display, PAD_TOKEN)?,
            bos: lookup_special(&by_display, BOS_TOKEN)?,
            eos: lookup_special(&by_display, EOS_TOKEN)?,
            unk: lookup_special(&by_display, UNK_TOKEN)?,
        };

        let merges_text = std::fs::read_to_string(merges_path)?;
        for (lineno, line) in merges_text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| BpeError::ParseModel(format!("merge line {}", lineno + 1)))?;
            let left = *by_display.get(l).ok_or_else(|| {
                BpeError::ParseModel(format!("unknown merge operand `{l}`"))
            })?;
            let right = *by_display.get(r).ok_or_else(|| {
                BpeError::ParseModel(format!("unknown merge operand `{r}`"))
            })?;
            let result = *by_display.get(&format!("{l}{r}")).ok_or_else(|| {
                BpeError::ParseModel(format!("merge result `{l}{r}` missing from vocab"))
            })?;
            let rank = model.merges.len() as u32;
            model.merges.push(MergeRule { left, right, result });
            model.pair_rank.insert((left, right), (rank, result));
        }
        Ok(model)
    }
}

fn lookup_special(by_display: &HashMap<String, u32>, name: &str) -> Result<u32, BpeError> {
    by_display
        .get(name)
        .copied()
        .ok_or_else(|| BpeError::ParseModel(format!("special token {name} missing")))
}

/// Trains a byte-level BPE model. The byte alphabet and specials are seeded
/// first; merges are chosen by highest pair frequency until `vocab_size` is
/// reached or no pair occurs at least `min_frequency` times. Frequency ties
/// go to the lexicographically smaller (left bytes, right bytes) pair.
pub fn train_bpe<I, S>(
    corpus: I,
    vocab_size: usize,
    min_frequency: u64,
    max_len: usize,
) -> Result<TokenizerModel, BpeError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    if vocab_size < BASE_VOCAB_SIZE {
        return Err(BpeError::VocabTooSmall(vocab_size));
    }
    let mut model = TokenizerModel::base(max_len);
    let mut seqs: Vec<Vec<u32>> = corpus
        .into_iter()
        .map(|s| s.as_ref().iter().map(|&b| TokenizerModel::byte_id(b)).collect())
        .collect();

    let budget = vocab_size - BASE_VOCAB_SIZE;
    while model.entries.len() < vocab_size {
        let counts = count_pairs(&seqs);
        let best = pick_best_pair(&counts, min_frequency, &model);
        let Some((left, right)) = best else {
            if model.merges.is_empty() && budget > 0 {
                return Err(BpeError::CorpusTooSmall);
            }
            break;
        };
        let mut merged = Vec::new();
        merged.extend_from_slice(model.token_bytes(left).expect("merge operand is bytes"));
        merged.extend_from_slice(model.token_bytes(right).expect("merge operand is bytes"));
        let result = model.entries.len() as u32;
        model.entries.push(TokenEntry::Bytes(merged));
        let rank = model.merges.len() as u32;
        model.merges.push(MergeRule { left, right, result });
        model.pair_rank.insert((left, right), (rank, result));

        let replaced: Vec<Vec<u32>> = exec::map_ordered(&seqs, |seq| {
            let mut s = seq.clone();
            apply_merge(&mut s, left, right, result);
            s
        });
        seqs = replaced;
    }
    Ok(model)
}

/// Counts adjacent pairs over all sequences. Counting is additive, so the
/// parallel per-chunk maps merge to the same totals in any order.
fn count_pairs(seqs: &[Vec<u32>]) -> HashMap<(u32, u32), u64> {
    let chunk = seqs.len().div_ceil(64).max(1);
    let chunks: Vec<&[Vec<u32>]> = seqs.chunks(chunk).collect();
    let partials: Vec<HashMap<(u32, u32), u64>> = exec::map_ordered(&chunks, |chunk| {
        let mut counts = HashMap::new();
        for seq in chunk.iter() {
            for pair in seq.windows(2) {
                *counts.entry((pair[0], pair[1])).or_insert(0u64) += 1;
            }
        }
        counts
    });
    let mut total = HashMap::new();
    for partial in partials {
        for (pair, n) in partial {
            *total.entry(pair).or_insert(0) += n;
        }
    }
    total
}

fn pick_best_pair(
    counts: &HashMap<(u32, u32), u64>,
    min_frequency: u64,
    model: &TokenizerModel,
) -> Option<(u32, u32)> {
    let mut best: Option<((u32, u32), u64)> = None;
    for (&pair, &count) in counts {
        if count < min_frequency {
            continue;
        }
        // Specials never appear in sequences, but keep the guard local.
        let (Some(lb), Some(rb)) = (model.token_bytes(pair.0), model.token_bytes(pair.1)) else {
            continue;
        };
        let candidate_key = (lb.to_vec(), rb.to_vec());
        let better = match best {
            None => true,
            Some((bpair, bcount)) => {
                if count != bcount {
                    count > bcount
                } else {
                    let bkey = (
                        model.token_bytes(bpair.0).unwrap().to_vec(),
                        model.token_bytes(bpair.1).unwrap().to_vec(),
                    );
                    candidate_key < bkey
                }
            }
        };
        if better {
            // A merged token must not collide with a special's display name.
            let mut display = String::new();
            for &b in lb.iter().chain(rb.iter()) {
                display.push(byte_to_char(b));
            }
            if SPECIAL_NAMES.contains(&display.as_str()) {
                continue;
            }
            best = Some((pair, count));
        }
    }
    best.map(|(pair, _)| pair)
}

/// Replaces every non-overlapping `left right` occurrence, left to right.
fn apply_merge(ids: &mut Vec<u32>, left: u32, right: u32, result: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

/// Printable representation of each byte value, mirroring the usual
/// byte-level BPE table: printable latin bytes map to themselves, the rest
/// shift into a contiguous range above U+0100.
fn byte_to_char(b: u8) -> char {
    let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    if printable {
        char::from_u32(b as u32).unwrap()
    } else {
        let mut offset = 0u32;
        for candidate in 0..b {
            let p = (b'!'..=b'~').contains(&candidate)
                || (0xA1..=0xAC).contains(&candidate)
                || (0xAE..=0xFF).contains(&candidate);
            if !p {
                offset += 1;
            }
        }
        char::from_u32(256 + offset).unwrap()
    }
}

fn char_to_byte(c: char) -> Option<u8> {
    let code = c as u32;
    if code < 256 {
        let b = code as u8;
        let printable =
            (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        return printable.then_some(b);
    }
    if (256..512).contains(&code) {
        let target_offset = code - 256;
        let mut offset = 0u32;
        for b in 0..=255u8 {
            let printable = (b'!'..=b'~').contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b);
            if !printable {
                if offset == target_offset {
                    return Some(b);
                }
                offset += 1;
            }
        }
    }
    None
}

fn display_to_bytes(display: &str) -> Result<Vec<u8>, BpeError> {
    display
        .chars()
        .map(|c| {
            char_to_byte(c)
                .ok_or_else(|| BpeError::ParseModel(format!("bad token char {c:?} in vocab")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_char_table_is_a_bijection() {
        for b in 0..=255u8 {
            let c = byte_to_char(b);
            assert_eq!(char_to_byte(c), Some(b), "byte {b:#x} via {c:?}");
        }
    }

    #[test]
    fn first_merge_on_repeated_prefix_is_aa() {
        // Hand-run BPE on ["aaab", "aaab"]: pair (a,a) occurs 4 times
        // (overlapping scan), (a,b) twice, so (a,a) merges first.
        let model = train_bpe(["aaab", "aaab"], BASE_VOCAB_SIZE + 1, 2, 2048).unwrap();
        assert_eq!(model.num_merges(), 1);
        let rule = model.merges[0];
        assert_eq!(model.token_bytes(rule.left).unwrap(), b"a");
        assert_eq!(model.token_bytes(rule.right).unwrap(), b"a");
        assert_eq!(model.token_bytes(rule.result).unwrap(), b"aa");
    }

    #[test]
    fn zero_merge_budget_gives_pure_byte_fallback() {
        let model = train_bpe(["aaab", "aaab"], BASE_VOCAB_SIZE, 2, 2048).unwrap();
        assert_eq!(model.num_merges(), 0);
        assert_eq!(model.vocab_len(), BASE_VOCAB_SIZE);
        let ids = model.encode(b"ab");
        assert_eq!(ids, vec![TokenizerModel::byte_id(b'a'), TokenizerModel::byte_id(b'b')]);
    }

    #[test]
    fn vocab_never_exceeds_budget() {
        for budget in [BASE_VOCAB_SIZE, BASE_VOCAB_SIZE + 3, BASE_VOCAB_SIZE + 50] {
            let model =
                train_bpe(["define i32 @func_1", "define i32 @func_1"], budget, 2, 2048).unwrap();
            assert!(model.vocab_len() <= budget);
        }
    }

    #[test]
    fn too_small_vocab_is_an_error() {
        assert!(matches!(
            train_bpe(["abc"], 100, 2, 2048),
            Err(BpeError::VocabTooSmall(100))
        ));
    }

    #[test]
    fn corpus_with_no_repeated_pair_errors_when_budget_requested() {
        assert!(matches!(
            train_bpe(["ab"], BASE_VOCAB_SIZE + 10, 2, 2048),
            Err(BpeError::CorpusTooSmall)
        ));
    }

    #[test]
    fn empty_string_roundtrip() {
        let model = train_bpe(["aaab"], BASE_VOCAB_SIZE + 2, 2, 2048).unwrap();
        let ids = model.encode(b"");
        assert!(ids.is_empty());
        assert!(model.decode(&ids).unwrap().is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["define i32 @func_1(i32 %v1) {", "ret i32 %v1", "}"];
        let a = train_bpe(corpus, BASE_VOCAB_SIZE + 20, 2, 2048).unwrap();
        let b = train_bpe(corpus, BASE_VOCAB_SIZE + 20, 2, 2048).unwrap();
        assert_eq!(a.merges, b.merges);
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn larger_budget_extends_merges_and_never_lengthens_encodings() {
        let corpus: Vec<String> = (0..20)
            .map(|i| format!("define i32 @func_{i}(i32 %v1) {{ ret i32 %v1 }}"))
            .collect();
        let small = train_bpe(corpus.iter(), BASE_VOCAB_SIZE + 8, 2, 2048).unwrap();
        let large = train_bpe(corpus.iter(), BASE_VOCAB_SIZE + 24, 2, 2048).unwrap();
        assert_eq!(&large.merges[..small.merges.len()], &small.merges[..]);
        for text in &corpus {
            assert!(large.encode(text.as_bytes()).len() <= small.encode(text.as_bytes()).len());
        }
    }

    #[test]
    fn unknown_id_on_decode() {
        let model = train_bpe(["aaab"], BASE_VOCAB_SIZE + 1, 2, 2048).unwrap();
        let bad = model.vocab_len() as u32 + 5;
        assert!(matches!(model.decode(&[bad]), Err(BpeError::UnknownId(_))));
    }

    #[test]
    fn specials_are_distinct_and_skipped_in_decode() {
        let model = train_bpe(["aaab"], BASE_VOCAB_SIZE + 1, 2, 2048).unwrap();
        let s = model.specials;
        let ids = [s.pad, s.bos, s.eos, s.unk];
        let mut dedup = ids.to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
        assert!(model.decode(&ids).unwrap().is_empty());
    }

    #[test]
    fn lm_framing_adds_bos_eos_and_truncates() {
        let model = train_bpe(["aaab"], BASE_VOCAB_SIZE + 1, 2, 2048).unwrap();
        let ids = model.encode_for_lm(b"aaab", None);
        assert_eq!(ids[0], model.specials.bos);
        assert_eq!(*ids.last().unwrap(), model.specials.eos);
        let truncated = model.encode_for_lm(b"aaabaaabaaab", Some(4));
        assert_eq!(truncated.len(), 4);
    }

    #[test]
    fn save_load_roundtrip_is_byte_stable() {
        let corpus: Vec<String> =
            (0..10).map(|i| format!("store i8 {i}, i8* %v1, align 1")).collect();
        let model = train_bpe(corpus.iter(), BASE_VOCAB_SIZE + 30, 2, 2048).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let vocab = dir.path().join("vocab.json");
        let merges = dir.path().join("merges.txt");
        model.save(&vocab, &merges).unwrap();
        let first_vocab = std::fs::read(&vocab).unwrap();
        let first_merges = std::fs::read(&merges).unwrap();

        let loaded = TokenizerModel::load(&vocab, &merges, 2048).unwrap();
        assert_eq!(loaded.specials, model.specials);
        let sample = b"store i8 3, i8* %v1, align 1";
        assert_eq!(loaded.encode(sample), model.encode(sample));

        loaded.save(&vocab, &merges).unwrap();
        assert_eq!(std::fs::read(&vocab).unwrap(), first_vocab);
        assert_eq!(std::fs::read(&merges).unwrap(), first_merges);
    }

    #[test]
    fn roundtrip_on_ir_like_text() {
        let corpus: Vec<String> = (0..8)
            .map(|i| format!("%v{i} = icmp ult i64 %v1, {i}\nbr i1 %v{i}, label %label_1, label %label_2"))
            .collect();
        let model = train_bpe(corpus.iter(), BASE_VOCAB_SIZE + 64, 2, 2048).unwrap();
        for text in &corpus {
            let ids = model.encode(text.as_bytes());
            assert_eq!(model.decode(&ids).unwrap(), text.as_bytes());
        }
    }
}
