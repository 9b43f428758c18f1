//! Corpus construction: labeling, length filtering, seeded splits, and
//! persisted manifests.
//!
//! Two datasets come out of the same normalized function pool: an unlabeled
//! embedding corpus (everything except the excluded CWE category) and a
//! labeled classifier dataset (the excluded category only, labeled by the
//! test-suite naming convention). Both are described by a [`CorpusManifest`]
//! that pins the split so every downstream training run sees identical data.

use crate::ir::NormalizedFunction;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Vulnerable,
    Clean,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Vulnerable => "vulnerable",
            Label::Clean => "clean",
            Label::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusPurpose {
    Embedder,
    Classifier,
}

/// A normalized function plus its classifier label and measured token length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledFunction {
    pub function: NormalizedFunction,
    pub label: Label,
    pub cwe: Option<String>,
    /// Token count under the shared tokenizer; filled by the tokenizer stage.
    pub token_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMember {
    pub content_hash: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64) -> Result<Self, CorpusError> {
        if !(train > 0.0 && validation >= 0.0 && (train + validation - 1.0).abs() < 1e-9) {
            return Err(CorpusError::BadFractions { train, validation });
        }
        Ok(Self { train, validation })
    }
}

/// Versioned description of one dataset: members, split, and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub purpose: CorpusPurpose,
    pub members: Vec<ManifestMember>,
    pub split_seed: u64,
    pub split_fractions: SplitFractions,
    /// split -> label -> member count; always recomputable from `members`.
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl CorpusManifest {
    fn build(
        purpose: CorpusPurpose,
        members: Vec<ManifestMember>,
        split_seed: u64,
        split_fractions: SplitFractions,
    ) -> Self {
        let counts = recount(&members);
        Self { purpose, members, split_seed, split_fractions, counts }
    }

    pub fn hashes_in_split(&self, split: Split) -> Vec<&str> {
        self.members
            .iter()
            .filter(|m| m.split == split)
            .map(|m| m.content_hash.as_str())
            .collect()
    }

    pub fn members_in_split(&self, split: Split) -> Vec<&ManifestMember> {
        self.members.iter().filter(|m| m.split == split).collect()
    }

    /// Fraction of the given split taken by its most frequent label.
    pub fn majority_fraction(&self, split: Split) -> f64 {
        let members = self.members_in_split(split);
        if members.is_empty() {
            return 0.0;
        }
        let mut by_label: BTreeMap<Label, usize> = BTreeMap::new();
        for m in &members {
            *by_label.entry(m.label).or_default() += 1;
        }
        let max = by_label.values().copied().max().unwrap_or(0);
        max as f64 / members.len() as f64
    }

    /// Checks split exhaustiveness, hash uniqueness, and count consistency.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.members.len());
        for m in &self.members {
            if !seen.insert(m.content_hash.as_str()) {
                return Err(CorpusError::DuplicateMember(m.content_hash.clone()));
            }
        }
        if self.counts != recount(&self.members) {
            return Err(CorpusError::InconsistentCounts);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.as_str().cmp(other.as_str())
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn recount(members: &[ManifestMember]) -> BTreeMap<String, BTreeMap<String, u64>> {
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for m in members {
        let split = match m.split {
            Split::Train => "train",
            Split::Validation => "validation",
        };
        *counts
            .entry(split.to_string())
            .or_default()
            .entry(m.label.as_str().to_string())
            .or_default() += 1;
    }
    counts
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no members remain after filtering")]
    EmptyCorpus,
    #[error("classifier dataset is single-class ({0}); training would be degenerate")]
    SingleClassDataset(String),
    #[error("split fractions ({train}, {validation}) must be positive and sum to 1")]
    BadFractions { train: f64, validation: f64 },
    #[error("duplicate content hash {0} in manifest")]
    DuplicateMember(String),
    #[error("manifest counts do not match members")]
    InconsistentCounts,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Labels a function name by the test-suite naming convention: a name
/// segment starting with `bad` marks a vulnerable function and one starting
/// with `good` (e.g. `goodG2B`) marks a clean one. Anything else is
/// unlabeled.
pub fn label_from_name(original_name: &str) -> Label {
    let mut saw_good = false;
    for segment in original_name.split('_') {
        let lower = segment.to_ascii_lowercase();
        if lower.starts_with("bad") {
            return Label::Vulnerable;
        }
        if lower.starts_with("good") {
            saw_good = true;
        }
    }
    if saw_good {
        Label::Clean
    } else {
        Label::Unlabeled
    }
}

/// Extracts a `CWE-<n>` tag from a function name or its source path
/// (e.g. `CWE121_...` or `.../CWE121/...`), normalized to `CWE-<n>`.
pub fn cwe_tag(original_name: &str, source_path: &str) -> Option<String> {
    for haystack in [original_name, source_path] {
        if let Some(tag) = find_cwe(haystack) {
            return Some(tag);
        }
    }
    None
}

fn find_cwe(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i + 3 <= bytes.len() {
        if text[i..].starts_with("CWE") || text[i..].starts_with("cwe") {
            let mut j = i + 3;
            if j < bytes.len() && bytes[j] == b'-' {
                j += 1;
            }
            let start = j;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > start {
                return Some(format!("CWE-{}", &text[start..j]));
            }
        }
        i += 1;
    }
    None
}

fn cwe_matches(tag: &Option<String>, excluded: &str) -> bool {
    let Some(tag) = tag else { return false };
    let norm = |s: &str| s.to_ascii_uppercase().replace('-', "");
    norm(tag) == norm(excluded)
}

/// Deterministic seeded split assignment. Members are keyed by sorted
/// content-hash order before shuffling, so the assignment is independent of
/// input enumeration order. Train gets `floor(n * train_fraction)`; the
/// remainder goes to validation.
pub fn split_assign(
    hashes: &[String],
    fractions: SplitFractions,
    seed: u64,
) -> BTreeMap<String, Split> {
    let mut order: Vec<&String> = hashes.iter().collect();
    order.sort();
    order.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_n = (order.len() as f64 * fractions.train).floor() as usize;
    order
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let split = if i < train_n { Split::Train } else { Split::Validation };
            (h.clone(), split)
        })
        .collect()
}

/// Builds the unlabeled embedding-corpus manifest: every deduped function
/// except those tagged with the excluded CWE, split by seeded shuffle.
pub fn build_embedder_corpus(
    functions: &[NormalizedFunction],
    excluded_cwe: &str,
    fractions: SplitFractions,
    seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    let mut hashes = Vec::new();
    let mut seen = HashSet::new();
    for f in functions {
        let tag = cwe_tag(&f.origin.original_name, &f.origin.source_path);
        if cwe_matches(&tag, excluded_cwe) {
            continue;
        }
        if seen.insert(f.content_hash.clone()) {
            hashes.push(f.content_hash.clone());
        }
    }
    if hashes.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let assignment = split_assign(&hashes, fractions, seed);
    let members = hashes
        .into_iter()
        .map(|h| {
            let split = assignment[&h];
            ManifestMember { content_hash: h, label: Label::Unlabeled, split }
        })
        .collect();
    Ok(CorpusManifest::build(CorpusPurpose::Embedder, members, seed, fractions))
}

/// Builds the labeled classifier-dataset manifest: unlabeled members and
/// members longer than `max_tokens` are dropped, duplicates collapse by
/// content hash, and the remainder is split by seeded shuffle
/// (optionally stratified per label).
pub fn build_classifier_dataset(
    functions: &[LabeledFunction],
    max_tokens: usize,
    fractions: SplitFractions,
    seed: u64,
    stratify: bool,
) -> Result<CorpusManifest, CorpusError> {
    let mut kept: Vec<(&str, Label)> = Vec::new();
    let mut seen = HashSet::new();
    for f in functions {
        if f.label == Label::Unlabeled {
            continue;
        }
        match f.token_length {
            Some(len) if len > max_tokens => continue,
            _ => {}
        }
        if seen.insert(f.function.content_hash.as_str()) {
            kept.push((f.function.content_hash.as_str(), f.label));
        }
    }
    if kept.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let labels: HashSet<Label> = kept.iter().map(|(_, l)| *l).collect();
    if labels.len() < 2 {
        let only = kept[0].1.as_str().to_string();
        return Err(CorpusError::SingleClassDataset(only));
    }

    let assignment = if stratify {
        let mut merged = BTreeMap::new();
        for class in [Label::Clean, Label::Vulnerable] {
            let hashes: Vec<String> = kept
                .iter()
                .filter(|(_, l)| *l == class)
                .map(|(h, _)| h.to_string())
                .collect();
            merged.extend(split_assign(&hashes, fractions, seed));
        }
        merged
    } else {
        let hashes: Vec<String> = kept.iter().map(|(h, _)| h.to_string()).collect();
        split_assign(&hashes, fractions, seed)
    };

    let members = kept
        .into_iter()
        .map(|(h, label)| ManifestMember {
            content_hash: h.to_string(),
            label,
            split: assignment[h],
        })
        .collect();
    Ok(CorpusManifest::build(CorpusPurpose::Classifier, members, seed, fractions))
}

/// One record of the canonical-function store (`fn.jsonl`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub hash: String,
    pub name: String,
    pub text: String,
    pub source: String,
    pub ordinal: usize,
}

impl FunctionRecord {
    pub fn from_normalized(f: &NormalizedFunction, ordinal: usize) -> Self {
        Self {
            hash: f.content_hash.clone(),
            name: f.origin.original_name.clone(),
            text: f.canonical_text.clone(),
            source: f.origin.source_path.clone(),
            ordinal,
        }
    }
}

/// Writes one canonical function per line.
pub fn write_function_records(path: &Path, records: &[FunctionRecord]) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_function_records(path: &Path) -> Result<Vec<FunctionRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::FunctionOrigin;

    fn nf(name: &str, path: &str, text: &str) -> NormalizedFunction {
        NormalizedFunction {
            canonical_text: text.to_string(),
            rename_map: vec![],
            content_hash: crate::hash::sha256_hex(text.as_bytes()),
            origin: FunctionOrigin {
                original_name: name.to_string(),
                source_path: path.to_string(),
                source_index: 0,
            },
        }
    }

    #[test]
    fn label_convention_examples() {
        assert_eq!(
            label_from_name("CWE121_Stack_Based_Buffer_Overflow__char_type_overrun_memcpy_01_bad"),
            Label::Vulnerable
        );
        assert_eq!(
            label_from_name("CWE121_Stack_Based_Buffer_Overflow__01_goodG2B"),
            Label::Clean
        );
        assert_eq!(label_from_name("main"), Label::Unlabeled);
        assert_eq!(label_from_name("CWE121_x_badSink"), Label::Vulnerable);
        assert_eq!(label_from_name("CWE121_x_good1"), Label::Clean);
    }

    #[test]
    fn cwe_tag_from_name_and_path() {
        assert_eq!(cwe_tag("CWE121_foo_bad", "x.ll"), Some("CWE-121".into()));
        assert_eq!(cwe_tag("main", "juliet/CWE-415/a.ll"), Some("CWE-415".into()));
        assert_eq!(cwe_tag("main", "plain/a.ll"), None);
    }

    #[test]
    fn embedder_corpus_excludes_tagged_functions_and_splits_90_10() {
        let mut fns = Vec::new();
        for i in 0..90 {
            fns.push(nf("plain", "src/a.ll", &format!("define {i}")));
        }
        for i in 0..10 {
            fns.push(nf("CWE121_case_bad", "src/b.ll", &format!("tagged {i}")));
        }
        let fractions = SplitFractions::new(0.9, 0.1).unwrap();
        let m = build_embedder_corpus(&fns, "CWE-121", fractions, 7).unwrap();
        assert_eq!(m.members.len(), 90);
        assert_eq!(m.hashes_in_split(Split::Train).len(), 81);
        assert_eq!(m.hashes_in_split(Split::Validation).len(), 9);
        assert!(m.members.iter().all(|mm| mm.label == Label::Unlabeled));
        m.validate().unwrap();
    }

    #[test]
    fn absent_exclusion_tag_keeps_everything() {
        let fns: Vec<_> = (0..20)
            .map(|i| nf("plain", "src/a.ll", &format!("fn {i}")))
            .collect();
        let fractions = SplitFractions::new(0.9, 0.1).unwrap();
        let m = build_embedder_corpus(&fns, "CWE-9999", fractions, 7).unwrap();
        assert_eq!(m.members.len(), 20);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let fns = vec![nf("CWE121_bad", "a.ll", "text")];
        let fractions = SplitFractions::new(0.9, 0.1).unwrap();
        assert!(matches!(
            build_embedder_corpus(&fns, "CWE-121", fractions, 7),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    fn lf(text: &str, label: Label, len: usize) -> LabeledFunction {
        LabeledFunction {
            function: nf("f", "a.ll", text),
            label,
            cwe: Some("CWE-121".into()),
            token_length: Some(len),
        }
    }

    #[test]
    fn classifier_dataset_filters_long_and_unlabeled() {
        let mut fns: Vec<LabeledFunction> = (0..9)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Clean } else { Label::Vulnerable };
                lf(&format!("fn {i}"), label, 100)
            })
            .collect();
        fns.push(lf("long one", Label::Clean, 3000));
        let fractions = SplitFractions::new(0.8, 0.2).unwrap();
        let m = build_classifier_dataset(&fns, 2048, fractions, 7, false).unwrap();
        assert_eq!(m.members.len(), 9);
    }

    #[test]
    fn floor_rounding_3802_members() {
        let fns: Vec<LabeledFunction> = (0..3802)
            .map(|i| {
                let label = if i < 2386 { Label::Clean } else { Label::Vulnerable };
                lf(&format!("fn {i}"), label, 10)
            })
            .collect();
        let fractions = SplitFractions::new(0.8, 0.2).unwrap();
        let m = build_classifier_dataset(&fns, 2048, fractions, 7, false).unwrap();
        assert_eq!(m.hashes_in_split(Split::Train).len(), 3041);
        assert_eq!(m.hashes_in_split(Split::Validation).len(), 761);
    }

    #[test]
    fn single_class_dataset_is_an_error() {
        let fns: Vec<LabeledFunction> =
            (0..5).map(|i| lf(&format!("fn {i}"), Label::Clean, 10)).collect();
        let fractions = SplitFractions::new(0.8, 0.2).unwrap();
        assert!(matches!(
            build_classifier_dataset(&fns, 2048, fractions, 7, false),
            Err(CorpusError::SingleClassDataset(_))
        ));
    }

    #[test]
    fn split_assign_is_deterministic_and_floor_ruled() {
        let hashes: Vec<String> = (0..10).map(|i| format!("h{i:02}")).collect();
        let fractions = SplitFractions::new(0.8, 0.2).unwrap();
        let a = split_assign(&hashes, fractions, 42);
        let b = split_assign(&hashes, fractions, 42);
        assert_eq!(a, b);

        let five: Vec<String> = (0..5).map(|i| format!("h{i}")).collect();
        let fractions = SplitFractions::new(0.9, 0.1).unwrap();
        let m = split_assign(&five, fractions, 1);
        let train = m.values().filter(|s| **s == Split::Train).count();
        assert_eq!(train, 4);
        assert_eq!(m.len() - train, 1);
    }

    #[test]
    fn split_assignment_ignores_input_order() {
        let hashes: Vec<String> = (0..50).map(|i| format!("hash{i:03}")).collect();
        let mut reversed = hashes.clone();
        reversed.reverse();
        let fractions = SplitFractions::new(0.8, 0.2).unwrap();
        assert_eq!(split_assign(&hashes, fractions, 9), split_assign(&reversed, fractions, 9));
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let fns: Vec<_> = (0..20).map(|i| nf("f", "a.ll", &format!("fn {i}"))).collect();
        let fractions = SplitFractions::new(0.9, 0.1).unwrap();
        let m = build_embedder_corpus(&fns, "CWE-121", fractions, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = CorpusManifest::load(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn filter_monotonicity() {
        let fns: Vec<LabeledFunction> = (0..30)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Clean } else { Label::Vulnerable };
                lf(&format!("fn {i}"), label, 10 * (i + 1))
            })
            .collect();
        let fractions = SplitFractions::new(0.8, 0.2).unwrap();
        let mut last = usize::MAX;
        for max_tokens in [300, 200, 100, 50] {
            let m = build_classifier_dataset(&fns, max_tokens, fractions, 7, false).unwrap();
            assert!(m.members.len() <= last);
            last = m.members.len();
        }
    }

    #[test]
    fn function_record_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fn.jsonl");
        let records: Vec<FunctionRecord> = (0..5)
            .map(|i| FunctionRecord {
                hash: format!("h{i}"),
                name: format!("n{i}"),
                text: format!("define void @func_{i}() {{\nret void\n}}"),
                source: "a.ll".into(),
                ordinal: i,
            })
            .collect();
        write_function_records(&path, &records).unwrap();
        let loaded = read_function_records(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        assert_eq!(loaded[3].hash, "h3");
        assert_eq!(loaded[3].text, records[3].text);
    }

    #[test]
    fn majority_fraction_matches_recount() {
        let members = vec![
            ManifestMember { content_hash: "a".into(), label: Label::Clean, split: Split::Validation },
            ManifestMember { content_hash: "b".into(), label: Label::Clean, split: Split::Validation },
            ManifestMember { content_hash: "c".into(), label: Label::Vulnerable, split: Split::Validation },
        ];
        let m = CorpusManifest::build(
            CorpusPurpose::Classifier,
            members,
            0,
            SplitFractions::new(0.8, 0.2).unwrap(),
        );
        assert!((m.majority_fraction(Split::Validation) - 2.0 / 3.0).abs() < 1e-15);
    }
}
