//! Lifted LLVM IR handling: function extraction and canonical rewriting.
//!
//! Module text goes through three steps: [`extract_functions`] isolates every
//! `define` block, [`normalize`] rewrites one function into an
//! identifier-neutral canonical form, and [`dedupe`] drops textual duplicates
//! by content hash. All three are pure and safe to run per-file and
//! per-function in parallel.

mod extract;
mod normalize;

pub use extract::extract_functions;
pub use normalize::{dedupe, normalize, NormalizeOptions, DEFAULT_STDLIB_NAMES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One lifted `.ll` module as read from disk.
#[derive(Debug, Clone)]
pub struct LlvmModuleText {
    pub source_path: String,
    pub content: String,
}

impl LlvmModuleText {
    /// Wraps module text; rejects empty content.
    pub fn new(source_path: impl Into<String>, content: impl Into<String>) -> Result<Self, IrError> {
        let source_path = source_path.into();
        let content = content.into();
        if content.is_empty() {
            return Err(IrError::EmptyModuleText { source_path });
        }
        Ok(Self { source_path, content })
    }
}

/// One function definition cut out of a module, verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiftedFunction {
    /// The `@name` of the define, without the sigil.
    pub original_name: String,
    /// Text from the `define` keyword through the matching closing brace.
    pub raw_body: String,
    pub source_path: String,
    /// Position of the function within its module, 0-based.
    pub source_index: usize,
}

/// Provenance of a normalized function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionOrigin {
    pub original_name: String,
    pub source_path: String,
    pub source_index: usize,
}

/// A function rewritten into canonical, identifier-neutral form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedFunction {
    pub canonical_text: String,
    /// Identifier renames actually applied, in assignment order.
    pub rename_map: Vec<(String, String)>,
    /// SHA-256 of `canonical_text`, hex encoded.
    pub content_hash: String,
    pub origin: FunctionOrigin,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IrError {
    #[error("module {source_path} is empty")]
    EmptyModuleText { source_path: String },
    #[error("unbalanced braces in {source_path}: define at line {line} never closes")]
    UnbalancedBraces { source_path: String, line: usize },
    #[error("malformed identifier near `{context}`: `{sigil}` followed by no token")]
    MalformedIdentifier { sigil: char, context: String },
}
