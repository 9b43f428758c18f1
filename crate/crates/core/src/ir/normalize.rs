//! Canonical rewriting of extracted functions.

use super::extract::is_identifier_char;
use super::{FunctionOrigin, IrError, LiftedFunction, NormalizedFunction};
use crate::hash::sha256_hex;
use std::collections::{BTreeSet, HashMap};

/// Well-known external symbols preserved verbatim so that library-call
/// patterns survive normalization. Symbols starting with `llvm.` are always
/// preserved in addition to this list.
pub const DEFAULT_STDLIB_NAMES: &[&str] = &[
    "abort", "atoi", "calloc", "exit", "fclose", "fgets", "fopen", "fprintf", "fread", "free",
    "fscanf", "fwrite", "getenv", "gets", "malloc", "memcmp", "memcpy", "memmove", "memset",
    "printf", "putchar", "puts", "rand", "realloc", "scanf", "snprintf", "sprintf", "srand",
    "sscanf", "strcat", "strchr", "strcmp", "strcpy", "strdup", "strlen", "strncat", "strncmp",
    "strncpy", "strstr", "strtol", "wcscpy", "wcslen", "wmemcpy", "wmemset",
];

/// Configuration for [`normalize`].
#[derive(Debug, Clone)]
pub struct NormalizeOptions {
    /// Global names preserved verbatim (library calls carry signal).
    pub stdlib_allowlist: BTreeSet<String>,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self {
            stdlib_allowlist: DEFAULT_STDLIB_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl NormalizeOptions {
    fn is_preserved(&self, name: &str) -> bool {
        name.starts_with("llvm.") || self.stdlib_allowlist.contains(name)
    }
}

/// Rewrites one extracted function into canonical form:
///
/// * the function name becomes `func_<ordinal>`;
/// * local value identifiers become `%v<N>` and labels `label_<N>`,
///   numbered by first occurrence, counters starting at 1 per function;
/// * referenced globals become `@g<N>` unless allowlisted;
/// * comments, `!kind !N` metadata attachments, and `#N` attribute-group
///   references are removed;
/// * whitespace runs collapse to single spaces, one instruction per line.
pub fn normalize(
    f: &LiftedFunction,
    ordinal: usize,
    opts: &NormalizeOptions,
) -> Result<NormalizedFunction, IrError> {
    assert!(ordinal >= 1, "ordinal numbering starts at 1");

    // Strip comments, metadata attachments, and attribute refs per line.
    let cleaned: Vec<String> = f
        .raw_body
        .lines()
        .map(clean_line)
        .filter(|l| !l.trim().is_empty())
        .collect();

    // Labels are the names defined by `name:` lines; every other `%` sigil
    // is a value identifier.
    let mut label_names: BTreeSet<String> = BTreeSet::new();
    for line in &cleaned {
        if let Some(name) = label_definition(line) {
            label_names.insert(name);
        }
    }

    let mut renamer = Renamer::new(&f.original_name, ordinal, label_names, opts);
    let mut out_lines = Vec::with_capacity(cleaned.len());
    for line in &cleaned {
        if let Some(name) = label_definition(line) {
            out_lines.push(format!("{}:", renamer.label(&name)));
        } else {
            out_lines.push(renamer.rewrite_line(line)?);
        }
    }

    let canonical_text = out_lines.join("\n");
    let content_hash = sha256_hex(canonical_text.as_bytes());
    Ok(NormalizedFunction {
        canonical_text,
        rename_map: renamer.rename_map,
        content_hash,
        origin: FunctionOrigin {
            original_name: f.original_name.clone(),
            source_path: f.source_path.clone(),
            source_index: f.source_index,
        },
    })
}

/// Keeps the first function for each content hash, preserving input order.
pub fn dedupe(fs: Vec<NormalizedFunction>) -> Vec<NormalizedFunction> {
    let mut seen = std::collections::HashSet::with_capacity(fs.len());
    fs.into_iter()
        .filter(|f| seen.insert(f.content_hash.clone()))
        .collect()
}

/// Removes comments (string-aware), `!kind !N` attachments with a leading
/// comma, and `#N` attribute references from one line.
fn clean_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        match ch {
            '"' => {
                out.push(ch);
                i += 1;
                while i < chars.len() {
                    out.push(chars[i]);
                    if chars[i] == '"' {
                        i += 1;
                        break;
                    }
                    i += 1;
                }
            }
            ';' => break,
            '!' => {
                if let Some(next) = try_skip_metadata_attachment(&chars, i) {
                    trim_trailing_comma(&mut out);
                    i = next;
                } else {
                    out.push(ch);
                    i += 1;
                }
            }
            '#' => {
                if let Some(next) = try_skip_attr_ref(&chars, i) {
                    while out.ends_with(' ') {
                        out.pop();
                    }
                    i = next;
                } else {
                    out.push(ch);
                    i += 1;
                }
            }
            _ => {
                out.push(ch);
                i += 1;
            }
        }
    }
    out
}

/// Matches `!<ident> <ws> !<digits>` starting at `start` and returns the
/// index just past it.
fn try_skip_metadata_attachment(chars: &[char], start: usize) -> Option<usize> {
    let mut i = start + 1;
    let ident_start = i;
    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.' || chars[i] == '_')
    {
        i += 1;
    }
    if i == ident_start {
        return None;
    }
    let ws_start = i;
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    if i == ws_start || i >= chars.len() || chars[i] != '!' {
        return None;
    }
    i += 1;
    let num_start = i;
    while i < chars.len() && chars[i].is_ascii_digit() {
        i += 1;
    }
    if i == num_start {
        return None;
    }
    Some(i)
}

/// Matches `#<digits>` at a token boundary and returns the index past it.
fn try_skip_attr_ref(chars: &[char], start: usize) -> Option<usize> {
    if start > 0 && !chars[start - 1].is_whitespace() {
        return None;
    }
    let mut i = start + 1;
    let num_start = i;
    while i < chars.len() && chars[i].is_ascii_digit() {
        i += 1;
    }
    if i == num_start {
        return None;
    }
    if i < chars.len() && !chars[i].is_whitespace() && chars[i] != ',' && chars[i] != ')' {
        return None;
    }
    Some(i)
}

fn trim_trailing_comma(out: &mut String) {
    while out.ends_with(' ') {
        out.pop();
    }
    if out.ends_with(',') {
        out.pop();
    }
}

/// A cleaned line of the form `name:` (possibly quoted) defines a label.
fn label_definition(line: &str) -> Option<String> {
    let t = line.trim();
    let body = t.strip_suffix(':')?;
    if body.is_empty() {
        return None;
    }
    if let Some(q) = body.strip_prefix('"') {
        let name = q.strip_suffix('"')?;
        return (!name.is_empty()).then(|| name.to_string());
    }
    body.chars()
        .all(is_identifier_char)
        .then(|| body.to_string())
}

struct Renamer<'a> {
    function_name: String,
    ordinal: usize,
    labels: BTreeSet<String>,
    label_map: HashMap<String, String>,
    value_map: HashMap<String, String>,
    global_map: HashMap<String, String>,
    opts: &'a NormalizeOptions,
    rename_map: Vec<(String, String)>,
}

impl<'a> Renamer<'a> {
    fn new(
        function_name: &str,
        ordinal: usize,
        labels: BTreeSet<String>,
        opts: &'a NormalizeOptions,
    ) -> Self {
        Self {
            function_name: function_name.to_string(),
            ordinal,
            labels,
            label_map: HashMap::new(),
            value_map: HashMap::new(),
            global_map: HashMap::new(),
            opts,
            rename_map: Vec::new(),
        }
    }

    fn record(&mut self, original: &str, canonical: &str) {
        if original != canonical {
            self.rename_map
                .push((original.to_string(), canonical.to_string()));
        }
    }

    fn label(&mut self, name: &str) -> String {
        if let Some(c) = self.label_map.get(name) {
            return c.clone();
        }
        let canonical = format!("label_{}", self.label_map.len() + 1);
        self.label_map.insert(name.to_string(), canonical.clone());
        self.record(name, &canonical);
        canonical
    }

    fn value(&mut self, name: &str) -> String {
        if let Some(c) = self.value_map.get(name) {
            return c.clone();
        }
        let canonical = format!("v{}", self.value_map.len() + 1);
        self.value_map.insert(name.to_string(), canonical.clone());
        self.record(name, &canonical);
        canonical
    }

    fn global(&mut self, name: &str) -> String {
        if name == self.function_name {
            let canonical = format!("func_{}", self.ordinal);
            if !self.rename_map.iter().any(|(o, _)| o == name) {
                self.record(name, &canonical);
            }
            return canonical;
        }
        if self.opts.is_preserved(name) {
            return name.to_string();
        }
        if let Some(c) = self.global_map.get(name) {
            return c.clone();
        }
        let canonical = format!("g{}", self.global_map.len() + 1);
        self.global_map.insert(name.to_string(), canonical.clone());
        self.record(name, &canonical);
        canonical
    }

    /// Rewrites identifiers and collapses whitespace in one cleaned line.
    fn rewrite_line(&mut self, line: &str) -> Result<String, IrError> {
        let mut out = String::with_capacity(line.len());
        let chars: Vec<char> = line.trim().chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let ch = chars[i];
            match ch {
                '"' => {
                    out.push(ch);
                    i += 1;
                    while i < chars.len() {
                        out.push(chars[i]);
                        if chars[i] == '"' {
                            i += 1;
                            break;
                        }
                        i += 1;
                    }
                }
                c if c.is_whitespace() => {
                    if !out.ends_with(' ') && !out.is_empty() {
                        out.push(' ');
                    }
                    i += 1;
                }
                '%' | '@' => {
                    let (name, next) = read_identifier(&chars, i).ok_or_else(|| {
                        IrError::MalformedIdentifier {
                            sigil: ch,
                            context: line.trim().chars().take(60).collect(),
                        }
                    })?;
                    let renamed = if ch == '%' {
                        if self.labels.contains(&name) {
                            self.label(&name)
                        } else {
                            self.value(&name)
                        }
                    } else {
                        self.global(&name)
                    };
                    out.push(ch);
                    out.push_str(&renamed);
                    i = next;
                }
                _ => {
                    out.push(ch);
                    i += 1;
                }
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }
}

/// Reads the identifier after a sigil at `sigil_pos`; returns the name and
/// the index past it, or `None` when no token follows.
fn read_identifier(chars: &[char], sigil_pos: usize) -> Option<(String, usize)> {
    let mut i = sigil_pos + 1;
    if i < chars.len() && chars[i] == '"' {
        i += 1;
        let start = i;
        while i < chars.len() && chars[i] != '"' {
            i += 1;
        }
        if i >= chars.len() || i == start {
            return None;
        }
        let name: String = chars[start..i].iter().collect();
        return Some((name, i + 1));
    }
    let start = i;
    while i < chars.len() && is_identifier_char(chars[i]) {
        i += 1;
    }
    if i == start {
        return None;
    }
    Some((chars[start..i].iter().collect(), i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{extract_functions, LlvmModuleText};

    fn lift(text: &str) -> LiftedFunction {
        let module = LlvmModuleText::new("test.ll", text).unwrap();
        extract_functions(&module).unwrap().into_iter().next().unwrap()
    }

    fn norm(text: &str, ordinal: usize) -> NormalizedFunction {
        normalize(&lift(text), ordinal, &NormalizeOptions::default()).unwrap()
    }

    const SAMPLE: &str = "\
define i32 @UniqueFunctionName(i32 %a) #0 {
entry:
  %sum = add i32 %a, 1 ; increment
  %cmp = icmp sgt i32 %sum, 10, !range !4
  br i1 %cmp, label %big, label %small
big:
  %r1 = call i32 @helper_fn(i32 %sum)
  br label %done
small:
  %r2 = call i32 @printf(i8* @fmt_str, i32 %sum)
  br label %done
done:
  %out = phi i32 [ %r1, %big ], [ %r2, %small ]
  ret i32 %out
}
";

    #[test]
    fn renames_function_name_and_first_value() {
        let n = norm(SAMPLE, 1);
        assert!(
            n.canonical_text.starts_with("define i32 @func_1(i32 %v1)"),
            "got: {}",
            n.canonical_text.lines().next().unwrap()
        );
    }

    #[test]
    fn labels_and_values_numbered_by_first_occurrence() {
        let n = norm(SAMPLE, 1);
        let text = &n.canonical_text;
        assert!(text.contains("label_1:"), "entry is the first seen label");
        assert!(text.contains("br i1 %v3, label %label_2, label %label_3"));
        assert!(text.contains("%v6 = phi i32 [ %v4, %label_2 ], [ %v5, %label_3 ]"));
    }

    #[test]
    fn stdlib_calls_preserved_other_globals_renamed() {
        let n = norm(SAMPLE, 1);
        assert!(n.canonical_text.contains("call i32 @printf(i8* @g2, i32 %v2)"));
        assert!(n.canonical_text.contains("call i32 @g1(i32 %v2)"));
        assert!(!n.canonical_text.contains("helper_fn"));
        assert!(!n.canonical_text.contains("fmt_str"));
    }

    #[test]
    fn comments_metadata_and_attr_refs_removed() {
        let n = norm(SAMPLE, 1);
        assert!(!n.canonical_text.contains(';'));
        assert!(!n.canonical_text.contains("!range"));
        assert!(!n.canonical_text.contains("#0"));
        assert!(n.canonical_text.contains("%v3 = icmp sgt i32 %v2, 10"));
    }

    #[test]
    fn idempotent_under_renormalization() {
        let n = norm(SAMPLE, 1);
        let again = norm(&n.canonical_text, 1);
        assert_eq!(n.canonical_text, again.canonical_text);
        assert!(again.rename_map.is_empty(), "{:?}", again.rename_map);
    }

    #[test]
    fn renamed_clone_pair_collapses() {
        // Same function with every identifier consistently renamed; a manual
        // token-by-token comparison of the two canonical forms matches.
        let clone = SAMPLE
            .replace("UniqueFunctionName", "OtherName")
            .replace("%sum", "%total")
            .replace("%cmp", "%flag")
            .replace("entry", "start")
            .replace("%big", "%hi")
            .replace("big:", "hi:")
            .replace("helper_fn", "other_helper")
            .replace("fmt_str", "other_fmt");
        let a = norm(SAMPLE, 1);
        let b = norm(&clone, 1);
        assert_eq!(a.canonical_text, b.canonical_text);
        assert_eq!(a.content_hash, b.content_hash);
    }

    #[test]
    fn canonical_text_contains_no_original_identifier() {
        let n = norm(SAMPLE, 1);
        for (original, _) in &n.rename_map {
            for sigil in ['%', '@'] {
                let needle = format!("{sigil}{original}");
                for (pos, _) in n.canonical_text.match_indices(&needle) {
                    let after = n.canonical_text[pos + needle.len()..].chars().next();
                    assert!(
                        after.map_or(false, is_identifier_char),
                        "leaked identifier `{needle}`"
                    );
                }
            }
            assert!(
                !n.canonical_text.contains(&format!("\n{original}:")),
                "leaked label `{original}`"
            );
        }
    }

    #[test]
    fn ordinal_feeds_function_name() {
        let n = norm(SAMPLE, 7);
        assert!(n.canonical_text.contains("@func_7("));
    }

    #[test]
    fn whitespace_collapses_to_single_spaces() {
        let n = norm("define  void   @f( )  {\nentry:\n  ret   void\n}\n", 1);
        assert_eq!(n.canonical_text, "define void @func_1( )\n{\nlabel_1:\nret void\n}"
            .replace("( )\n{", "( ) {"));
    }

    #[test]
    fn malformed_identifier_is_an_error() {
        let f = LiftedFunction {
            original_name: "f".into(),
            raw_body: "define void @f() {\nentry:\n  %  = add i32 1, 1\n  ret void\n}".into(),
            source_path: "t.ll".into(),
            source_index: 0,
        };
        let err = normalize(&f, 1, &NormalizeOptions::default()).unwrap_err();
        assert!(matches!(err, IrError::MalformedIdentifier { sigil: '%', .. }));
    }

    #[test]
    fn dedupe_keeps_first_of_each_hash() {
        let fns: Vec<NormalizedFunction> = [SAMPLE, SAMPLE, "define void @x() {\nret void\n}"]
            .iter()
            .map(|t| norm(t, 1))
            .collect();
        let mut five = fns.clone();
        five.push(fns[0].clone());
        five.push(fns[2].clone());
        assert_eq!(five.len(), 5);
        let unique = dedupe(five);
        assert_eq!(unique.len(), 2);
        assert_eq!(unique[0].origin.original_name, "UniqueFunctionName");
    }

    #[test]
    fn llvm_intrinsics_preserved() {
        let text = "\
define void @f(i8* %d, i8* %s) {
entry:
  call void @llvm.memcpy.p0i8.p0i8.i64(i8* %d, i8* %s, i64 8, i1 false)
  ret void
}
";
        let n = norm(text, 1);
        assert!(n.canonical_text.contains("@llvm.memcpy.p0i8.p0i8.i64"));
    }

    #[test]
    fn hash_is_pure_function_of_text() {
        let a = norm(SAMPLE, 1);
        let b = norm(SAMPLE, 1);
        assert_eq!(a.content_hash, b.content_hash);
        assert_eq!(a.content_hash, sha256_hex(a.canonical_text.as_bytes()));
    }
}
