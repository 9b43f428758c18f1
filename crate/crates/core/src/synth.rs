//! Desk-scale synthetic IR corpus with planted stack-buffer-overflow motifs.
//!
//! Each generated module holds one labeled motif function plus unlabeled
//! helper functions. A vulnerable motif allocates a fixed-size stack buffer
//! and calls a copy-style routine with no preceding bounds check; the clean
//! variant guards the copy behind an `icmp` + conditional branch. Helpers
//! carry loops, arithmetic, and library calls so the embedding corpus sees
//! the same token surface without any deciding pattern.
//!
//! The deciding motif is recoverable from the token stream alone:
//! [`oracle_label`] reproduces the ground truth with a two-line rule, so any
//! classifier miss is a pipeline bug, not label noise.

use crate::corpus::Label;
use crate::exec;
use crate::hash::derive_seed;
use crate::ir::LlvmModuleText;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_functions: usize,
    pub vulnerable_fraction: f64,
    pub seed: u64,
    /// Stack buffer sizes drawn from this inclusive range.
    pub buffer_size_range: (usize, usize),
    /// Extra label-irrelevant noise: more distractor instructions, and from
    /// level 2 on, branch-free `icmp`/`select` decoys in both classes.
    pub difficulty: u32,
    /// Raw lifted style (messy identifiers, comments, metadata) when true;
    /// already-canonical identifiers when false.
    pub raw_style: bool,
}

impl GeneratorSpec {
    pub fn new(n_functions: usize, vulnerable_fraction: f64, seed: u64) -> Self {
        Self {
            n_functions,
            vulnerable_fraction,
            seed,
            buffer_size_range: (8, 64),
            difficulty: 0,
            raw_style: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_functions < 10 {
            return Err(format!("n_functions {} < 10", self.n_functions));
        }
        if !(self.vulnerable_fraction > 0.0 && self.vulnerable_fraction < 1.0) {
            return Err(format!("vulnerable_fraction {} not in (0,1)", self.vulnerable_fraction));
        }
        if self.buffer_size_range.0 < 2 || self.buffer_size_range.0 > self.buffer_size_range.1 {
            return Err("bad buffer size range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedModule {
    pub module: LlvmModuleText,
    /// Ground truth for the module's single motif function.
    pub label: Label,
}

const COPY_CALLS: &[&str] = &["strcpy", "memcpy", "strcat", "sprintf"];

/// Generates `n_functions` single-motif modules, deterministic per seed.
/// Label balance is within one of `n * vulnerable_fraction`.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<GeneratedModule>, String> {
    spec.validate()?;
    let n = spec.n_functions;
    let n_vuln = (n as f64 * spec.vulnerable_fraction).round() as usize;
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Vulnerable, n_vuln)
        .chain(std::iter::repeat_n(Label::Clean, n - n_vuln))
        .collect();
    let mut label_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(&[&spec.seed.to_le_bytes(), b"labels"]));
    labels.shuffle(&mut label_rng);

    let indexed: Vec<(usize, Label)> = labels.into_iter().enumerate().collect();
    Ok(exec::map_ordered(&indexed, |&(i, label)| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &spec.seed.to_le_bytes(),
            b"module",
            &i.to_le_bytes(),
        ]));
        let text = render_module(spec, i, label, &mut rng);
        GeneratedModule {
            module: LlvmModuleText::new(format!("synth/case_{i:04}.ll"), text)
                .expect("generated modules are never empty"),
            label,
        }
    }))
}

/// Rule-based ground-truth recovery from (canonical or raw) function text:
/// a copy-style library call with no conditional branch anywhere before it
/// is vulnerable; a guarded copy is clean; no copy call means unlabeled.
pub fn oracle_label(function_text: &str) -> Label {
    let mut saw_branch = false;
    for line in function_text.lines() {
        if line.contains("br i1 ") {
            saw_branch = true;
        }
        if line.contains("call") && COPY_CALLS.iter().any(|c| line.contains(&format!("@{c}("))) {
            return if saw_branch { Label::Clean } else { Label::Vulnerable };
        }
    }
    Label::Unlabeled
}

struct Namer {
    raw: bool,
    counter: usize,
    suffix: String,
}

impl Namer {
    fn new(raw: bool, rng: &mut ChaCha8Rng) -> Self {
        let suffix = format!("{:05x}", rng.random_range(0..0xfffffu32));
        Self { raw, counter: 0, suffix }
    }

    fn value(&mut self, hint: &str) -> String {
        self.counter += 1;
        if self.raw {
            format!("%{}_{}_{}", hint, self.suffix, self.counter)
        } else {
            format!("%v{}", self.counter)
        }
    }

    fn label(&mut self, hint: &str, k: usize) -> String {
        if self.raw {
            format!("{}_{}_{}", hint, self.suffix, k)
        } else {
            format!("label_{k}")
        }
    }
}

fn render_module(spec: &GeneratorSpec, index: usize, label: Label, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    if spec.raw_style {
        out.push_str(&format!("; synthetic lifted module case_{index:04}\n"));
        out.push_str("target datalayout = \"e-m:e-i64:64-f80:128-n8:16:32:64-S128\"\n\n");
    }
    out.push_str(&format!(
        "@.fmt_{index} = private unnamed_addr constant [4 x i8] c\"%d\\0A\\00\"\n\n"
    ));
    for decl in [
        "declare i8* @strcpy(i8*, i8*)",
        "declare i8* @strcat(i8*, i8*)",
        "declare i8* @memcpy(i8*, i8*, i64)",
        "declare i32 @sprintf(i8*, i8*, ...)",
        "declare i64 @strlen(i8*)",
        "declare i32 @printf(i8*, ...)",
        "declare i8* @malloc(i64)",
        "declare void @free(i8*)",
    ] {
        out.push_str(decl);
        out.push('\n');
    }
    out.push('\n');

    let motif = render_motif(spec, index, label, rng);
    let n_helpers = 1 + (rng.random_range(0..=1) as u32 + spec.difficulty.min(2)) as usize;
    let mut functions = vec![motif];
    for k in 0..n_helpers {
        functions.push(render_helper(spec, index, k, rng));
    }
    // Motif position varies so extraction order carries no signal.
    if rng.random_range(0..2) == 1 {
        functions.rotate_left(1);
    }
    for f in functions {
        out.push_str(&f);
        out.push('\n');
    }

    if spec.raw_style {
        out.push_str("attributes #0 = { nounwind }\n");
        out.push_str(&format!("!{0} = !{{i32 {0}}}\n", rng.random_range(1..9)));
    }
    out
}

/// Straight-line distractor instructions; never emits a branch.
fn push_distractors(
    out: &mut String,
    namer: &mut Namer,
    rng: &mut ChaCha8Rng,
    count: usize,
    fmt_global: &str,
    decoys: bool,
    last_int: &mut String,
) {
    for _ in 0..count {
        match rng.random_range(0..if decoys { 6 } else { 4 }) {
            0 => {
                let v = namer.value("t");
                let op = ["add", "sub", "mul", "xor", "and", "or"][rng.random_range(0..6)];
                let c = rng.random_range(1..256);
                out.push_str(&format!("  {v} = {op} i32 {last_int}, {c}\n"));
                *last_int = v;
            }
            1 => {
                let slot = namer.value("slot");
                let val = namer.value("ld");
                let c = rng.random_range(0..1024);
                out.push_str(&format!("  {slot} = alloca i32, align 4\n"));
                out.push_str(&format!("  store i32 {c}, i32* {slot}, align 4\n"));
                out.push_str(&format!("  {val} = load i32, i32* {slot}, align 4\n"));
                *last_int = val;
            }
            2 => {
                let v = namer.value("shl");
                let c = rng.random_range(1..5);
                out.push_str(&format!("  {v} = shl i32 {last_int}, {c}\n"));
                *last_int = v;
            }
            3 => {
                let v = namer.value("call");
                out.push_str(&format!(
                    "  {v} = call i32 (i8*, ...) @printf(i8* getelementptr inbounds ([4 x i8], [4 x i8]* {fmt_global}, i32 0, i32 0), i32 {last_int})\n"
                ));
            }
            4 => {
                let cond = namer.value("dc");
                let sel = namer.value("sel");
                let c = rng.random_range(1..128);
                out.push_str(&format!("  {cond} = icmp slt i32 {last_int}, {c}\n"));
                out.push_str(&format!(
                    "  {sel} = select i1 {cond}, i32 {last_int}, i32 {c}\n"
                ));
                *last_int = sel;
            }
            _ => {
                let v = namer.value("neg");
                out.push_str(&format!("  {v} = sub i32 0, {last_int}\n"));
                *last_int = v;
            }
        }
    }
}

fn render_motif(spec: &GeneratorSpec, index: usize, label: Label, rng: &mut ChaCha8Rng) -> String {
    let mut namer = Namer::new(spec.raw_style, rng);
    let buf_size = rng.random_range(spec.buffer_size_range.0..=spec.buffer_size_range.1);
    let copy = COPY_CALLS[rng.random_range(0..COPY_CALLS.len())];
    let fmt = format!("@.fmt_{index}");
    let name = match label {
        Label::Vulnerable => format!("CWE121_synth_case_{index:04}_bad"),
        _ => {
            let variant = ["good", "goodG2B", "goodB2G"][rng.random_range(0..3)];
            format!("CWE121_synth_case_{index:04}_{variant}")
        }
    };

    let mut out = String::new();
    let src = namer.value("src");
    let n_arg = namer.value("n");
    out.push_str(&format!("define i32 @{name}(i8* {src}, i32 {n_arg}) {{\n"));
    out.push_str(&format!("{}:\n", namer.label("entry", 1)));
    if spec.raw_style {
        out.push_str("  ; stack setup\n");
    }
    let buf = namer.value("buf");
    let ptr = namer.value("ptr");
    out.push_str(&format!("  {buf} = alloca [{buf_size} x i8], align 1\n"));
    out.push_str(&format!(
        "  {ptr} = getelementptr inbounds [{buf_size} x i8], [{buf_size} x i8]* {buf}, i32 0, i32 0\n"
    ));

    let mut last_int = n_arg.clone();
    let noise = 2 + spec.difficulty as usize * 2;
    let decoys = spec.difficulty >= 2;
    let pre_noise = rng.random_range(1..=noise);
    push_distractors(&mut out, &mut namer, rng, pre_noise, &fmt, decoys, &mut last_int);

    let dbg = if spec.raw_style && rng.random_range(0..2) == 1 { ", !dbg !4" } else { "" };
    match label {
        Label::Vulnerable => {
            emit_copy(&mut out, &mut namer, copy, &ptr, &src, buf_size * 2, dbg);
        }
        _ => {
            let len = namer.value("len");
            let ok = namer.value("ok");
            let copy_lbl = namer.label("copy_ok", 2);
            let done_lbl = namer.label("done", 3);
            out.push_str(&format!("  {len} = call i64 @strlen(i8* {src})\n"));
            out.push_str(&format!("  {ok} = icmp ult i64 {len}, {buf_size}\n"));
            out.push_str(&format!(
                "  br i1 {ok}, label %{copy_lbl}, label %{done_lbl}{dbg}\n"
            ));
            out.push_str(&format!("{copy_lbl}:\n"));
            emit_copy(&mut out, &mut namer, copy, &ptr, &src, buf_size / 2, "");
            out.push_str(&format!("  br label %{done_lbl}\n"));
            out.push_str(&format!("{done_lbl}:\n"));
        }
    }
    let post_noise = rng.random_range(1..=noise);
    push_distractors(&mut out, &mut namer, rng, post_noise, &fmt, decoys, &mut last_int);
    out.push_str(&format!("  ret i32 {last_int}\n}}\n"));
    out
}

fn emit_copy(
    out: &mut String,
    namer: &mut Namer,
    copy: &str,
    ptr: &str,
    src: &str,
    len: usize,
    dbg: &str,
) {
    let result = namer.value("cp");
    match copy {
        "memcpy" => out.push_str(&format!(
            "  {result} = call i8* @memcpy(i8* {ptr}, i8* {src}, i64 {len}){dbg}\n"
        )),
        "sprintf" => out.push_str(&format!(
            "  {result} = call i32 (i8*, i8*, ...) @sprintf(i8* {ptr}, i8* {src}){dbg}\n"
        )),
        _ => out.push_str(&format!(
            "  {result} = call i8* @{copy}(i8* {ptr}, i8* {src}){dbg}\n"
        )),
    }
}

/// Unlabeled helper: a counted loop plus distractors, sometimes a guarded
/// copy, so the embedding corpus shares the motif's token surface.
fn render_helper(spec: &GeneratorSpec, index: usize, k: usize, rng: &mut ChaCha8Rng) -> String {
    let mut namer = Namer::new(spec.raw_style, rng);
    let fmt = format!("@.fmt_{index}");
    let mut out = String::new();
    let arg = namer.value("arg");
    out.push_str(&format!("define i32 @synth_util_{index:04}_{k}(i32 {arg}) {{\n"));
    let entry = namer.label("entry", 1);
    let loop_lbl = namer.label("loop", 2);
    let exit_lbl = namer.label("exit", 3);
    out.push_str(&format!("{entry}:\n"));

    let mut last_int = arg.clone();
    let noise = 2 + spec.difficulty as usize;
    let pre_noise = rng.random_range(1..=noise);
    push_distractors(&mut out, &mut namer, rng, pre_noise, &fmt, spec.difficulty >= 2, &mut last_int);

    // A bounded count-up loop: the same icmp/br tokens the guard uses, in a
    // label-neutral setting.
    let slot = namer.value("ctr");
    let bound = rng.random_range(4..64);
    out.push_str(&format!("  {slot} = alloca i32, align 4\n"));
    out.push_str(&format!("  store i32 0, i32* {slot}, align 4\n"));
    out.push_str(&format!("  br label %{loop_lbl}\n"));
    out.push_str(&format!("{loop_lbl}:\n"));
    let cur = namer.value("cur");
    let next = namer.value("next");
    let cond = namer.value("again");
    out.push_str(&format!("  {cur} = load i32, i32* {slot}, align 4\n"));
    out.push_str(&format!("  {next} = add i32 {cur}, 1\n"));
    out.push_str(&format!("  store i32 {next}, i32* {slot}, align 4\n"));
    out.push_str(&format!("  {cond} = icmp slt i32 {next}, {bound}\n"));
    out.push_str(&format!(
        "  br i1 {cond}, label %{loop_lbl}, label %{exit_lbl}\n"
    ));
    out.push_str(&format!("{exit_lbl}:\n"));

    if rng.random_range(0..3) == 0 {
        // Guarded copy in an unlabeled function.
        let buf = namer.value("hbuf");
        let ptr = namer.value("hptr");
        let size = rng.random_range(8..32);
        let hsrc = namer.value("hsrc");
        out.push_str(&format!("  {buf} = alloca [{size} x i8], align 1\n"));
        out.push_str(&format!(
            "  {ptr} = getelementptr inbounds [{size} x i8], [{size} x i8]* {buf}, i32 0, i32 0\n"
        ));
        out.push_str(&format!("  {hsrc} = call i8* @malloc(i64 {size})\n"));
        let ok = namer.value("hok");
        let cp_lbl = namer.label("hcopy", 4);
        let done_lbl = namer.label("hdone", 5);
        out.push_str(&format!("  {ok} = icmp ult i32 {last_int}, {size}\n"));
        out.push_str(&format!("  br i1 {ok}, label %{cp_lbl}, label %{done_lbl}\n"));
        out.push_str(&format!("{cp_lbl}:\n"));
        emit_copy(&mut out, &mut namer, "strcpy", &ptr, &hsrc, size, "");
        out.push_str(&format!("  br label %{done_lbl}\n"));
        out.push_str(&format!("{done_lbl}:\n"));
        out.push_str(&format!("  call void @free(i8* {hsrc})\n"));
    } else {
        let tail_noise = rng.random_range(1..=noise);
        push_distractors(&mut out, &mut namer, rng, tail_noise, &fmt, false, &mut last_int);
    }
    out.push_str(&format!("  ret i32 {last_int}\n}}\n"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::label_from_name;
    use crate::ir::{extract_functions, normalize, NormalizeOptions};

    fn spec(n: usize, seed: u64) -> GeneratorSpec {
        GeneratorSpec::new(n, 0.4, seed)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(100, 7)).unwrap();
        let b = generate(&spec(100, 7)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.module.content, y.module.content);
            assert_eq!(x.label, y.label);
        }
        let c = generate(&spec(100, 8)).unwrap();
        assert_ne!(a[0].module.content, c[0].module.content);
    }

    #[test]
    fn label_balance_within_one() {
        for n in [10, 57, 100] {
            let modules = generate(&spec(n, 3)).unwrap();
            let vuln = modules.iter().filter(|m| m.label == Label::Vulnerable).count();
            assert!(
                (vuln as f64 - n as f64 * 0.4).abs() <= 1.0,
                "n={n}: {vuln} vulnerable"
            );
        }
    }

    #[test]
    fn every_function_extracts_and_normalizes() {
        for seed in 0..10 {
            let mut s = spec(12, seed);
            s.difficulty = (seed % 4) as u32;
            s.raw_style = seed % 2 == 0;
            let modules = generate(&s).unwrap();
            for gm in &modules {
                let fns = extract_functions(&gm.module).unwrap();
                assert!(fns.len() >= 2, "motif plus at least one helper");
                for (i, f) in fns.iter().enumerate() {
                    normalize(f, i + 1, &NormalizeOptions::default()).unwrap();
                }
            }
        }
    }

    #[test]
    fn oracle_matches_ground_truth_on_motifs() {
        for difficulty in [0, 2, 4] {
            let mut s = spec(60, 11 + difficulty as u64);
            s.difficulty = difficulty;
            let modules = generate(&s).unwrap();
            for gm in &modules {
                let fns = extract_functions(&gm.module).unwrap();
                let motif = fns
                    .iter()
                    .find(|f| label_from_name(&f.original_name) != Label::Unlabeled)
                    .expect("one labeled motif per module");
                assert_eq!(
                    oracle_label(&motif.raw_body),
                    gm.label,
                    "difficulty {difficulty}, fn {}",
                    motif.original_name
                );
                // Name-derived label agrees with generator ground truth.
                assert_eq!(label_from_name(&motif.original_name), gm.label);
            }
        }
    }

    #[test]
    fn oracle_survives_normalization() {
        let modules = generate(&spec(30, 13)).unwrap();
        for gm in &modules {
            let fns = extract_functions(&gm.module).unwrap();
            let motif = fns
                .iter()
                .find(|f| label_from_name(&f.original_name) != Label::Unlabeled)
                .unwrap();
            let normalized = normalize(motif, 1, &NormalizeOptions::default()).unwrap();
            assert_eq!(oracle_label(&normalized.canonical_text), gm.label);
        }
    }

    #[test]
    fn helpers_are_unlabeled_and_tag_free() {
        let modules = generate(&spec(20, 17)).unwrap();
        let mut helper_count = 0;
        for gm in &modules {
            for f in extract_functions(&gm.module).unwrap() {
                if f.original_name.starts_with("synth_util_") {
                    helper_count += 1;
                    assert_eq!(label_from_name(&f.original_name), Label::Unlabeled);
                    assert_eq!(crate::corpus::cwe_tag(&f.original_name, &f.source_path), None);
                }
            }
        }
        assert!(helper_count >= 20, "helpers populate the embedding corpus");
    }

    #[test]
    fn difficulty_changes_text_but_not_labels() {
        let base = generate(&spec(25, 19)).unwrap();
        let mut hard = spec(25, 19);
        hard.difficulty = 3;
        let noisy = generate(&hard).unwrap();
        for (a, b) in base.iter().zip(noisy.iter()) {
            assert_eq!(a.label, b.label);
        }
        assert_ne!(base[0].module.content, noisy[0].module.content);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&spec(5, 1)).is_err());
        let mut s = spec(20, 1);
        s.vulnerable_fraction = 1.0;
        assert!(generate(&s).is_err());
    }
}
