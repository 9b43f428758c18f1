//! Function extraction from `.ll` module text.

use super::{IrError, LiftedFunction, LlvmModuleText};

/// Extracts every `define` block from a module, in source order.
///
/// `declare` lines, global definitions, attribute groups, and metadata nodes
/// outside function bodies are skipped. Brace depth is only counted outside
/// string literals and comments, so a `{` inside `c"{"` does not confuse the
/// matcher. A module with no definitions yields an empty list.
pub fn extract_functions(module: &LlvmModuleText) -> Result<Vec<LiftedFunction>, IrError> {
    let mut out = Vec::new();
    let lines: Vec<&str> = module.content.lines().collect();
    let mut i = 0;

    while i < lines.len() {
        let trimmed = lines[i].trim_start();
        if !is_define_line(trimmed) {
            i += 1;
            continue;
        }
        let start_line = i;
        let original_name = parse_define_name(trimmed)?;

        // Scan forward counting parens (parameter list) and braces (body).
        let mut paren_depth: i64 = 0;
        let mut params_closed = false;
        let mut brace_depth: i64 = 0;
        let mut body_opened = false;
        let mut end: Option<(usize, usize)> = None; // (line index, byte offset past '}')

        'scan: for (j, line) in lines.iter().enumerate().skip(start_line) {
            let mut in_string = false;
            for (pos, ch) in line.char_indices() {
                if in_string {
                    if ch == '"' {
                        in_string = false;
                    }
                    continue;
                }
                match ch {
                    '"' => in_string = true,
                    ';' => break, // comment to end of line
                    '(' => paren_depth += 1,
                    ')' => {
                        paren_depth -= 1;
                        if paren_depth == 0 {
                            params_closed = true;
                        }
                    }
                    '{' if params_closed || body_opened => {
                        brace_depth += 1;
                        body_opened = true;
                    }
                    '}' if body_opened => {
                        brace_depth -= 1;
                        if brace_depth == 0 {
                            end = Some((j, pos + ch.len_utf8()));
                            break 'scan;
                        }
                    }
                    _ => {}
                }
            }
        }

        let (end_line, end_offset) = end.ok_or(IrError::UnbalancedBraces {
            source_path: module.source_path.clone(),
            line: start_line + 1,
        })?;

        let mut raw = String::new();
        for (j, line) in lines.iter().enumerate().take(end_line + 1).skip(start_line) {
            let piece = if j == end_line { &line[..end_offset] } else { line };
            let piece = if j == start_line {
                piece.trim_start()
            } else {
                piece
            };
            raw.push_str(piece);
            if j != end_line {
                raw.push('\n');
            }
        }

        out.push(LiftedFunction {
            original_name,
            raw_body: raw,
            source_path: module.source_path.clone(),
            source_index: out.len(),
        });
        i = end_line + 1;
    }

    Ok(out)
}

fn is_define_line(trimmed: &str) -> bool {
    trimmed.starts_with("define")
        && trimmed[6..]
            .chars()
            .next()
            .map_or(false, |c| c.is_whitespace())
}

fn parse_define_name(line: &str) -> Result<String, IrError> {
    let at = line.find('@').ok_or_else(|| IrError::MalformedIdentifier {
        sigil: '@',
        context: line.chars().take(60).collect(),
    })?;
    let rest = &line[at + 1..];
    let name = if let Some(stripped) = rest.strip_prefix('"') {
        match stripped.find('"') {
            Some(close) => stripped[..close].to_string(),
            None => String::new(),
        }
    } else {
        rest.chars()
            .take_while(|c| is_identifier_char(*c))
            .collect::<String>()
    };
    if name.is_empty() {
        return Err(IrError::MalformedIdentifier {
            sigil: '@',
            context: line.chars().take(60).collect(),
        });
    }
    Ok(name)
}

pub(super) fn is_identifier_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '$' | '.' | '_' | '-')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(text: &str) -> LlvmModuleText {
        LlvmModuleText::new("test.ll", text).unwrap()
    }

    #[test]
    fn two_defines_three_declares() {
        let text = "\
declare i32 @printf(i8*, ...)
define i32 @a(i32 %x) {
entry:
  ret i32 %x
}
declare i8* @malloc(i64)
define void @b() {
entry:
  ret void
}
declare void @free(i8*)
";
        let fns = extract_functions(&module(text)).unwrap();
        assert_eq!(fns.len(), 2);
        assert_eq!(fns[0].original_name, "a");
        assert_eq!(fns[1].original_name, "b");
        assert_eq!(fns[0].source_index, 0);
        assert_eq!(fns[1].source_index, 1);
        assert!(fns[0].raw_body.starts_with("define i32 @a"));
        assert!(fns[0].raw_body.ends_with('}'));
    }

    #[test]
    fn declares_only_yield_empty_list() {
        let fns = extract_functions(&module("declare i32 @printf(i8*, ...)\n")).unwrap();
        assert!(fns.is_empty());
    }

    #[test]
    fn brace_inside_string_constant() {
        // Hand fixture: body holds a c"{" constant; manual count says the
        // function closes on the final line.
        let text = "\
@s = private constant [2 x i8] c\"{\\00\"
define i8* @f() {
entry:
  %p = getelementptr [2 x i8], [2 x i8]* @s, i32 0, i32 0
  store i8 123, i8* %p
  %q = call i8* @g(i8* getelementptr ([2 x i8], [2 x i8]* @s, i32 0, i32 0))
  ret i8* %q
}
";
        let fns = extract_functions(&module(text)).unwrap();
        assert_eq!(fns.len(), 1);
        assert!(fns[0].raw_body.ends_with("ret i8* %q\n}"));
    }

    #[test]
    fn struct_return_type_braces_do_not_end_body() {
        let text = "\
define { i32, i32 } @pair(i32 %a) {
entry:
  %r = insertvalue { i32, i32 } undef, i32 %a, 0
  ret { i32, i32 } %r
}
";
        let fns = extract_functions(&module(text)).unwrap();
        assert_eq!(fns.len(), 1);
        assert_eq!(fns[0].original_name, "pair");
        assert!(fns[0].raw_body.ends_with('}'));
    }

    #[test]
    fn unbalanced_braces_is_an_error() {
        let text = "define void @broken() {\nentry:\n  ret void\n";
        let err = extract_functions(&module(text)).unwrap_err();
        assert_eq!(
            err,
            IrError::UnbalancedBraces {
                source_path: "test.ll".into(),
                line: 1
            }
        );
    }

    #[test]
    fn braces_in_comments_are_ignored() {
        let text = "\
define void @c() {
entry: ; a comment with } and { braces
  ret void ; }
}
";
        let fns = extract_functions(&module(text)).unwrap();
        assert_eq!(fns.len(), 1);
    }

    #[test]
    fn attribute_groups_and_metadata_outside_bodies_are_skipped() {
        let text = "\
attributes #0 = { nounwind \"frame-pointer\"=\"all\" }
!0 = !{i32 1, !\"wchar_size\", i32 4}
define void @only() #0 {
entry:
  ret void
}
";
        let fns = extract_functions(&module(text)).unwrap();
        assert_eq!(fns.len(), 1);
        assert_eq!(fns[0].original_name, "only");
    }

    #[test]
    fn quoted_function_name() {
        let text = "define void @\"odd name\"() {\nentry:\n  ret void\n}\n";
        let fns = extract_functions(&module(text)).unwrap();
        assert_eq!(fns[0].original_name, "odd name");
    }
}
