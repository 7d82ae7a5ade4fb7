//! Light-weight textual LLVM-IR inspection.

use std::sync::OnceLock;

use regex::Regex;

use super::ToolchainError;

/// Counts instruction statements across all function bodies.
///
/// A line counts iff it sits between a `define ... {` line and its closing
/// `}` and is not a basic-block label, a comment, or blank. Declarations
/// contribute nothing.
pub fn count_ir_instructions(ir: &str) -> Result<usize, ToolchainError> {
    let mut in_body = false;
    let mut count = 0;
    for (lineno, raw) in ir.lines().enumerate() {
        let line = raw.trim();
        if !in_body {
            if line.starts_with("define ") || line == "define" {
                if line.ends_with('{') {
                    in_body = true;
                } else {
                    return Err(ToolchainError::BadIr(format!(
                        "line {}: function header without `{{`",
                        lineno + 1
                    )));
                }
            }
            continue;
        }
        if line == "}" {
            in_body = false;
            continue;
        }
        if line.is_empty() || line.starts_with(';') || is_label(line) {
            continue;
        }
        count += 1;
    }
    if in_body {
        return Err(ToolchainError::BadIr("unterminated function body".into()));
    }
    Ok(count)
}

fn is_label(line: &str) -> bool {
    // `5:`, `entry:`, `"quoted name":`, optionally followed by a comment.
    let head = match line.find(';') {
        Some(pos) => line[..pos].trim_end(),
        None => line,
    };
    head.ends_with(':') && !head.contains(' ') || head.starts_with('"') && head.ends_with("\":")
}

/// Names of all functions with a body (`define`), in order.
pub fn defined_functions(ir: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r#"(?m)^define\b[^@\n]*@("(?:[^"\\]|\\.)*"|[-a-zA-Z$._0-9]+)\s*\("#).unwrap()
    });
    re.captures_iter(ir)
        .map(|c| c[1].trim_matches('"').to_string())
        .collect()
}
