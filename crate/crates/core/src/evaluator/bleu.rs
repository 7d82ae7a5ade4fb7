//! Sentence-level BLEU over assembly tokens.

use std::collections::HashMap;

/// Added in place of a zero n-gram precision so partial matches stay above 0.
pub const EPSILON: f64 = 1e-9;
pub const MAX_ORDER: usize = 4;

const PUNCT: &[char] = &[',', ':', '(', ')', '[', ']', '+'];

/// Splits on whitespace, then splits `, : ( ) [ ] +` into their own tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if PUNCT.contains(&c) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// BLEU of `hypothesis` against one reference: geometric mean of clipped
/// n-gram precisions for n = 1..=min(4, |hypothesis|), times the brevity
/// penalty. Identical non-empty inputs score exactly 1.
pub fn bleu<T: AsRef<str>, U: AsRef<str>>(reference: &[T], hypothesis: &[U]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let hypothesis: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    if reference == hypothesis {
        return 1.0;
    }
    let orders = MAX_ORDER.min(hypothesis.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let hyp = ngram_counts(&hypothesis, n);
        let refs = ngram_counts(&reference, n);
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let total = hypothesis.len() + 1 - n;
        let p = if matched == 0 { EPSILON } else { matched as f64 / total as f64 };
        log_sum += p.ln();
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / orders as f64).exp()
}

pub fn bleu_text(reference: &str, hypothesis: &str) -> f64 {
    bleu(&tokenize(reference), &tokenize(hypothesis))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_operands() {
        assert_eq!(
            tokenize("\tmovl\t%edi, -4(%rsp)\n.LBB0_1:"),
            ["movl", "%edi", ",", "-4", "(", "%rsp", ")", ".LBB0_1", ":"]
        );
        assert_eq!(tokenize("  "), Vec::<&str>::new());
    }

    #[test]
    fn identical_and_disjoint() {
        let a = ["a", "b", "c"];
        assert_eq!(bleu(&a, &a), 1.0);
        assert!(bleu(&a, &["x", "y", "z"]) < 1e-6);
        assert_eq!(bleu(&a, &[] as &[&str]), 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let r = ["a", "b", "c", "d"];
        let h = ["a", "b", "c"];
        // All precisions 1 over orders 1..3; BP = exp(1 - 4/3).
        assert!((bleu(&r, &h) - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
    }
}
