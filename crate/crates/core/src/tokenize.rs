//! Identifier-aware tokenizer shared by the sparse index and the queries.
//!
//! Text is lowercased and split on non-alphanumerics, underscores and
//! camel-case transitions. Dotted names such as `model.fit` are additionally
//! kept whole, so `model.fit(x)` yields `model.fit`, `model`, `fit`, `x`.

use std::sync::OnceLock;

use regex::Regex;

fn word_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*|[0-9]+").expect("valid regex")
    })
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for m in word_pattern().find_iter(text) {
        let word = m.as_str();
        if word.contains('.') {
            out.push(word.to_lowercase());
            for part in word.split('.') {
                split_identifier(part, &mut out);
            }
        } else {
            split_identifier(word, &mut out);
        }
    }
    out
}

/// Splits on underscores, lower→upper transitions, acronym boundaries
/// (`HTTPServer` → `http`, `server`) and letter/digit boundaries.
fn split_identifier(ident: &str, out: &mut Vec<String>) {
    for piece in ident.split('_').filter(|p| !p.is_empty()) {
        let chars: Vec<char> = piece.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = (prev.is_lowercase() && cur.is_uppercase())
                || (prev.is_uppercase() && cur.is_uppercase() && next_lower)
                || (prev.is_ascii_digit() != cur.is_ascii_digit());
            if boundary {
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
}
