//! Extraction of a clean docstring payload from raw model output.
//!
//! Rules run in a fixed order and the whole sequence is repeated until the
//! text stops changing, which makes [`normalize`] idempotent.

use serde::{Deserialize, Serialize};

use crate::text::{
    canonical, end_of_token, sentence_ends, split_sentences, whitespace_token_count,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    StripDelimiters,
    StripFences,
    TrimBoundaryPunct,
    CollapseRepeats,
    CapLength,
}

impl Rule {
    pub const ALL: [Rule; 5] = [
        Rule::StripDelimiters,
        Rule::StripFences,
        Rule::TrimBoundaryPunct,
        Rule::CollapseRepeats,
        Rule::CapLength,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub text: String,
    /// Rules that changed the text, in rule order.
    pub applied_rules: Vec<Rule>,
}

const TRIPLE_QUOTES: [&str; 2] = ["\"\"\"", "'''"];
const STRING_PREFIXES: [&str; 8] = ["r", "u", "b", "f", "R", "U", "B", "F"];
const CODE_LINE_STARTS: [&str; 5] = ["```", "~~~", "def ", "async def ", "class "];
const ORPHAN_PUNCT: [char; 3] = [':', ';', ','];
const TERMINAL_PUNCT: [char; 3] = ['.', '!', '?'];

/// Cleans `raw` into a docstring payload of at most `max_tokens`
/// whitespace tokens.
pub fn normalize(raw: &str, max_tokens: usize) -> Payload {
    let max_tokens = max_tokens.max(1);
    let mut text = raw.trim().to_string();
    let mut applied = [false; Rule::ALL.len()];

    // Every rule only shortens the text, except the ':' -> '.' substitution,
    // which cannot fire twice at the same position. The loop therefore ends.
    loop {
        let before = text.clone();
        for (idx, rule) in Rule::ALL.iter().enumerate() {
            let next = apply(*rule, &text, max_tokens);
            if next != text {
                applied[idx] = true;
                text = next;
            }
        }
        if text == before {
            break;
        }
    }

    Payload {
        text,
        applied_rules: Rule::ALL
            .iter()
            .zip(applied)
            .filter(|(_, a)| *a)
            .map(|(r, _)| *r)
            .collect(),
    }
}

fn apply(rule: Rule, text: &str, max_tokens: usize) -> String {
    let out = match rule {
        Rule::StripDelimiters => strip_delimiters(text),
        Rule::StripFences => strip_fences(text),
        Rule::TrimBoundaryPunct => trim_boundary_punct(text),
        Rule::CollapseRepeats => collapse_repeats(text),
        Rule::CapLength => cap_length(text, max_tokens),
    };
    out.trim().to_string()
}

fn strip_delimiters(text: &str) -> String {
    let mut out = text.trim().to_string();
    loop {
        let before = out.clone();
        for quote in TRIPLE_QUOTES {
            for prefix in STRING_PREFIXES {
                if let Some(rest) = out.strip_prefix(prefix).and_then(|r| r.strip_prefix(quote)) {
                    out = rest.to_string();
                }
            }
            out = out.replace(quote, "");
        }
        out = out.trim().to_string();
        for quote in ['"', '\''] {
            out = strip_lone_quote(&out, quote);
        }
        if out == before {
            return out;
        }
    }
}

/// Removes a boundary quote that has no partner, or a pair wrapping the
/// whole text.
fn strip_lone_quote(text: &str, quote: char) -> String {
    let count = text.matches(quote).count();
    let starts = text.starts_with(quote);
    let ends = text.ends_with(quote);
    let q = quote.len_utf8();
    if count == 2 && starts && ends && text.len() >= 2 * q {
        return text[q..text.len() - q].trim().to_string();
    }
    if count % 2 == 1 {
        if starts {
            return text[q..].trim_start().to_string();
        }
        if ends {
            return text[..text.len() - q].trim_end().to_string();
        }
    }
    text.to_string()
}

/// A fence on the first line wraps the whole reply rather than trailing it.
fn drop_opening_fence(text: &str) -> &str {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let first = first.trim();
    let info = first
        .strip_prefix("```")
        .or_else(|| first.strip_prefix("~~~"));
    match info {
        Some(tag)
            if tag
                .chars()
                .all(|c| c.is_alphanumeric() || c == '-' || c == '_') =>
        {
            rest
        }
        _ => text,
    }
}

fn strip_fences(text: &str) -> String {
    let text = drop_opening_fence(text);
    let mut offset = 0;
    let mut cut = text.len();
    for line in text.split_inclusive('\n') {
        let body = line.trim_start();
        if CODE_LINE_STARTS.iter().any(|s| body.starts_with(s)) {
            cut = offset;
            break;
        }
        offset += line.len();
    }
    let mut out = text[..cut].to_string();
    while out.contains("```") {
        out = out.replace("```", "");
    }
    out
}

fn trim_boundary_punct(text: &str) -> String {
    let leading = text.trim_start_matches(|c: char| ORPHAN_PUNCT.contains(&c) || c.is_whitespace());
    let body = leading.trim_end_matches(|c: char| ORPHAN_PUNCT.contains(&c) || c.is_whitespace());
    if body.is_empty() {
        return String::new();
    }
    let had_orphan = body.len() < leading.trim_end().len();
    if had_orphan && !body.ends_with(TERMINAL_PUNCT) {
        format!("{body}.")
    } else if had_orphan {
        body.to_string()
    } else {
        leading.to_string()
    }
}

fn collapse_repeats(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut previous: Option<String> = None;
    for segment in split_sentences(text) {
        let key = canonical(segment);
        if key.is_empty() {
            out.push_str(segment);
            continue;
        }
        if previous.as_deref() == Some(key.as_str()) {
            continue;
        }
        out.push_str(segment);
        previous = Some(key);
    }
    out
}

fn cap_length(text: &str, max_tokens: usize) -> String {
    if whitespace_token_count(text) <= max_tokens {
        return text.to_string();
    }
    let cut = end_of_token(text, max_tokens).expect("text has more than max_tokens tokens");
    let prefix = &text[..cut];
    match sentence_ends(prefix).last() {
        Some(&end) => prefix[..end].to_string(),
        None => prefix.to_string(),
    }
}
